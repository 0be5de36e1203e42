//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 user error (bad flags, missing or invalid input
//! files), 2 runtime or backend failure. Payloads go to stdout; diagnostics
//! go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::backends::{BackendHandle, BackendSpec, Client, Decoding, ResponseCache};
use crate::dataset::{load_split, subsample, validate_images, DatasetError, SplitName};
use crate::gridrun::{
    best_run, load_predictions, load_runs, render_report, run_grid, GridError, GridOptions, GridSpec, ReportFormat,
    RunSummary,
};
use crate::labeling::{
    consistency_filter, distill, export_training_file, read_scaled, write_jsonl, DistillSettings, DistillSummary,
    ExportSource, LabelingError,
};
use crate::metrics::{evaluate_run, FailurePolicy};
use crate::parsing::DEFAULT_THRESHOLD;
use crate::promptkit::PromptLibrary;
use crate::{par, LabelKind, Modality, PromptKind};

#[derive(Debug, Parser)]
#[command(name = "memegrid", version, about = "Prompt, distill, run and score hateful-meme classification grids")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for subsampling; overrides the grid file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads per run.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Response cache directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Scale value at or above which an answer counts as hateful.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=9))]
    pub threshold: Option<u8>,
    /// How unparseable answers enter the metrics: pessimistic or exclude.
    #[arg(long, global = true)]
    pub policy: Option<FailurePolicy>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset split (and its images).
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: SplitName,
        #[arg(long)]
        require_labels: bool,
    },
    /// Print one prompt composition exactly.
    Compose {
        #[arg(long)]
        prompt: PromptKind,
        #[arg(long)]
        label: LabelKind,
        #[arg(long)]
        prompts_dir: Option<PathBuf>,
    },
    /// Collect teacher scale labels and filter them against ground truth.
    Distill {
        #[arg(long)]
        data: PathBuf,
        /// Backend id from the config file.
        #[arg(long)]
        teacher: String,
        /// File with a `backends` list (a grid file works).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "simple")]
        prompt: PromptKind,
        #[arg(long, default_value = "multimodal")]
        modality: Modality,
        #[arg(long, default_value = ".")]
        images: PathBuf,
        /// Only distill a stratified subsample of this many records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write a fine-tuning corpus.
    ExportTrain {
        /// Labeled split (binary targets).
        #[arg(long, required_unless_present = "scaled")]
        data: Option<PathBuf>,
        /// Output of `distill` (scale or binary targets).
        #[arg(long)]
        scaled: Option<PathBuf>,
        #[arg(long)]
        prompt: PromptKind,
        #[arg(long)]
        label: LabelKind,
        #[arg(long, default_value = "multimodal")]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute every run of a grid file.
    Run {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_cache: bool,
        #[arg(long)]
        prompts_dir: Option<PathBuf>,
    },
    /// Score a prediction file against a labeled split.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "table")]
        format: EvalFormat,
    },
    /// Render the results table of a grid output directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the configuration of the best run.
    Best {
        #[arg(long)]
        runs: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalFormat {
    Table,
    Json,
}

impl std::str::FromStr for EvalFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(EvalFormat::Table),
            "json" => Ok(EvalFormat::Json),
            other => Err(format!("unknown format `{other}` (expected table or json)")),
        }
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn user(message: impl std::fmt::Display) -> Self {
        CliError { code: 1, message: message.to_string() }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        CliError { code: 2, message: message.to_string() }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::user(e)
    }
}

impl From<LabelingError> for CliError {
    fn from(e: LabelingError) -> Self {
        match e {
            LabelingError::Io { .. } => CliError::runtime(e),
            _ => CliError::user(e),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Invalid(_) | GridError::ReadSpec { .. } | GridError::ParseSpec { .. } | GridError::Dataset(_) => {
                CliError::user(e)
            }
            _ => CliError::runtime(e),
        }
    }
}

#[derive(Debug, Deserialize)]
struct BackendsFile {
    backends: Vec<BackendSpec>,
    #[serde(default)]
    decoding: Option<Decoding>,
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(CliError::runtime)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_prompts(dir: Option<&Path>) -> Result<PromptLibrary, CliError> {
    match dir {
        Some(d) => PromptLibrary::load(d).map_err(|e| CliError::user(format!("prompt directory {}: {e}", d.display()))),
        None => Ok(PromptLibrary::default()),
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run_cli<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(rendered.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(rendered.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            if e.code == 1 {
                use clap::CommandFactory;
                let _ = writeln!(stderr, "{}", Cli::command().render_usage());
            }
            e.code
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let g = cli.global;
    let threshold = g.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let workers = g.workers.unwrap_or(par::DEFAULT_WORKERS);
    match cli.command {
        Command::Ingest { data, images, split, require_labels } => {
            let loaded = load_split(&data, split, require_labels)?;
            let positives = loaded.records.iter().filter(|r| r.label.is_some_and(|l| l.is_hateful())).count();
            let labeled = loaded.records.iter().filter(|r| r.label.is_some()).count();
            let report = match &images {
                Some(root) => Some(validate_images(&loaded, root)?),
                None => None,
            };
            let summary = serde_json::json!({
                "split": split,
                "records": loaded.len(),
                "labeled": labeled,
                "hateful": positives,
                "missing_images": report.as_ref().map(|r| r.missing.clone()),
            });
            emit(stdout, &to_json(&summary))?;
            if let Some(r) = report.filter(|r| !r.missing.is_empty()) {
                return Err(CliError::user(format!("{} record(s) reference missing images", r.missing.len())));
            }
            Ok(())
        }
        Command::Compose { prompt, label, prompts_dir } => {
            let lib = load_prompts(prompts_dir.as_deref())?;
            emit(stdout, &lib.compose(prompt, label).text)
        }
        Command::Distill { data, teacher, config, out, prompt, modality, images, limit } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::user(format!("cannot read {}: {e}", config.display())))?;
            let file: BackendsFile =
                serde_json::from_str(&text).map_err(|e| CliError::user(format!("cannot parse {}: {e}", config.display())))?;
            let spec = file
                .backends
                .iter()
                .find(|b| b.id == teacher)
                .ok_or_else(|| CliError::user(format!("no backend `{teacher}` in {}", config.display())))?;
            let mut split = load_split(&data, SplitName::Train, true)?;
            if let Some(n) = limit {
                split = subsample(&split, n, g.seed.unwrap_or(0));
            }
            let handle = BackendHandle::from_spec(spec).map_err(CliError::user)?;
            let cache = match &g.cache_dir {
                Some(dir) => Some(ResponseCache::new(dir).map_err(CliError::runtime)?),
                None => None,
            };
            let client = Client::new(handle, cache);
            let settings = DistillSettings {
                prompt_kind: prompt,
                modality,
                image_root: images,
                decoding: file.decoding.unwrap_or_default(),
                threshold,
                workers,
            };
            let scaled = distill(&split, &client, &PromptLibrary::default(), &settings)?;
            write_jsonl(&out, &scaled)?;
            let summary = DistillSummary::from_records(&scaled, &teacher, threshold, prompt);
            let sidecar = sidecar_path(&out);
            write_jsonl(&sidecar, std::slice::from_ref(&summary))?;
            emit(stdout, &to_json(&summary))?;
            if summary.failed == summary.total && summary.total > 0 {
                return Err(CliError::runtime("teacher failed on every record"));
            }
            Ok(())
        }
        Command::ExportTrain { data, scaled, prompt, label, modality, out } => {
            let lib = PromptLibrary::default();
            let written = match (scaled, data) {
                (Some(path), _) => {
                    let all = read_scaled(&path)?;
                    let kept = consistency_filter(&all, threshold);
                    export_training_file(ExportSource::Scaled(&kept), &lib, prompt, label, modality, threshold, &out)?
                }
                (None, Some(path)) => {
                    if label == LabelKind::Scale {
                        return Err(CliError::user("scale targets need --scaled (output of distill)"));
                    }
                    let split = load_split(&path, SplitName::Train, true)?;
                    export_training_file(ExportSource::Labeled(&split.records), &lib, prompt, label, modality, threshold, &out)?
                }
                (None, None) => return Err(CliError::user("one of --data or --scaled is required")),
            };
            emit(stdout, &to_json(&serde_json::json!({"written": written, "out": out})))
        }
        Command::Run { grid, out, no_cache, prompts_dir } => {
            let mut spec = GridSpec::load(&grid)?;
            if let Some(seed) = g.seed {
                spec.seed = seed;
            }
            if let Some(t) = g.threshold {
                spec.threshold = t;
            }
            if let Some(p) = g.policy {
                spec.policy = p;
            }
            let options = GridOptions { workers: g.workers, cache_dir: g.cache_dir, no_cache, prompts_dir };
            let results = run_grid(&spec, &out, &options)?;
            for (config, outcome) in &results {
                log::info!(
                    "run {}: {} resumed, {} processed, {} backend calls",
                    config.run_id,
                    outcome.resumed,
                    outcome.processed,
                    outcome.backend_calls
                );
            }
            let dead: Vec<String> = results
                .iter()
                .filter_map(|(c, o)| o.manifest.as_ref().map(|m| (c, m.counts)))
                .filter(|(_, n)| n.records > 0 && n.backend_error == n.records)
                .map(|(c, _)| c.run_id.clone())
                .collect();
            let summaries: Vec<RunSummary> = results
                .into_iter()
                .map(|(config, outcome)| RunSummary { config, metrics: outcome.manifest.and_then(|m| m.metrics) })
                .collect();
            emit(stdout, &render_report(&summaries, ReportFormat::Table))?;
            if !dead.is_empty() {
                return Err(CliError::runtime(format!("backend failed on every record of run(s) {}", dead.join(", "))));
            }
            Ok(())
        }
        Command::Evaluate { predictions, data, format } => {
            let split = load_split(&data, SplitName::Dev, true)?;
            let preds = load_predictions(&predictions, None).map_err(|e| match e {
                GridError::Io { .. } | GridError::Corrupt { .. } => CliError::user(e),
                other => CliError::runtime(other),
            })?;
            if preds.is_empty() && !predictions.is_file() {
                return Err(CliError::user(format!("prediction file {} not found", predictions.display())));
            }
            let report = evaluate_run(&preds, &split, g.policy.unwrap_or_default(), threshold).map_err(CliError::user)?;
            match format {
                EvalFormat::Json => emit(stdout, &to_json(&report)),
                EvalFormat::Table => {
                    use crate::gridrun::percent as pct;
                    let auroc = report.auroc.map(pct).unwrap_or_else(|| "n/a".into());
                    let text = format!(
                        "accuracy {}\nprecision {}\nrecall {}\nf1 {}\nauroc {}\nparse_failure_rate {}\nn {}\npolicy {}\nthreshold {}\n",
                        pct(report.accuracy),
                        pct(report.precision),
                        pct(report.recall),
                        pct(report.f1),
                        auroc,
                        pct(report.parse_failure_rate),
                        report.n,
                        report.policy,
                        report.threshold_used
                    );
                    emit(stdout, &text)
                }
            }
        }
        Command::Report { runs, format, out } => {
            let summaries = load_runs(&runs).map_err(CliError::user)?;
            if summaries.is_empty() {
                return Err(CliError::user(format!("no completed runs under {}", runs.display())));
            }
            let text = render_report(&summaries, format);
            match out {
                Some(path) => crate::util::write_atomic(&path, text.as_bytes()).map_err(CliError::runtime),
                None => emit(stdout, &text),
            }
        }
        Command::Best { runs } => {
            let summaries = load_runs(&runs).map_err(CliError::user)?;
            let best = best_run(&summaries)
                .ok_or_else(|| CliError::user(format!("no run with metrics under {}", runs.display())))?;
            emit(stdout, &to_json(&best.config))
        }
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli(std::iter::once("memegrid").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn compose_prints_exact_text() {
        let (code, out, _) = run(&["compose", "--prompt", "simple", "--label", "binary"]);
        assert_eq!(code, 0);
        assert!(out.starts_with("Your task is to analyze this given image"));
        assert_eq!(out, crate::promptkit::compose(PromptKind::Simple, LabelKind::Binary).text);
    }

    #[test]
    fn unknown_flag_is_user_error() {
        let (code, _, err) = run(&["compose", "--bogus"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage"));
    }

    #[test]
    fn missing_grid_file_is_user_error() {
        let (code, _, err) = run(&["run", "--grid", "/nonexistent/grid.json", "--out", "/tmp/x"]);
        assert_eq!(code, 1);
        assert!(err.contains("Usage: memegrid"), "{err}");
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("a/b.jsonl")), PathBuf::from("a/b.jsonl.manifest.json"));
    }
}
