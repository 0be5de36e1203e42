use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::execute::{RunManifest, MANIFEST_FILE};
use super::{GridError, RunConfig};
use crate::metrics::MetricsReport;
use crate::{LabelKind, PromptKind};

pub const COLUMNS: [&str; 9] =
    ["Category", "Model", "Prompt", "Label", "Accuracy", "Precision", "Recall", "F1-score", "AUROC"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub metrics: Option<MetricsReport>,
}

impl From<RunManifest> for RunSummary {
    fn from(m: RunManifest) -> Self {
        RunSummary { config: m.config, metrics: m.metrics }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Markdown table; best accuracy / AUROC cells in bold.
    Table,
    /// RFC 4180 CSV with plain values.
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format `{other}` (expected table or csv)")),
        }
    }
}

/// Completed runs under `<dir>/runs/*/manifest.json`, in enumeration order.
pub fn load_runs(dir: &Path) -> Result<Vec<RunSummary>, GridError> {
    let runs_dir = dir.join("runs");
    let entries = fs::read_dir(&runs_dir).map_err(|e| GridError::io(&runs_dir, e))?;
    let mut manifests = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| GridError::io(&runs_dir, e))?;
        let path = entry.path().join(MANIFEST_FILE);
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| GridError::io(&path, e))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| GridError::Corrupt { path: path.clone(), line: 1, message: e.to_string() })?;
        manifests.push(manifest);
    }
    manifests.sort_by(|a, b| a.config.ordinal.cmp(&b.config.ordinal).then_with(|| a.config.run_id.cmp(&b.config.run_id)));
    Ok(manifests.into_iter().map(RunSummary::from).collect())
}

/// Fraction rendered as a percentage with three decimals, e.g. 0.68933 -> "68.933".
pub fn percent(x: f64) -> String {
    format!("{:.3}", x * 100.0)
}

fn prompt_label(p: PromptKind) -> &'static str {
    match p {
        PromptKind::Simple => "Simple",
        PromptKind::Category => "Category",
    }
}

fn label_label(l: LabelKind) -> &'static str {
    match l {
        LabelKind::Binary => "Binary",
        LabelKind::Scale => "Scale",
    }
}

fn max_of(runs: &[RunSummary], f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
    runs.iter().filter_map(|r| r.metrics.as_ref().and_then(&f)).reduce(f64::max)
}

fn cells(run: &RunSummary) -> [String; 9] {
    let c = &run.config;
    let m = run.metrics.as_ref();
    let metric = |f: fn(&MetricsReport) -> Option<f64>| m.and_then(f).map(percent).unwrap_or_else(|| "n/a".into());
    [
        c.category.clone(),
        c.arm.clone(),
        prompt_label(c.prompt).to_owned(),
        label_label(c.label).to_owned(),
        metric(|m| Some(m.accuracy)),
        metric(|m| Some(m.precision)),
        metric(|m| Some(m.recall)),
        metric(|m| Some(m.f1)),
        metric(|m| m.auroc),
    ]
}

/// One row per run, in the order given.
pub fn render_report(runs: &[RunSummary], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS).expect("in-memory csv");
            for run in runs {
                w.write_record(cells(run)).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
        }
        ReportFormat::Table => {
            let best_acc = max_of(runs, |m| Some(m.accuracy));
            let best_auc = max_of(runs, |m| m.auroc);
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", COLUMNS.join(" | ")));
            out.push_str(&format!("|{}\n", COLUMNS.iter().enumerate().map(|(i, _)| if i < 4 { "---|" } else { "---:|" }).collect::<String>()));
            for run in runs {
                let mut row = cells(run);
                if let Some(m) = &run.metrics {
                    if Some(m.accuracy) == best_acc {
                        row[4] = format!("**{}**", row[4]);
                    }
                    if m.auroc.is_some() && m.auroc == best_auc {
                        row[8] = format!("**{}**", row[8]);
                    }
                }
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            out
        }
    }
}

/// Highest accuracy; ties go to higher AUROC, then to the earlier run.
pub fn best_run(runs: &[RunSummary]) -> Option<&RunSummary> {
    let mut best: Option<(&RunSummary, &MetricsReport)> = None;
    for run in runs {
        let Some(m) = run.metrics.as_ref() else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                let auc = m.auroc.unwrap_or(f64::NEG_INFINITY);
                let best_auc = b.auroc.unwrap_or(f64::NEG_INFINITY);
                m.accuracy > b.accuracy || (m.accuracy == b.accuracy && auc > best_auc)
            }
        };
        if better {
            best = Some((run, m));
        }
    }
    best.map(|(r, _)| r)
}
