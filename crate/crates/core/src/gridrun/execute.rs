use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use super::{enumerate_grid, GridError, GridSpec, RunConfig};
use crate::backends::{BackendHandle, Client, ResponseCache};
use crate::dataset::{load_split, subsample, Split};
use crate::metrics::{evaluate_run, MetricsReport, Scored};
use crate::par;
use crate::parsing::{parse_outcome, ParseStatus, ParsedOutcome};
use crate::promptkit::{render_request, PromptLibrary};
use crate::util::{unix_millis, write_atomic};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One line of a run's prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub raw_text: String,
    #[serde(flatten)]
    pub outcome: ParsedOutcome,
    /// Why no answer was obtained, when the backend failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    pub run_id: String,
}

impl Scored for Prediction {
    fn record_id(&self) -> &str {
        &self.record_id
    }

    fn outcome(&self) -> &ParsedOutcome {
        &self.outcome
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub records: usize,
    pub ok: usize,
    pub parse_error: usize,
    pub backend_error: usize,
}

/// Written last; its presence marks the run as complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub counts: RunCounts,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_error: Option<String>,
}

pub struct RunContext<'a> {
    pub client: &'a Client,
    pub prompts: &'a PromptLibrary,
    pub image_root: &'a Path,
    /// Grid output directory; runs live under `<out_dir>/runs/<run_id>/`.
    pub out_dir: &'a Path,
    pub workers: usize,
    /// Records handed to the worker pool at a time. Results are appended to
    /// the prediction file one whole chunk at a time, in split order.
    pub chunk_size: usize,
    /// Checked between chunks; when set the run stops without a manifest.
    pub cancel: Option<&'a AtomicBool>,
}

impl<'a> RunContext<'a> {
    pub fn new(client: &'a Client, prompts: &'a PromptLibrary, image_root: &'a Path, out_dir: &'a Path) -> Self {
        RunContext { client, prompts, image_root, out_dir, workers: par::DEFAULT_WORKERS, chunk_size: 64, cancel: None }
    }

    pub fn run_dir(&self, config: &RunConfig) -> PathBuf {
        self.out_dir.join("runs").join(&config.run_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub predictions_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Records already on disk when the run started.
    pub resumed: usize,
    /// Records processed by this invocation.
    pub processed: usize,
    /// Backend queries issued by this invocation (cache hits excluded).
    pub backend_calls: u64,
    pub already_complete: bool,
    pub interrupted: bool,
    pub manifest: Option<RunManifest>,
}

/// Read a prediction file. A torn final line (no trailing newline, or not
/// decodable) is cut off so that an interrupted run can be resumed; corrupt
/// lines elsewhere are an error.
pub fn load_predictions(path: &Path, run_id: Option<&str>) -> Result<Vec<Prediction>, GridError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(GridError::io(path, e)),
    };
    let mut out = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let mut lineno = 0usize;
    while offset < bytes.len() {
        lineno += 1;
        let end = bytes[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
        let (line, next) = match end {
            Some(e) => (&bytes[offset..e], e + 1),
            None => (&bytes[offset..], bytes.len()),
        };
        let is_last = next >= bytes.len();
        match serde_json::from_slice::<Prediction>(line) {
            Ok(p) if end.is_some() => {
                if let Some(expected) = run_id {
                    if p.run_id != expected {
                        return Err(GridError::Corrupt {
                            path: path.to_owned(),
                            line: lineno,
                            message: format!("belongs to run {} not {expected}", p.run_id),
                        });
                    }
                }
                out.push(p);
                good_len = next;
            }
            _ if is_last => {
                log::warn!("{}: dropping torn final line {lineno}", path.display());
                let file = OpenOptions::new().write(true).open(path).map_err(|e| GridError::io(path, e))?;
                file.set_len(good_len as u64).map_err(|e| GridError::io(path, e))?;
                break;
            }
            Ok(_) => unreachable!("only the last line can lack a newline"),
            Err(e) => {
                return Err(GridError::Corrupt { path: path.to_owned(), line: lineno, message: e.to_string() });
            }
        }
        offset = next;
    }
    Ok(out)
}

fn read_manifest(path: &Path) -> Option<RunManifest> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn predict_one(config: &RunConfig, record: &crate::dataset::Record, ctx: &RunContext<'_>) -> Prediction {
    let prompt = ctx.prompts.compose(config.prompt, config.label);
    let failed = |cause: String| Prediction {
        record_id: record.id.clone(),
        raw_text: String::new(),
        outcome: ParsedOutcome::failed(config.label),
        cause: Some(cause),
        run_id: config.run_id.clone(),
    };
    let request = match render_request(record, &prompt, config.modality, ctx.image_root, config.decoding, &config.backend) {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    match ctx.client.query(&request) {
        Ok((response, _)) => {
            let outcome = parse_outcome(&response.text, config.label, config.threshold);
            if outcome.status == ParseStatus::ParseError {
                log::warn!("run {} record {}: unparseable answer {:?}", config.run_id, record.id, response.text);
            }
            Prediction { record_id: record.id.clone(), raw_text: response.text, outcome, cause: None, run_id: config.run_id.clone() }
        }
        Err(e) => {
            log::warn!("run {} record {}: {e}", config.run_id, record.id);
            failed(format!("backend: {e}"))
        }
    }
}

fn count(predictions: &[Prediction]) -> RunCounts {
    let mut c = RunCounts { records: predictions.len(), ..RunCounts::default() };
    for p in predictions {
        match (p.outcome.status, &p.cause) {
            (ParseStatus::Ok, _) => c.ok += 1,
            (ParseStatus::ParseError, Some(_)) => c.backend_error += 1,
            (ParseStatus::ParseError, None) => c.parse_error += 1,
        }
    }
    c
}

/// Predict every record of `data` for one grid cell, appending to the run's
/// prediction file and resuming from whatever is already there.
pub fn execute_run(config: &RunConfig, data: &Split, ctx: &RunContext<'_>) -> Result<RunOutcome, GridError> {
    let run_dir = ctx.run_dir(config);
    fs::create_dir_all(&run_dir).map_err(|e| GridError::io(&run_dir, e))?;
    let predictions_path = run_dir.join(PREDICTIONS_FILE);
    let manifest_path = run_dir.join(MANIFEST_FILE);

    if let Some(manifest) = read_manifest(&manifest_path).filter(|m| m.config.run_id == config.run_id) {
        return Ok(RunOutcome {
            predictions_path,
            manifest_path,
            resumed: manifest.counts.records,
            processed: 0,
            backend_calls: 0,
            already_complete: true,
            interrupted: false,
            manifest: Some(manifest),
        });
    }

    let started = unix_millis();
    let existing = load_predictions(&predictions_path, Some(&config.run_id))?;
    let done: HashSet<&str> = existing.iter().map(|p| p.record_id.as_str()).collect();
    let pending: Vec<&crate::dataset::Record> = data.records.iter().filter(|r| !done.contains(r.id.as_str())).collect();
    let resumed = existing.len();
    drop(done);

    let calls_before = ctx.client.backend.queries();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&predictions_path)
        .map_err(|e| GridError::io(&predictions_path, e))?;

    let mut processed = 0;
    let mut interrupted = false;
    for chunk in pending.chunks(ctx.chunk_size.max(1)) {
        if ctx.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let results = par::map_ordered(chunk, ctx.workers, |record| predict_one(config, record, ctx));
        let mut buf = Vec::with_capacity(results.len() * 128);
        for p in &results {
            serde_json::to_writer(&mut buf, p).expect("prediction serializes");
            buf.push(b'\n');
        }
        file.write_all(&buf).and_then(|_| file.flush()).map_err(|e| GridError::io(&predictions_path, e))?;
        processed += results.len();
    }
    file.sync_all().map_err(|e| GridError::io(&predictions_path, e))?;
    let backend_calls = ctx.client.backend.queries() - calls_before;

    if interrupted {
        return Ok(RunOutcome {
            predictions_path,
            manifest_path,
            resumed,
            processed,
            backend_calls,
            already_complete: false,
            interrupted: true,
            manifest: None,
        });
    }

    let all = load_predictions(&predictions_path, Some(&config.run_id))?;
    let (metrics, metrics_error) = if data.is_fully_labeled() {
        let known: HashSet<&str> = data.records.iter().map(|r| r.id.as_str()).collect();
        let relevant: Vec<Prediction> = all.iter().filter(|p| known.contains(p.record_id.as_str())).cloned().collect();
        match evaluate_run(&relevant, data, config.policy, config.threshold) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, Some("evaluation split is not fully labeled".into()))
    };
    let manifest = RunManifest {
        config: config.clone(),
        counts: count(&all),
        started_unix_ms: started,
        finished_unix_ms: unix_millis(),
        metrics,
        metrics_error,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, &json).map_err(|e| GridError::io(&manifest_path, e))?;

    Ok(RunOutcome {
        predictions_path,
        manifest_path,
        resumed,
        processed,
        backend_calls,
        already_complete: false,
        interrupted: false,
        manifest: Some(manifest),
    })
}

/// Overrides applied on top of the grid file.
#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    pub workers: Option<usize>,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub prompts_dir: Option<PathBuf>,
}

/// Enumerate and execute a whole grid, one run after another.
pub fn run_grid(spec: &GridSpec, out_dir: &Path, options: &GridOptions) -> Result<Vec<(RunConfig, RunOutcome)>, GridError> {
    let configs = enumerate_grid(spec)?;
    let mut data = load_split(&spec.data.eval, spec.data.split, false)?;
    if let Some(n) = spec.data.subsample {
        data = subsample(&data, n, spec.seed);
    }
    let prompts = match &options.prompts_dir {
        Some(dir) => PromptLibrary::load(dir).map_err(|e| GridError::io(dir, e))?,
        None => PromptLibrary::default(),
    };
    let cache = if options.no_cache {
        None
    } else {
        let dir = options.cache_dir.clone().or_else(|| spec.cache_dir.clone()).unwrap_or_else(|| out_dir.join("cache"));
        Some(ResponseCache::new(&dir).map_err(|e| GridError::io(&dir, e))?)
    };
    let workers = options.workers.or(spec.workers).unwrap_or(par::DEFAULT_WORKERS);

    fs::create_dir_all(out_dir).map_err(|e| GridError::io(out_dir, e))?;
    let index = serde_json::to_vec_pretty(&configs).expect("configs serialize");
    let index_path = out_dir.join("grid.json");
    write_atomic(&index_path, &index).map_err(|e| GridError::io(&index_path, e))?;

    let mut clients: HashMap<&str, Client> = HashMap::new();
    let mut results = Vec::with_capacity(configs.len());
    for config in configs {
        if !clients.contains_key(config.backend.as_str()) {
            let backend_spec = spec.backend(&config.backend).expect("validated");
            let handle = BackendHandle::from_spec(backend_spec)?;
            clients.insert(backend_spec.id.as_str(), Client::new(handle, cache.clone()));
        }
        let client = &clients[config.backend.as_str()];
        let mut ctx = RunContext::new(client, &prompts, &spec.data.images, out_dir);
        ctx.workers = workers;
        log::info!("run {} ({} / {} / {} / {})", config.run_id, config.arm, config.prompt, config.label, config.modality);
        let outcome = execute_run(&config, &data, &ctx)?;
        results.push((config, outcome));
    }
    Ok(results)
}
