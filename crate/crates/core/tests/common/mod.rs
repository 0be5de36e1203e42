#![allow(dead_code)]

use std::path::{Path, PathBuf};

use memegrid::backends::{BackendKind, BackendSpec, RetryPolicy};
use memegrid::dataset::{write_split, Record, Split, SplitName};
use memegrid::gridrun::{DataPaths, GridSpec, ModelArm};
use memegrid::metrics::FailurePolicy;
use memegrid::{Class, LabelKind, Modality, PromptKind};

/// `n` records, alternating labels, so the split is balanced.
pub fn balanced_split(n: usize) -> Split {
    let records = (0..n)
        .map(|i| Record {
            id: format!("{:05}", i),
            image_ref: format!("img/{:05}.png", i),
            text: format!("caption number {i}"),
            label: Some(if i % 2 == 0 { Class::NotHateful } else { Class::Hateful }),
        })
        .collect();
    Split::new(SplitName::Dev, records).unwrap()
}

pub fn write_data(dir: &Path, split: &Split) -> PathBuf {
    let path = dir.join("dev.jsonl");
    let file = std::fs::File::create(&path).unwrap();
    write_split(split, std::io::BufWriter::new(file)).unwrap();
    path
}

pub fn mock_spec(id: &str, noise_rate: f64, truth: &Path) -> BackendSpec {
    BackendSpec {
        id: id.into(),
        kind: BackendKind::Mock { noise_rate, seed: 7, truth_source: truth.to_owned(), latency_ms: 0 },
        retry: RetryPolicy::default(),
    }
}

pub fn arm(name: &str, backend: &str) -> ModelArm {
    ModelArm {
        name: name.into(),
        category: None,
        size: None,
        backend: backend.into(),
        modality: Modality::TextOnly,
        finetune: false,
    }
}

/// One text-only mock arm over both prompts and both label kinds.
pub fn mock_grid(data: &Path, noise_rate: f64) -> GridSpec {
    GridSpec {
        v: 1,
        backends: vec![mock_spec("mock", noise_rate, data)],
        model_arms: vec![arm("Mock", "mock")],
        prompts: vec![PromptKind::Simple, PromptKind::Category],
        labels: vec![LabelKind::Binary, LabelKind::Scale],
        data: DataPaths { eval: data.to_owned(), images: PathBuf::from("."), split: SplitName::Dev, subsample: None },
        decoding: Default::default(),
        seed: 0,
        policy: FailurePolicy::Pessimistic,
        threshold: 5,
        workers: Some(4),
        cache_dir: None,
    }
}

pub fn stub_command(args: &[&str]) -> Vec<String> {
    std::iter::once(env!("CARGO_BIN_EXE_linestub").to_owned()).chain(args.iter().map(|s| s.to_string())).collect()
}

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use memegrid::backends::{Backend, BackendRequest, CallError};

/// Wraps a backend and raises `flag` once `limit` calls have been made.
pub struct CancelAfter<B> {
    pub inner: B,
    pub limit: u64,
    pub calls: AtomicU64,
    pub flag: Arc<AtomicBool>,
}

impl<B: Backend> Backend for CancelAfter<B> {
    fn call(&self, request: &BackendRequest) -> Result<String, CallError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 >= self.limit {
            self.flag.store(true, Ordering::SeqCst);
        }
        self.inner.call(request)
    }
}

use memegrid::gridrun::{enumerate_grid, RunSummary};
use memegrid::metrics::{Confusion, MetricsReport};

/// The 3 x 2 x 2 ablation grid: prompted and fine-tuned VLM arms plus a
/// fine-tuned text-only arm.
pub fn ablation_grid() -> GridSpec {
    serde_json::from_value(serde_json::json!({
        "v": 1,
        "backends": [
            {"id": "internvl", "kind": "remote_api", "endpoint": "http://localhost:8000/v1/chat/completions", "model": "InternVL2-8B", "token_env": "VLM_TOKEN"},
            {"id": "internvl-ft", "kind": "external_command", "command": ["adapter", "serve", "--model", "ft/internvl"]},
            {"id": "distilbert-ft", "kind": "external_command", "command": ["adapter", "serve", "--model", "ft/distilbert"]}
        ],
        "model_arms": [
            {"name": "InternVL", "size": "8B", "backend": "internvl", "modality": "multimodal"},
            {"name": "InternVL-FT", "size": "8B", "backend": "internvl-ft", "modality": "multimodal", "finetune": true},
            {"name": "Distil-Bert", "size": "66M", "backend": "distilbert-ft", "modality": "text_only", "finetune": true}
        ],
        "prompts": ["simple", "category"],
        "labels": ["binary", "scale"],
        "data": {"eval": "data/dev.jsonl", "images": "data"}
    }))
    .unwrap()
}

/// Reference results per cell (accuracy, precision, recall, F1, AUROC) in
/// percent, in grid enumeration order.
pub const REFERENCE: [[f64; 5]; 12] = [
    [61.500, 68.041, 40.408, 50.704, 61.086],
    [62.100, 60.491, 65.306, 62.807, 62.163],
    [62.500, 66.571, 47.143, 55.197, 62.199],
    [62.700, 66.387, 48.367, 55.962, 62.419],
    [68.233, 63.811, 53.468, 58.183, 66.052],
    [65.367, 59.673, 50.000, 54.410, 63.097],
    [68.933, 64.695, 54.677, 59.266, 66.827],
    [65.933, 61.498, 47.016, 53.291, 63.139],
    [61.033, 53.958, 39.032, 45.297, 57.783],
    [60.833, 58.668, 56.612, 55.657, 56.612],
    [49.300, 38.103, 36.290, 37.174, 47.378],
    [60.167, 57.818, 54.793, 36.975, 54.793],
];

pub fn reference_summaries() -> Vec<RunSummary> {
    enumerate_grid(&ablation_grid())
        .unwrap()
        .into_iter()
        .zip(REFERENCE)
        .map(|(config, [acc, prec, rec, f1, auc])| RunSummary {
            metrics: Some(MetricsReport {
                accuracy: acc / 100.0,
                precision: prec / 100.0,
                recall: rec / 100.0,
                f1: f1 / 100.0,
                auroc: Some(auc / 100.0),
                auroc_note: None,
                parse_failure_rate: 0.0,
                n: 3000,
                total: 3000,
                policy: config.policy,
                threshold_used: config.threshold,
                confusion: Confusion::default(),
            }),
            config,
        })
        .collect()
}

use std::collections::HashSet;

/// Teacher that is wrong, on purpose, exactly on the ids in `wrong`.
pub struct ScriptedTeacher {
    pub truth: std::collections::HashMap<String, Class>,
    pub wrong: HashSet<String>,
}

impl Backend for ScriptedTeacher {
    fn call(&self, request: &BackendRequest) -> Result<String, CallError> {
        let id = request.record_id.as_deref().expect("record id");
        let truth = self.truth[id];
        let said = if self.wrong.contains(id) { truth.flip() } else { truth };
        // Vary the value within the class's half of the scale.
        let offset = (id.bytes().map(u32::from).sum::<u32>() % 5) as u8;
        Ok(match said {
            Class::Hateful => 5 + offset,
            Class::NotHateful => offset,
        }
        .to_string())
    }
}
