//! Ablation grid: enumeration, execution and reporting.
//!
//! A grid file names the model arms (backend + modality + fine-tuned or not),
//! the prompt kinds and the label kinds to cross. Enumeration is the
//! cartesian product with arms outermost and label kinds innermost; each cell
//! becomes a [`RunConfig`] with a stable content-derived id.

mod execute;
mod report;

use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, BackendKind, BackendSpec, Decoding};
use crate::dataset::{DatasetError, SplitName};
use crate::metrics::{FailurePolicy, MetricsError};
use crate::parsing::{DEFAULT_THRESHOLD, SCALE_MAX};
use crate::util::hash_parts;
use crate::{LabelKind, Modality, PromptKind};

pub use execute::{execute_run, load_predictions, run_grid, GridOptions, Prediction, RunContext, RunCounts, RunManifest, RunOutcome};
pub use report::{best_run, load_runs, percent, render_report, ReportFormat, RunSummary, COLUMNS};

pub const GRID_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("cannot read grid file {path}: {source}")]
    ReadSpec { path: PathBuf, source: io::Error },
    #[error("cannot parse grid file {path}: {source}")]
    ParseSpec { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

impl GridError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        GridError::Io { path: path.to_owned(), source }
    }
}

/// One model arm of the grid, e.g. "InternVL prompted" or "DistilBERT fine-tuned".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArm {
    pub name: String,
    /// Free-form row label; derived from `finetune` and `modality` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<String>,
    pub backend: String,
    pub modality: Modality,
    #[serde(default)]
    pub finetune: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub eval: PathBuf,
    #[serde(default = "default_images")]
    pub images: PathBuf,
    #[serde(default = "default_split")]
    pub split: SplitName,
    /// Evaluate on a stratified subsample of this many records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
}

fn default_images() -> PathBuf {
    PathBuf::from(".")
}

fn default_split() -> SplitName {
    SplitName::Dev
}

fn default_threshold() -> u8 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub v: u32,
    pub backends: Vec<BackendSpec>,
    pub model_arms: Vec<ModelArm>,
    pub prompts: Vec<PromptKind>,
    pub labels: Vec<LabelKind>,
    pub data: DataPaths,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: FailurePolicy,
    #[serde(default = "default_threshold")]
    pub threshold: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path).map_err(|source| GridError::ReadSpec { path: path.to_owned(), source })?;
        serde_json::from_str(&text).map_err(|source| GridError::ParseSpec { path: path.to_owned(), source })
    }

    pub fn backend(&self, id: &str) -> Option<&BackendSpec> {
        self.backends.iter().find(|b| b.id == id)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let invalid = |m: String| Err(GridError::Invalid(m));
        if self.v != GRID_SCHEMA_VERSION {
            return invalid(format!("unsupported schema version {} (expected {GRID_SCHEMA_VERSION})", self.v));
        }
        if self.model_arms.is_empty() || self.prompts.is_empty() || self.labels.is_empty() {
            return invalid("model_arms, prompts and labels must all be non-empty".into());
        }
        if self.threshold > SCALE_MAX {
            return invalid(format!("threshold {} outside 0..=9", self.threshold));
        }
        if !all_distinct(&self.prompts) || !all_distinct(&self.labels) {
            return invalid("prompts and labels must not repeat".into());
        }
        if !all_distinct(&self.backends.iter().map(|b| &b.id).collect::<Vec<_>>()) {
            return invalid("backend ids must be unique".into());
        }
        if !all_distinct(&self.model_arms.iter().map(|a| &a.name).collect::<Vec<_>>()) {
            return invalid("model arm names must be unique".into());
        }
        for b in &self.backends {
            b.validate()?;
        }
        for arm in &self.model_arms {
            let Some(backend) = self.backend(&arm.backend) else {
                return invalid(format!("arm `{}` references unknown backend `{}`", arm.name, arm.backend));
            };
            if arm.finetune && !matches!(backend.kind, BackendKind::ExternalCommand { .. }) {
                return invalid(format!(
                    "arm `{}` is fine-tuned but backend `{}` is {}, not external_command",
                    arm.name,
                    backend.id,
                    backend.kind.name()
                ));
            }
        }
        Ok(())
    }
}

fn all_distinct<T: std::hash::Hash + Eq>(items: &[T]) -> bool {
    let mut seen = HashSet::new();
    items.iter().all(|i| seen.insert(i))
}

/// One grid cell. `run_id` is a hash of every other field except `ordinal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub ordinal: usize,
    pub arm: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<String>,
    pub modality: Modality,
    pub prompt: PromptKind,
    pub label: LabelKind,
    pub finetune: bool,
    pub backend: String,
    pub eval_split: SplitName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<usize>,
    pub seed: u64,
    pub policy: FailurePolicy,
    pub threshold: u8,
    pub decoding: Decoding,
}

impl RunConfig {
    pub fn compute_id(&self) -> String {
        let mut keyed = self.clone();
        keyed.run_id = String::new();
        keyed.ordinal = 0;
        let canonical = serde_json::to_string(&keyed).expect("run config serializes");
        hash_parts([canonical])[..16].to_owned()
    }
}

pub fn default_category(finetune: bool, modality: Modality) -> String {
    let stage = if finetune { "Fine-tuning" } else { "Prompting" };
    let m = match modality {
        Modality::Multimodal => "multi-modal",
        Modality::TextOnly => "unimodal",
    };
    format!("{stage} ({m})")
}

/// Cartesian product of arms x prompts x labels, arms outermost.
pub fn enumerate_grid(spec: &GridSpec) -> Result<Vec<RunConfig>, GridError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.model_arms.len() * spec.prompts.len() * spec.labels.len());
    for arm in &spec.model_arms {
        for &prompt in &spec.prompts {
            for &label in &spec.labels {
                let mut config = RunConfig {
                    run_id: String::new(),
                    ordinal: out.len(),
                    arm: arm.name.clone(),
                    category: arm.category.clone().unwrap_or_else(|| default_category(arm.finetune, arm.modality)),
                    size: arm.size.clone(),
                    modality: arm.modality,
                    prompt,
                    label,
                    finetune: arm.finetune,
                    backend: arm.backend.clone(),
                    eval_split: spec.data.split,
                    subsample: spec.data.subsample,
                    seed: spec.seed,
                    policy: spec.policy,
                    threshold: spec.threshold,
                    decoding: spec.decoding,
                };
                config.run_id = config.compute_id();
                out.push(config);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ablation_grid() -> GridSpec {
        serde_json::from_value(serde_json::json!({
            "v": 1,
            "backends": [
                {"id": "internvl", "kind": "remote_api", "endpoint": "http://localhost:8000/v1/chat/completions", "model": "InternVL2-8B", "token_env": "VLM_TOKEN"},
                {"id": "internvl-ft", "kind": "external_command", "command": ["adapter", "serve", "--model", "ft/internvl"]},
                {"id": "distilbert-ft", "kind": "external_command", "command": ["adapter", "serve", "--model", "ft/distilbert"]}
            ],
            "model_arms": [
                {"name": "InternVL", "size": "8B", "backend": "internvl", "modality": "multimodal"},
                {"name": "InternVL", "size": "8B", "backend": "internvl-ft", "modality": "multimodal", "finetune": true},
                {"name": "Distil-Bert", "size": "66M", "backend": "distilbert-ft", "modality": "text_only", "finetune": true}
            ],
            "prompts": ["simple", "category"],
            "labels": ["binary", "scale"],
            "data": {"eval": "data/dev.jsonl", "images": "data"}
        }))
        .unwrap()
    }

    #[test]
    fn arm_names_must_be_unique() {
        // The fixture above reuses "InternVL", which the validator rejects.
        assert!(matches!(enumerate_grid(&ablation_grid()), Err(GridError::Invalid(_))));
    }

    fn unique_ablation_grid() -> GridSpec {
        let mut spec = ablation_grid();
        spec.model_arms[0].name = "InternVL (prompted)".into();
        spec.model_arms[1].name = "InternVL (fine-tuned)".into();
        spec
    }

    #[test]
    fn ablation_grid_has_twelve_cells_in_order() {
        let runs = enumerate_grid(&unique_ablation_grid()).unwrap();
        assert_eq!(runs.len(), 12);
        let again = enumerate_grid(&unique_ablation_grid()).unwrap();
        assert_eq!(runs, again);
        assert_eq!(runs[0].prompt, PromptKind::Simple);
        assert_eq!(runs[0].label, LabelKind::Binary);
        assert_eq!(runs[1].label, LabelKind::Scale);
        assert_eq!(runs[2].prompt, PromptKind::Category);
        assert_eq!(runs[4].arm, "InternVL (fine-tuned)");
        assert_eq!(runs[8].category, "Fine-tuning (unimodal)");
        let ids: HashSet<_> = runs.iter().map(|r| r.run_id.clone()).collect();
        assert_eq!(ids.len(), 12);
        assert!(runs.iter().enumerate().all(|(i, r)| r.ordinal == i));
    }

    #[test]
    fn single_cell_grid() {
        let mut spec = unique_ablation_grid();
        spec.model_arms.truncate(1);
        spec.prompts.truncate(1);
        spec.labels.truncate(1);
        assert_eq!(enumerate_grid(&spec).unwrap().len(), 1);
    }

    #[test]
    fn run_id_tracks_fields() {
        let runs = enumerate_grid(&unique_ablation_grid()).unwrap();
        let mut changed = runs[0].clone();
        changed.threshold = 6;
        assert_ne!(changed.compute_id(), runs[0].run_id);
        let mut moved = runs[0].clone();
        moved.ordinal = 7;
        assert_eq!(moved.compute_id(), runs[0].run_id);
    }

    #[test]
    fn finetune_requires_external_backend() {
        let mut spec = unique_ablation_grid();
        spec.model_arms[1].backend = "internvl".into();
        let err = enumerate_grid(&spec).unwrap_err().to_string();
        assert!(err.contains("external_command"), "{err}");
    }

    #[test]
    fn invalid_specs() {
        let mut spec = unique_ablation_grid();
        spec.labels.clear();
        assert!(enumerate_grid(&spec).is_err());

        let mut spec = unique_ablation_grid();
        spec.v = 2;
        assert!(enumerate_grid(&spec).is_err());

        let mut spec = unique_ablation_grid();
        spec.model_arms[0].backend = "nope".into();
        assert!(enumerate_grid(&spec).is_err());

        let mut spec = unique_ablation_grid();
        spec.prompts.push(PromptKind::Simple);
        assert!(enumerate_grid(&spec).is_err());
    }
}
