use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendRequest, CallError};
use crate::dataset::{load_split, SplitName};
use crate::parsing::binary_token;
use crate::{Class, LabelKind};

/// Deterministic pseudo-model answer for one record.
///
/// A uniform draw `u` in [0, 1) is derived from `sha256(seed, record_id)`. The
/// answer agrees with `truth` when `u >= noise_rate` and disagrees otherwise,
/// so `noise_rate = 0` is always right and `noise_rate = 1` always wrong.
/// Scale answers are drawn uniformly from 5..=9 for a hateful answer and
/// 0..=4 otherwise.
pub fn mock_oracle(record_id: &str, truth: Class, noise_rate: f64, seed: u64, label_kind: LabelKind) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(record_id.as_bytes());
    let digest = hasher.finalize();
    let first = u64::from_le_bytes(digest[0..8].try_into().unwrap());
    let second = u64::from_le_bytes(digest[8..16].try_into().unwrap());

    let u = (first >> 11) as f64 / (1u64 << 53) as f64;
    let answer = if u >= noise_rate { truth } else { truth.flip() };
    match label_kind {
        LabelKind::Binary => binary_token(answer).to_owned(),
        LabelKind::Scale => {
            let offset = (second % 5) as u8;
            let s = if answer.is_hateful() { 5 + offset } else { offset };
            s.to_string()
        }
    }
}

/// Mock backend answering from a ground-truth table through [`mock_oracle`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    truth: HashMap<String, Class>,
    noise_rate: f64,
    seed: u64,
    latency: Duration,
}

impl MockBackend {
    pub fn new(truth: HashMap<String, Class>, noise_rate: f64, seed: u64) -> Self {
        MockBackend { truth, noise_rate, seed, latency: Duration::ZERO }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn from_truth_file(path: &Path, noise_rate: f64, seed: u64, latency_ms: u64) -> Result<Self, BackendError> {
        let split = load_split(path, SplitName::Dev, true)
            .map_err(|e| BackendError::Config(format!("mock truth source: {e}")))?;
        let truth = split.records.into_iter().filter_map(|r| r.label.map(|l| (r.id, l))).collect();
        Ok(MockBackend::new(truth, noise_rate, seed).with_latency(Duration::from_millis(latency_ms)))
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &BackendRequest) -> Result<String, CallError> {
        let id = request
            .record_id
            .as_deref()
            .ok_or_else(|| CallError::Fatal(BackendError::Protocol("mock request without record id".into())))?;
        let kind = request
            .label_kind
            .ok_or_else(|| CallError::Fatal(BackendError::Protocol("mock request without label kind".into())))?;
        let truth = *self
            .truth
            .get(id)
            .ok_or_else(|| CallError::Fatal(BackendError::Protocol(format!("mock has no truth for record `{id}`"))))?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        Ok(mock_oracle(id, truth, self.noise_rate, self.seed, kind))
    }
}
