//! Accuracy, precision, recall, F1 and tie-aware AUROC.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Split;
use crate::parsing::{binary_to_score, scale_to_binary, scale_to_score, ParseStatus, ParsedOutcome, UNINFORMATIVE_SCORE};
use crate::Class;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("AUROC undefined: all truths belong to one class")]
    DegenerateLabels,
    #[error("no prediction for record `{0}`")]
    MissingPrediction(String),
    #[error("prediction for unknown record `{0}`")]
    UnknownRecord(String),
    #[error("duplicate prediction for record `{0}`")]
    DuplicatePrediction(String),
    #[error("record `{0}` has no ground-truth label")]
    Unlabeled(String),
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.n())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// `num / den`, or 0 when `den` is 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(preds: &[Class], truths: &[Class]) -> Result<Confusion, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = Confusion::default();
    for (p, t) in preds.iter().zip(truths) {
        match (p, t) {
            (Class::Hateful, Class::Hateful) => c.tp += 1,
            (Class::Hateful, Class::NotHateful) => c.fp += 1,
            (Class::NotHateful, Class::NotHateful) => c.tn += 1,
            (Class::NotHateful, Class::Hateful) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney U) statistic.
///
/// Tied scores receive the average of the ranks they span, which counts each
/// tied positive/negative pair as one half. Runs in O(n log n).
pub fn auroc(scores: &[f64], truths: &[Class]) -> Result<f64, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truths.len()));
    }
    let n_pos = truths.iter().filter(|t| t.is_hateful()).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so
    // that every quantity stays an exact integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 averaged: (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| truths[k].is_hateful()).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let p = n_pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Unparseable answers count as not hateful with score 0.5.
    #[default]
    Pessimistic,
    /// Unparseable answers are dropped from every metric.
    Exclude,
}

impl fmt::Display for FailurePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailurePolicy::Pessimistic => "pessimistic",
            FailurePolicy::Exclude => "exclude",
        })
    }
}

impl FromStr for FailurePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pessimistic" => Ok(FailurePolicy::Pessimistic),
            "exclude" => Ok(FailurePolicy::Exclude),
            other => Err(format!("unknown policy `{other}` (expected pessimistic or exclude)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the evaluated truths are all one class.
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_note: Option<String>,
    pub parse_failure_rate: f64,
    pub n: u64,
    pub total: u64,
    pub policy: FailurePolicy,
    pub threshold_used: u8,
    pub confusion: Confusion,
}

/// The minimal view of a prediction that evaluation needs.
pub trait Scored {
    fn record_id(&self) -> &str;
    fn outcome(&self) -> &ParsedOutcome;
}

/// Evaluate predictions against the labeled split.
///
/// Scale outcomes are re-thresholded with `threshold`, so the same prediction
/// file can be scored under different cut points. Evaluation walks the split
/// in its own order, which makes the result independent of prediction order.
pub fn evaluate_run<P: Scored>(
    predictions: &[P],
    truths: &Split,
    policy: FailurePolicy,
    threshold: u8,
) -> Result<MetricsReport, MetricsError> {
    let mut by_id: HashMap<&str, &ParsedOutcome> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.record_id(), p.outcome()).is_some() {
            return Err(MetricsError::DuplicatePrediction(p.record_id().to_owned()));
        }
    }
    let known: std::collections::HashSet<&str> = truths.records.iter().map(|r| r.id.as_str()).collect();
    if let Some(unknown) = predictions.iter().find(|p| !known.contains(p.record_id())) {
        return Err(MetricsError::UnknownRecord(unknown.record_id().to_owned()));
    }

    let mut preds = Vec::with_capacity(truths.len());
    let mut scores = Vec::with_capacity(truths.len());
    let mut labels = Vec::with_capacity(truths.len());
    let mut failures = 0u64;
    for record in &truths.records {
        let outcome = by_id.get(record.id.as_str()).ok_or_else(|| MetricsError::MissingPrediction(record.id.clone()))?;
        let truth = record.label.ok_or_else(|| MetricsError::Unlabeled(record.id.clone()))?;
        let (class, score) = match (outcome.status, outcome.scale, outcome.binary) {
            (ParseStatus::Ok, Some(s), _) => (scale_to_binary(s, threshold), scale_to_score(s)),
            (ParseStatus::Ok, None, Some(b)) => (b, binary_to_score(b)),
            _ => {
                failures += 1;
                match policy {
                    FailurePolicy::Pessimistic => (Class::NotHateful, UNINFORMATIVE_SCORE),
                    FailurePolicy::Exclude => continue,
                }
            }
        };
        preds.push(class);
        scores.push(score);
        labels.push(truth);
    }

    let total = truths.len() as u64;
    let c = confusion(&preds, &labels)?;
    let (auroc, auroc_note) = match auroc(&scores, &labels) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(MetricsReport {
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        auroc,
        auroc_note,
        parse_failure_rate: ratio(failures, total),
        n: c.n(),
        total,
        policy,
        threshold_used: threshold,
        confusion: c,
    })
}
