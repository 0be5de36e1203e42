//! Teacher-model scale labels, the ground-truth consistency filter, and
//! export of fine-tuning corpora.
//!
//! A teacher is asked for a 0-9 hatefulness scale per labeled record. Only
//! answers whose thresholded class agrees with the binary ground truth are
//! kept, so every retained scale label is consistent with its record's label.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Client, Decoding};
use crate::dataset::{Record, Split};
use crate::par;
use crate::parsing::{binary_token, parse_binary, parse_scale, scale_to_binary};
use crate::promptkit::{prompt_with_caption, render_request, PromptLibrary};
use crate::{LabelKind, Modality, PromptKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherStatus {
    Ok,
    /// The teacher answered but no scale could be parsed.
    ParseError,
    /// The request could not be rendered or the backend gave up.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledRecord {
    pub record: Record,
    pub teacher_scale: Option<u8>,
    pub teacher_backend_id: String,
    pub retained: bool,
    pub status: TeacherStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

impl ScaledRecord {
    /// Build a record, deriving `retained` from the consistency rule.
    pub fn new(record: Record, teacher_scale: Option<u8>, teacher_backend_id: impl Into<String>, threshold: u8) -> Self {
        let retained = is_consistent(&record, teacher_scale, threshold);
        ScaledRecord {
            record,
            teacher_scale,
            teacher_backend_id: teacher_backend_id.into(),
            retained,
            status: if teacher_scale.is_some() { TeacherStatus::Ok } else { TeacherStatus::ParseError },
            raw_text: None,
            cause: None,
        }
    }
}

fn is_consistent(record: &Record, scale: Option<u8>, threshold: u8) -> bool {
    match (scale, record.label) {
        (Some(s), Some(label)) => scale_to_binary(s, threshold) == label,
        _ => false,
    }
}

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("record `{0}` has no ground-truth label")]
    Unlabeled(String),
    #[error("record `{0}` was not retained by the consistency filter")]
    NotRetained(String),
    #[error("record `{0}` has a teacher scale inconsistent with its label")]
    Inconsistent(String),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed line {line} in {path}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct DistillSettings {
    pub prompt_kind: PromptKind,
    pub modality: Modality,
    pub image_root: PathBuf,
    pub decoding: Decoding,
    pub threshold: u8,
    pub workers: usize,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            prompt_kind: PromptKind::Simple,
            modality: Modality::Multimodal,
            image_root: PathBuf::from("."),
            decoding: Decoding::default(),
            threshold: crate::parsing::DEFAULT_THRESHOLD,
            workers: par::DEFAULT_WORKERS,
        }
    }
}

/// Ask the teacher for a scale label on every record.
///
/// Records whose request fails or whose answer does not parse come back with
/// `retained = false` and a non-`Ok` status; the run carries on.
pub fn distill(
    records: &Split,
    teacher: &Client,
    prompts: &PromptLibrary,
    settings: &DistillSettings,
) -> Result<Vec<ScaledRecord>, LabelingError> {
    if let Some(r) = records.records.iter().find(|r| r.label.is_none()) {
        return Err(LabelingError::Unlabeled(r.id.clone()));
    }
    let prompt = prompts.compose(settings.prompt_kind, LabelKind::Scale);
    let teacher_id = teacher.id().to_owned();

    Ok(par::map_ordered(&records.records, settings.workers, |record| {
        let request = match render_request(
            record,
            &prompt,
            settings.modality,
            &settings.image_root,
            settings.decoding,
            &teacher_id,
        ) {
            Ok(r) => r,
            Err(e) => return failed(record, &teacher_id, e.to_string()),
        };
        match teacher.query(&request) {
            Ok((response, _)) => {
                let scale = parse_scale(&response.text).ok();
                if scale.is_none() {
                    log::warn!("teacher answer for `{}` did not parse: {:?}", record.id, response.text);
                }
                let mut out = ScaledRecord::new(record.clone(), scale, &teacher_id, settings.threshold);
                out.raw_text = Some(response.text);
                out
            }
            Err(e) => {
                log::warn!("teacher failed on `{}`: {e}", record.id);
                failed(record, &teacher_id, e.to_string())
            }
        }
    }))
}

fn failed(record: &Record, teacher_id: &str, cause: String) -> ScaledRecord {
    ScaledRecord {
        record: record.clone(),
        teacher_scale: None,
        teacher_backend_id: teacher_id.to_owned(),
        retained: false,
        status: TeacherStatus::Failed,
        raw_text: None,
        cause: Some(cause),
    }
}

/// Keep exactly the records whose thresholded teacher scale equals the ground
/// truth, in input order.
pub fn consistency_filter(scaled: &[ScaledRecord], threshold: u8) -> Vec<ScaledRecord> {
    scaled
        .iter()
        .filter(|s| is_consistent(&s.record, s.teacher_scale, threshold))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub teacher_backend_id: String,
    pub threshold: u8,
    pub prompt_kind: PromptKind,
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub failed: usize,
}

impl DistillSummary {
    pub fn from_records(scaled: &[ScaledRecord], teacher_backend_id: &str, threshold: u8, prompt_kind: PromptKind) -> Self {
        let kept = scaled.iter().filter(|s| is_consistent(&s.record, s.teacher_scale, threshold)).count();
        let failed = scaled.iter().filter(|s| s.status != TeacherStatus::Ok).count();
        DistillSummary {
            teacher_backend_id: teacher_backend_id.to_owned(),
            threshold,
            prompt_kind,
            total: scaled.len(),
            kept,
            dropped: scaled.len() - kept - failed,
            failed,
        }
    }
}

/// One line of an exported fine-tuning corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub prompt: String,
    pub image: Option<String>,
    pub target: String,
}

pub enum ExportSource<'a> {
    /// Ground-truth labeled records; only valid for Binary targets.
    Labeled(&'a [Record]),
    /// Teacher-scaled records; every one must be retained.
    Scaled(&'a [ScaledRecord]),
}

/// Write a newline-delimited corpus of [`TrainingExample`]s and return the
/// number of lines written. Nothing is written if any record is unusable.
pub fn export_training_file(
    source: ExportSource<'_>,
    prompts: &PromptLibrary,
    prompt_kind: PromptKind,
    label_kind: LabelKind,
    modality: Modality,
    threshold: u8,
    out: &Path,
) -> Result<usize, LabelingError> {
    let prompt = prompts.compose(prompt_kind, label_kind);
    let example = |record: &Record, target: String| TrainingExample {
        prompt: prompt_with_caption(&prompt, &record.text),
        image: match modality {
            Modality::Multimodal => Some(record.image_ref.clone()),
            Modality::TextOnly => None,
        },
        target,
    };

    let examples: Vec<TrainingExample> = match (source, label_kind) {
        (ExportSource::Labeled(records), LabelKind::Binary) => records
            .iter()
            .map(|r| {
                let label = r.label.ok_or_else(|| LabelingError::Unlabeled(r.id.clone()))?;
                Ok(example(r, binary_token(label).to_owned()))
            })
            .collect::<Result<_, LabelingError>>()?,
        (ExportSource::Scaled(scaled), LabelKind::Binary) => scaled
            .iter()
            .map(|s| {
                let label = s.record.label.ok_or_else(|| LabelingError::Unlabeled(s.record.id.clone()))?;
                Ok(example(&s.record, binary_token(label).to_owned()))
            })
            .collect::<Result<_, LabelingError>>()?,
        (ExportSource::Scaled(scaled), LabelKind::Scale) => scaled
            .iter()
            .map(|s| {
                if !s.retained {
                    return Err(LabelingError::NotRetained(s.record.id.clone()));
                }
                match s.teacher_scale {
                    Some(v) if is_consistent(&s.record, Some(v), threshold) => Ok(example(&s.record, v.to_string())),
                    _ => Err(LabelingError::Inconsistent(s.record.id.clone())),
                }
            })
            .collect::<Result<_, LabelingError>>()?,
        (ExportSource::Labeled(records), LabelKind::Scale) => {
            let id = records.first().map(|r| r.id.clone()).unwrap_or_default();
            return Err(LabelingError::NotRetained(id));
        }
    };

    for ex in &examples {
        let ok = match label_kind {
            LabelKind::Binary => parse_binary(&ex.target).is_ok(),
            LabelKind::Scale => parse_scale(&ex.target).is_ok(),
        };
        debug_assert!(ok, "target {:?} does not round-trip", ex.target);
    }

    write_jsonl(out, &examples)?;
    Ok(examples.len())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), LabelingError> {
    let io_err = |source| LabelingError::Io { path: path.to_owned(), source };
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| io_err(e.into()))?;
        buf.write_all(b"\n").map_err(io_err)?;
    }
    crate::util::write_atomic(path, &buf).map_err(io_err)
}

pub fn read_scaled(path: &Path) -> Result<Vec<ScaledRecord>, LabelingError> {
    let file = fs::File::open(path).map_err(|source| LabelingError::Io { path: path.to_owned(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| LabelingError::Io { path: path.to_owned(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| LabelingError::Malformed {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
