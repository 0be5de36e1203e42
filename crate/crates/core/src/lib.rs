//! Batch experiment harness for multimodal hateful-content classification.
//!
//! The pipeline is split into small, independently testable pieces:
//!
//! * [`dataset`] loads and subsamples line-delimited meme datasets,
//! * [`promptkit`] holds the four canonical prompt components and composes them,
//! * [`backends`] talks to models (remote chat-completion, child process, mock),
//! * [`parsing`] turns raw model text into classes, scales and scores,
//! * [`labeling`] distills scale labels from a teacher and filters them,
//! * [`metrics`] computes accuracy, precision, recall, F1 and AUROC,
//! * [`gridrun`] enumerates and executes the ablation grid and renders reports.
//!
//! Per-record work fans out over a rayon pool when the `parallel` feature is
//! enabled (the default); without it every stage runs sequentially.

pub mod backends;
pub mod cli;
pub mod dataset;
pub mod gridrun;
pub mod labeling;
pub mod metrics;
pub mod par;
pub mod parsing;
pub mod promptkit;
mod types;
pub mod util;

pub use types::{Class, LabelKind, Modality, PromptKind};
