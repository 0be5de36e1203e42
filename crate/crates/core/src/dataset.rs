//! Loading, validation and subsampling of line-delimited meme datasets.
//!
//! Each line of a split file is one object with the keys `id`, `img`, `text`
//! and (optionally) `label`, the layout used by the public Hateful Memes
//! release:
//!
//! ```text
//! {"id":"42953","img":"img/42953.png","label":0,"text":"its their character not their color that matters"}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::util::hash_parts;
use crate::Class;

/// One dataset item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(rename = "img")]
    pub image_ref: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Class>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}` (expected train, dev or test)")),
        }
    }
}

/// An ordered list of records in source-file order, with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub name: SplitName,
    pub records: Vec<Record>,
}

impl Split {
    pub fn new(name: SplitName, records: Vec<Record>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId { id: r.id.clone(), line: None });
            }
        }
        Ok(Split { name, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.records.iter().all(|r| r.label.is_some())
    }
}

/// A problem with a single input line (1-based line number).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("read error in {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{} invalid line(s) in {path}; first: {}", issues.len(), issues[0])]
    InvalidLines { path: PathBuf, issues: Vec<LineIssue> },
    #[error("duplicate id `{id}`{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    DuplicateId { id: String, line: Option<usize> },
    #[error("image root {path} is not readable: {source}")]
    UnreadableRoot { path: PathBuf, source: io::Error },
}

/// Parse one line into a record. Ids may be given as JSON strings or integers
/// and are kept as opaque strings either way.
pub fn parse_record_line(line: &str, require_label: bool) -> Result<Record, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed object: {e}"))?;
    let obj = value.as_object().ok_or("expected a JSON object")?;

    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) if n.is_u64() || n.is_i64() => n.to_string(),
        Some(_) => return Err("field `id` must be a string or integer".into()),
        None => return Err("missing field `id`".into()),
    };
    if id.is_empty() {
        return Err("field `id` is empty".into());
    }
    let image_ref = match obj.get("img") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("field `img` must be a string".into()),
        None => return Err("missing field `img`".into()),
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("field `text` must be a string".into()),
        None => return Err("missing field `text`".into()),
    };
    if text.trim().is_empty() {
        return Err("field `text` is empty".into());
    }
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => match n.as_i64().and_then(Class::from_int) {
            Some(c) => Some(c),
            None => return Err(format!("label {n} outside {{0,1}}")),
        },
        Some(other) => return Err(format!("label {other} outside {{0,1}}")),
    };
    if require_label && label.is_none() {
        return Err("missing field `label`".into());
    }
    Ok(Record { id, image_ref, text, label })
}

/// Read a split file. Blank lines are ignored; every other line must be a
/// valid record. All line-level problems are collected before failing.
pub fn load_split(path: &Path, name: SplitName, require_labels: bool) -> Result<Split, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Open { path: path.to_owned(), source })?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DatasetError::Read { path: path.to_owned(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record_line(&line, require_labels) {
            Ok(rec) => {
                if !seen.insert(rec.id.clone()) {
                    issues.push(LineIssue { line: lineno, message: format!("duplicate id `{}`", rec.id) });
                    continue;
                }
                records.push(rec);
            }
            Err(message) => issues.push(LineIssue { line: lineno, message }),
        }
    }

    if !issues.is_empty() {
        if let [only] = issues.as_slice() {
            if let Some(id) = only.message.strip_prefix("duplicate id `").and_then(|s| s.strip_suffix('`')) {
                return Err(DatasetError::DuplicateId { id: id.to_owned(), line: Some(only.line) });
            }
        }
        return Err(DatasetError::InvalidLines { path: path.to_owned(), issues });
    }
    Ok(Split { name, records })
}

/// Serialize records one per line, in order.
pub fn write_split<W: Write>(split: &Split, mut out: W) -> io::Result<()> {
    for r in &split.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImageReport {
    pub checked: usize,
    pub missing: Vec<String>,
}

/// List ids whose image does not exist as a file under `root`.
pub fn validate_images(split: &Split, root: &Path) -> Result<ImageReport, DatasetError> {
    fs::read_dir(root).map_err(|source| DatasetError::UnreadableRoot { path: root.to_owned(), source })?;
    let missing = split
        .records
        .iter()
        .filter(|r| !root.join(&r.image_ref).is_file())
        .map(|r| r.id.clone())
        .collect();
    Ok(ImageReport { checked: split.len(), missing })
}

/// Deterministic stratified subsample of `n` records.
///
/// Records are grouped by label (unlabeled records form their own group).
/// Each group gets its proportional share of `n` by largest remainder, so
/// every group's count is within one item of its exact share. Within a group
/// the records with the smallest `hash(seed, id)` are chosen. The output keeps
/// source order.
pub fn subsample(split: &Split, n: usize, seed: u64) -> Split {
    let total = split.len();
    if n >= total {
        return split.clone();
    }

    let mut strata: BTreeMap<Option<Class>, Vec<usize>> = BTreeMap::new();
    for (i, r) in split.records.iter().enumerate() {
        strata.entry(r.label).or_default().push(i);
    }

    // Largest-remainder allocation; ties go to the earlier stratum.
    let mut quotas: Vec<(Option<Class>, usize, usize)> = strata
        .iter()
        .map(|(k, v)| {
            let exact = n * v.len();
            (*k, exact / total, exact % total)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        quotas[i].1 += 1;
    }

    let seed_bytes = seed.to_le_bytes();
    let mut chosen = Vec::with_capacity(n);
    for (key, quota, _) in quotas {
        let members = &strata[&key];
        let mut keyed: Vec<(String, usize)> = members
            .iter()
            .map(|&i| (hash_parts([&seed_bytes[..], split.records[i].id.as_bytes()]), i))
            .collect();
        keyed.sort();
        chosen.extend(keyed.into_iter().take(quota).map(|(_, i)| i));
    }
    chosen.sort_unstable();

    Split {
        name: split.name,
        records: chosen.into_iter().map(|i| split.records[i].clone()).collect(),
    }
}
