//! Turning raw model text into classes, 0-9 scales and scores.
//!
//! Binary answers map to scores {0, 1}; scale answers map to `s / 9`. Both end
//! up in the same score space so AUROC can be computed uniformly.

use serde::{Deserialize, Serialize};

use crate::{Class, LabelKind};

/// Default cut point: a scale value at or above this is hateful.
pub const DEFAULT_THRESHOLD: u8 = 5;

pub const SCALE_MAX: u8 = 9;

/// Score assigned to an unparseable answer; carries no ranking information.
pub const UNINFORMATIVE_SCORE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    ParseError,
}

/// A parsed model answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutcome {
    pub kind: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<Class>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u8>,
    pub score: f64,
    pub status: ParseStatus,
}

impl ParsedOutcome {
    pub fn from_binary(class: Class) -> Self {
        ParsedOutcome {
            kind: LabelKind::Binary,
            binary: Some(class),
            scale: None,
            score: binary_to_score(class),
            status: ParseStatus::Ok,
        }
    }

    pub fn from_scale(s: u8, threshold: u8) -> Self {
        ParsedOutcome {
            kind: LabelKind::Scale,
            binary: Some(scale_to_binary(s, threshold)),
            scale: Some(s),
            score: scale_to_score(s),
            status: ParseStatus::Ok,
        }
    }

    pub fn failed(kind: LabelKind) -> Self {
        ParsedOutcome { kind, binary: None, scale: None, score: UNINFORMATIVE_SCORE, status: ParseStatus::ParseError }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ParseStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("could not parse {kind} answer from {text:?}")]
pub struct ParseError {
    pub kind: LabelKind,
    pub text: String,
}

/// Find `TRUE` / `FALSE` as standalone words, ignoring case. Exactly one of the
/// two must appear (repeats are fine).
pub fn parse_binary(text: &str) -> Result<Class, ParseError> {
    let mut saw_true = false;
    let mut saw_false = false;
    for word in text.split(|c: char| !c.is_alphabetic()) {
        if word.eq_ignore_ascii_case("true") {
            saw_true = true;
        } else if word.eq_ignore_ascii_case("false") {
            saw_false = true;
        }
    }
    match (saw_true, saw_false) {
        (true, false) => Ok(Class::Hateful),
        (false, true) => Ok(Class::NotHateful),
        _ => Err(ParseError { kind: LabelKind::Binary, text: text.to_owned() }),
    }
}

/// First standalone integer token in `0..=9`.
///
/// A token is a maximal run of ASCII digits not glued to a letter, `_`, or
/// another number through a decimal point or sign (`3.5`, `-2` and `x7` are not
/// integers in range). Out-of-range tokens such as `10` are skipped.
pub fn parse_scale(text: &str) -> Result<u8, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let end = i;
        let before = start.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(end).copied();
        let glued = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
        let decimal_before = before == Some('.') && start >= 2 && chars[start - 2].is_ascii_digit();
        let decimal_after = matches!(after, Some('.') | Some(',')) && chars.get(end + 1).is_some_and(|c| c.is_ascii_digit());
        let negative = before == Some('-');
        if glued(before) || glued(after) || decimal_before || decimal_after || negative {
            continue;
        }
        let digits: String = chars[start..end].iter().collect();
        if let Ok(v) = digits.parse::<u64>() {
            if v <= SCALE_MAX as u64 {
                return Ok(v as u8);
            }
        }
    }
    Err(ParseError { kind: LabelKind::Scale, text: text.to_owned() })
}

/// `s / 9`. Panics if `s > 9`.
pub fn scale_to_score(s: u8) -> f64 {
    assert!(s <= SCALE_MAX, "scale value {s} out of range");
    s as f64 / SCALE_MAX as f64
}

pub fn scale_to_binary(s: u8, threshold: u8) -> Class {
    assert!(s <= SCALE_MAX, "scale value {s} out of range");
    if s >= threshold {
        Class::Hateful
    } else {
        Class::NotHateful
    }
}

pub fn binary_to_score(c: Class) -> f64 {
    match c {
        Class::Hateful => 1.0,
        Class::NotHateful => 0.0,
    }
}

/// Canonical answer text for a class, as a well-behaved model would emit it.
pub fn binary_token(c: Class) -> &'static str {
    match c {
        Class::Hateful => "TRUE",
        Class::NotHateful => "FALSE",
    }
}

/// Parse `text` according to `kind`; failures become a `ParseError` outcome.
pub fn parse_outcome(text: &str, kind: LabelKind, threshold: u8) -> ParsedOutcome {
    match kind {
        LabelKind::Binary => parse_binary(text).map(ParsedOutcome::from_binary),
        LabelKind::Scale => parse_scale(text).map(|s| ParsedOutcome::from_scale(s, threshold)),
    }
    .unwrap_or_else(|e| {
        log::debug!("{e}");
        ParsedOutcome::failed(kind)
    })
}
