//! Pipeline records: samples read from line-delimited JSON, scored samples and
//! evaluation reports.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gate::TokenDistribution;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Binary harm label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Benign,
    Harmful,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Harmful => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Harmful
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Harmful),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

/// One meme record.
///
/// `image_ref` is carried through untouched; nothing in this crate opens it.
/// Keys other than `id`, `text`, `image` and `label` are kept in `extra` so a
/// read-modify-write cycle does not drop them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            text: text.into(),
            image_ref: None,
            label: None,
            extra: Map::new(),
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

/// Reads samples from a line-delimited JSON stream. Blank lines are skipped;
/// line numbers in errors are 1-based physical line numbers.
pub fn ingest_samples<R: BufRead>(reader: R) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if sample.id.is_empty() {
            return Err(DataError::Malformed {
                line: line_no,
                message: "empty sample id".into(),
            });
        }
        if !seen.insert(sample.id.clone()) {
            return Err(DataError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn write_samples<W: Write>(samples: &[Sample], mut sink: W) -> Result<(), DataError> {
    for s in samples {
        serde_json::to_writer(&mut sink, s)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// A sample after the full scoring pipeline.
///
/// `aggregate` is always the digit-weighted score of `distribution`; `score`
/// is the classifier head output when a head was configured and `aggregate`
/// otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample: Sample,
    pub distribution: TokenDistribution,
    pub score: f64,
    pub aggregate: f64,
    pub head_score: Option<f64>,
    pub features: [f64; 10],
}

impl ScoredSample {
    /// The output record: the input keys plus `score`, `aggregate_score`,
    /// `head_score` (when present), `features` and `distribution`.
    pub fn to_record(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.sample) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        obj.insert("score".into(), Value::from(self.score));
        obj.insert("aggregate_score".into(), Value::from(self.aggregate));
        if let Some(h) = self.head_score {
            obj.insert("head_score".into(), Value::from(h));
        }
        obj.insert("features".into(), Value::from(self.features.to_vec()));
        obj.insert("distribution".into(), Value::from(self.distribution.probs().to_vec()));
        Value::Object(obj)
    }
}

pub fn write_scored<W: Write>(scored: &[ScoredSample], mut sink: W) -> Result<(), DataError> {
    for s in scored {
        serde_json::to_writer(&mut sink, &s.to_record())?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when either class is missing.
    pub auroc: Option<f64>,
    pub accuracy: f64,
    pub n: usize,
    pub threshold: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Writes the report as a single JSON line. Floats use the shortest
/// representation that parses back to the same `f64`.
pub fn write_report<W: Write>(report: &EvalReport, mut sink: W) -> Result<(), DataError> {
    debug_assert_eq!(report.n, report.n_positive + report.n_negative);
    serde_json::to_writer(&mut sink, report)?;
    sink.write_all(b"\n")?;
    sink.flush()?;
    Ok(())
}

pub fn read_report(s: &str) -> Result<EvalReport, DataError> {
    Ok(serde_json::from_str(s.trim())?)
}
