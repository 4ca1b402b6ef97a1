//! Cross-modal and cross-domain contrastive regularization for two-stream
//! video domain adaptation.
//!
//! The crate trains an appearance stream and a motion stream on labeled
//! source clips and unlabeled target clips. Two families of InfoNCE terms
//! regularize the four feature spaces: a cross-modal term inside each domain
//! (through a shared projection head) and a pseudo-label gated cross-domain
//! term inside each modality (on raw encoder features). Per-clip memory banks
//! with momentum updates supply positives and negatives beyond the batch.
//!
//! Everything runs on CPU at desk scale; [`datagen`] provides a synthetic
//! moving-sprite corpus with a controllable appearance shift.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evalviz;
pub mod losses;
pub mod membank;
pub mod pseudo;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Appearance,
    Motion,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Appearance, Modality::Motion];

    pub fn other(self) -> Self {
        match self {
            Modality::Appearance => Modality::Motion,
            Modality::Motion => Modality::Appearance,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Appearance => "appearance",
            Modality::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "appearance" => Some(Modality::Appearance),
            "motion" => Some(Modality::Motion),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
