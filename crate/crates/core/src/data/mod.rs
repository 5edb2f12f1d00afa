//! Dataset types, the RGE1 binary format, text sidecars, and the synthetic
//! confounder benchmark.

mod format;
mod sidecar;
mod synth;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset, HEADER_LEN, MAGIC};
pub use sidecar::{load_sidecar, save_sidecar, sidecar_path};
pub use synth::{gen_synthetic_confounders, gen_synthetic_splits, SynthSpec};

/// Binary meme class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Benign,
    Hateful,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Hateful),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Hateful => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }

    /// +1 for hateful, -1 for benign (the KNN vote sign).
    pub fn vote(self) -> f64 {
        match self {
            Label::Benign => -1.0,
            Label::Hateful => 1.0,
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Benign => Label::Hateful,
            Label::Hateful => Label::Benign,
        }
    }
}

/// One meme: frozen image and text features plus its label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub label: Label,
    pub f_img: Vec<f32>,
    pub f_txt: Vec<f32>,
}

/// An ordered collection of records with fixed feature dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingDataset {
    pub d_img: usize,
    pub d_txt: usize,
    pub records: Vec<EmbeddingRecord>,
    /// Optional id -> text map used by sparse retrieval.
    pub texts: Option<HashMap<u64, String>>,
}

impl EmbeddingDataset {
    /// Builds a dataset and checks the structural invariants (dimensions,
    /// finiteness, unique ids).
    pub fn new(d_img: usize, d_txt: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let ds = EmbeddingDataset { d_img, d_txt, records, texts: None };
        ds.check_invariants()?;
        Ok(ds)
    }

    pub fn with_texts(mut self, texts: HashMap<u64, String>) -> Self {
        self.texts = Some(texts);
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// (benign, hateful) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let hateful = self.records.iter().filter(|r| r.label == Label::Hateful).count();
        (self.records.len() - hateful, hateful)
    }

    /// Checks dimensions, finiteness and id uniqueness. Value errors carry
    /// the byte offset the offending entry would have in an RGE1 file.
    pub fn check_invariants(&self) -> Result<()> {
        let rec_size = format::record_size(self.d_img, self.d_txt) as u64;
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let base = HEADER_LEN as u64 + i as u64 * rec_size;
            if r.f_img.len() != self.d_img || r.f_txt.len() != self.d_txt {
                return Err(Error::InvariantViolation(format!(
                    "record {i} (id {}) has dims ({}, {}), dataset expects ({}, {})",
                    r.id,
                    r.f_img.len(),
                    r.f_txt.len(),
                    self.d_img,
                    self.d_txt
                )));
            }
            if let Some(j) = r.f_img.iter().chain(&r.f_txt).position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { offset: base + 16 + 4 * j as u64 });
            }
            if !seen.insert(r.id) {
                return Err(Error::DuplicateId { offset: base, id: r.id });
            }
        }
        Ok(())
    }

    /// Texts in record order, failing on the first record without one.
    pub fn texts_in_order(&self) -> Result<Vec<&str>> {
        let texts = self.texts.as_ref();
        self.records
            .iter()
            .map(|r| {
                texts
                    .and_then(|t| t.get(&r.id))
                    .map(String::as_str)
                    .ok_or(Error::MissingText(r.id))
            })
            .collect()
    }
}

/// Checks that a dataset can be used for training: all invariants hold and
/// each class has at least two records, so every anchor has a same-label
/// neighbour other than itself.
pub fn validate_for_training(ds: &EmbeddingDataset) -> Result<()> {
    ds.check_invariants()?;
    if ds.d_img == 0 || ds.d_txt == 0 {
        return Err(Error::InvariantViolation(format!(
            "training needs positive feature dimensions, got ({}, {})",
            ds.d_img, ds.d_txt
        )));
    }
    let (benign, hateful) = ds.class_counts();
    for (label, count) in [(Label::Benign, benign), (Label::Hateful, hateful)] {
        if count < 2 {
            return Err(Error::ClassUnderpopulated { label: label.as_u8(), count });
        }
    }
    Ok(())
}
