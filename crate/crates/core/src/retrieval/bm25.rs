//! Okapi BM25 over lowercase alphanumeric tokens.

use std::collections::HashMap;

use super::{top_k, LabelFilter, Neighbor};
use crate::data::Label;
use crate::error::{Error, Result};

pub const BM25_K1: f64 = 1.5;
pub const BM25_B: f64 = 0.75;

/// Lowercase, then split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SparseIndex {
    term_freqs: Vec<HashMap<String, u32>>,
    doc_lens: Vec<usize>,
    avg_doc_len: f64,
    idf: HashMap<String, f64>,
    labels: Vec<Label>,
    ids: Vec<u64>,
    k1: f64,
    b: f64,
}

impl SparseIndex {
    /// Builds the index over `texts`, one document per row.
    pub fn build(ids: &[u64], texts: &[&str], labels: &[Label]) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if ids.len() != texts.len() || labels.len() != texts.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids, {} texts, {} labels",
                ids.len(),
                texts.len(),
                labels.len()
            )));
        }
        let mut term_freqs = Vec::with_capacity(texts.len());
        let mut doc_lens = Vec::with_capacity(texts.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            let tokens = tokenize(text);
            doc_lens.push(tokens.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let n = texts.len() as f64;
        let avg_doc_len = doc_lens.iter().sum::<usize>() as f64 / n;
        // Non-negative idf variant: ln(1 + (N - df + 0.5) / (df + 0.5)).
        let idf = doc_freq
            .into_iter()
            .map(|(t, df)| {
                let df = df as f64;
                (t, (1.0 + (n - df + 0.5) / (df + 0.5)).ln())
            })
            .collect();
        Ok(SparseIndex {
            term_freqs,
            doc_lens,
            avg_doc_len,
            idf,
            labels: labels.to_vec(),
            ids: ids.to_vec(),
            k1: BM25_K1,
            b: BM25_B,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        self.idf.get(term).copied().unwrap_or(0.0)
    }

    /// BM25 score of `query` against every document, in row order. Repeated
    /// query tokens contribute once per occurrence.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let tokens = tokenize(query);
        self.term_freqs
            .iter()
            .zip(&self.doc_lens)
            .map(|(tf, &len)| {
                let len_norm = if self.avg_doc_len > 0.0 {
                    self.k1 * (1.0 - self.b + self.b * len as f64 / self.avg_doc_len)
                } else {
                    self.k1 * (1.0 - self.b)
                };
                tokens
                    .iter()
                    .map(|t| match tf.get(t) {
                        Some(&f) => {
                            let f = f as f64;
                            self.idf(t) * f * (self.k1 + 1.0) / (f + len_norm)
                        }
                        None => 0.0,
                    })
                    .sum()
            })
            .collect()
    }

    pub fn query_topk(
        &self,
        query: &str,
        k: usize,
        exclude: &[usize],
        filter: LabelFilter,
    ) -> Vec<Neighbor> {
        let cands = self
            .scores(query)
            .into_iter()
            .enumerate()
            .filter(|&(r, _)| filter.admits(self.labels[r]) && !exclude.contains(&r))
            .map(|(r, s)| (s, r))
            .collect();
        top_k(cands, k)
            .into_iter()
            .map(|(score, row)| Neighbor { row, id: self.ids[row], label: self.labels[row], score })
            .collect()
    }
}
