//! Logistic and KNN inference paths plus AUROC / accuracy / F1.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::config::SimMetric;
use crate::data::{EmbeddingDataset, Label};
use crate::encoder::{sigmoid, to_f64, Model};
use crate::error::{Error, Result};
use crate::retrieval::{encode_dataset_eval, DenseIndex, LabelFilter};

/// Decision threshold: a score at or above it predicts hateful.
pub const THRESHOLD: f64 = 0.5;

/// Rank-based AUROC with average ranks for ties: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l == Label::Hateful).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == Label::Hateful).count();
        pos_rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[Label], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == Label::Hateful) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.fn_;
        if total == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / total as f64
    }

    /// F1 on the hateful class, `2tp / (2tp + fp + fn)`; 0 when there are no
    /// true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

pub fn accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> f64 {
    Confusion::from_scores(scores, labels, threshold).accuracy()
}

pub fn f1(scores: &[f64], labels: &[Label], threshold: f64) -> f64 {
    Confusion::from_scores(scores, labels, threshold).f1()
}

fn round4<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e4).round() / 1e4)
}

fn round4_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => round4(v, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub id: u64,
    pub score: f64,
    pub prediction: u8,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// `None` when the evaluated set holds a single class.
    #[serde(serialize_with = "round4_opt")]
    pub auroc: Option<f64>,
    #[serde(serialize_with = "round4")]
    pub accuracy: f64,
    #[serde(serialize_with = "round4")]
    pub f1: f64,
    pub n_examples: usize,
    #[serde(skip)]
    pub per_example: Vec<ExampleScore>,
}

impl Metrics {
    pub fn from_scores(ids: &[u64], scores: Vec<f64>, labels: &[Label]) -> Result<Metrics> {
        if scores.is_empty() {
            return Err(Error::InvariantViolation("cannot score an empty dataset".into()));
        }
        let auroc = match auroc(&scores, labels) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        let conf = Confusion::from_scores(&scores, labels, THRESHOLD);
        let per_example = ids
            .iter()
            .zip(&scores)
            .zip(labels)
            .map(|((&id, &score), &l)| ExampleScore {
                id,
                score,
                prediction: (score >= THRESHOLD) as u8,
                label: l.as_u8(),
            })
            .collect();
        Ok(Metrics {
            auroc,
            accuracy: conf.accuracy(),
            f1: conf.f1(),
            n_examples: scores.len(),
            per_example,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.per_example.iter().map(|e| e.score).collect()
    }
}

/// Similarity-weighted vote: `sigmoid(sum_k vote(y_k) * s_k)` over the top-K
/// neighbours (all rows when the index holds fewer than K).
pub fn knn_predict(index: &DenseIndex, g: &[f64], k: usize, exclude: &[usize]) -> Result<f64> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let hits = index.query_topk(g, k, exclude, LabelFilter::Any)?;
    Ok(sigmoid(hits.iter().map(|n| n.label.vote() * n.score).sum()))
}

fn check_dims(ds: &EmbeddingDataset, model: &Model) -> Result<()> {
    if ds.d_img != model.encoder.d_img() || ds.d_txt != model.encoder.d_txt() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dims ({}, {}) do not match checkpoint dims ({}, {})",
            ds.d_img,
            ds.d_txt,
            model.encoder.d_img(),
            model.encoder.d_txt()
        )));
    }
    Ok(())
}

/// Eval-mode encode, then the logistic head.
pub fn evaluate_logistic(test: &EmbeddingDataset, model: &Model) -> Result<Metrics> {
    check_dims(test, model)?;
    let scores = test
        .records
        .par_iter()
        .map(|r| {
            let g = model.encoder.encode_eval(&to_f64(&r.f_img), &to_f64(&r.f_txt))?;
            Ok(model.head.predict_prob(&g))
        })
        .collect::<Result<Vec<f64>>>()?;
    Metrics::from_scores(&test.ids(), scores, &test.labels())
}

/// KNN classification of `test` against an index built over `retrieval`.
/// With `exclude_same_id`, a retrieval row sharing the query's id is never
/// its own neighbour.
pub fn evaluate_knn(
    test: &EmbeddingDataset,
    retrieval: &EmbeddingDataset,
    model: &Model,
    metric: SimMetric,
    k: usize,
    exclude_same_id: bool,
) -> Result<Metrics> {
    check_dims(test, model)?;
    if retrieval.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let index = DenseIndex::build(retrieval, &model.encoder, metric)?;
    let queries = encode_dataset_eval(test, &model.encoder)?;
    let scores = test
        .records
        .par_iter()
        .zip(&queries)
        .map(|(r, g)| {
            let exclude: Vec<usize> =
                if exclude_same_id { index.row_of_id(r.id).into_iter().collect() } else { Vec::new() };
            knn_predict(&index, g, k, &exclude)
        })
        .collect::<Result<Vec<f64>>>()?;
    Metrics::from_scores(&test.ids(), scores, &test.labels())
}
