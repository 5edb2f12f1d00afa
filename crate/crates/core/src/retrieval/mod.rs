//! Exact similarity search over encoded training embeddings, pseudo-gold and
//! hard-negative selection, and BM25 sparse retrieval.
//!
//! Every search is a brute-force scan. Results are ordered by descending
//! score with ties broken by the lowest row index.

mod bm25;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimMetric;
use crate::data::{save_dataset, EmbeddingDataset, EmbeddingRecord, Label};
use crate::encoder::{to_f64, VlEncoderParams};
use crate::error::{Error, Result};
use crate::neural::dot;

pub use bm25::{tokenize, SparseIndex, BM25_B, BM25_K1};

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn neg_sq_l2(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Similarity of two equal-length vectors under `metric`.
pub fn similarity(a: &[f64], b: &[f64], metric: SimMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("similarity of lengths {} and {}", a.len(), b.len())));
    }
    Ok(match metric {
        SimMetric::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNormVector);
            }
            cosine_from_parts(dot(a, b), na, nb)
        }
        SimMetric::InnerProduct => dot(a, b),
        SimMetric::NegL2 => neg_sq_l2(a, b),
    })
}

/// Restricts which rows a query may return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelFilter {
    Any,
    Only(Label),
}

impl LabelFilter {
    pub fn same(label: Label) -> Self {
        LabelFilter::Only(label)
    }

    pub fn opposite(label: Label) -> Self {
        LabelFilter::Only(label.opposite())
    }

    fn admits(self, label: Label) -> bool {
        match self {
            LabelFilter::Any => true,
            LabelFilter::Only(l) => l == label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub id: u64,
    pub label: Label,
    pub score: f64,
}

/// Descending score, then ascending row. Scores are always finite, and
/// `-0.0 == 0.0` counts as a tie.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact top-k of `(score, row)` candidates.
pub(crate) fn top_k(mut cands: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, rank_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank_order);
    cands
}

/// Immutable snapshot of encoded embeddings with labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    rows: Vec<f64>,
    norms: Vec<f64>,
    labels: Vec<Label>,
    ids: Vec<u64>,
    metric: SimMetric,
    row_of_id: HashMap<u64, usize>,
}

impl DenseIndex {
    pub fn from_embeddings(
        embeddings: Vec<Vec<f64>>,
        labels: Vec<Label>,
        ids: Vec<u64>,
        dim: usize,
        metric: SimMetric,
    ) -> Result<Self> {
        if embeddings.len() != labels.len() || labels.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings, {} labels, {} ids",
                embeddings.len(),
                labels.len(),
                ids.len()
            )));
        }
        let mut rows = Vec::with_capacity(embeddings.len() * dim);
        let mut norms = Vec::with_capacity(embeddings.len());
        for e in &embeddings {
            if e.len() != dim {
                return Err(Error::ShapeMismatch(format!("row of length {}, index dim {dim}", e.len())));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvariantViolation("non-finite embedding".into()));
            }
            let n = l2_norm(e);
            if metric == SimMetric::Cosine && n == 0.0 {
                return Err(Error::ZeroNormVector);
            }
            norms.push(n);
            rows.extend_from_slice(e);
        }
        let row_of_id = ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Ok(DenseIndex { dim, rows, norms, labels, ids, metric, row_of_id })
    }

    /// Encodes every record in eval mode; row `i` is record `i`.
    pub fn build(ds: &EmbeddingDataset, params: &VlEncoderParams, metric: SimMetric) -> Result<Self> {
        let embeddings = encode_dataset_eval(ds, params)?;
        DenseIndex::from_embeddings(embeddings, ds.labels(), ds.ids(), params.embed_dim(), metric)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> SimMetric {
        self.metric
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of_id(&self, id: u64) -> Option<usize> {
        self.row_of_id.get(&id).copied()
    }

    fn neighbor(&self, row: usize, score: f64) -> Neighbor {
        Neighbor { row, id: self.ids[row], label: self.labels[row], score }
    }

    /// Scores of `q` against every row, in row order.
    pub fn scores(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("query of length {}, index dim {}", q.len(), self.dim)));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite query".into()));
        }
        if self.dim == 0 {
            return Ok(vec![0.0; self.len()]);
        }
        let rows = self.rows.chunks_exact(self.dim);
        Ok(match self.metric {
            SimMetric::Cosine => {
                let nq = l2_norm(q);
                if nq == 0.0 {
                    return Err(Error::ZeroNormVector);
                }
                rows.zip(&self.norms).map(|(r, &nr)| cosine_from_parts(dot(q, r), nq, nr)).collect()
            }
            SimMetric::InnerProduct => rows.map(|r| dot(q, r)).collect(),
            SimMetric::NegL2 => rows.map(|r| neg_sq_l2(q, r)).collect(),
        })
    }

    /// Exact top-k among rows that pass `filter` and are not in `exclude`.
    /// Returns fewer than `k` only when candidates run out.
    pub fn query_topk(
        &self,
        q: &[f64],
        k: usize,
        exclude: &[usize],
        filter: LabelFilter,
    ) -> Result<Vec<Neighbor>> {
        let scores = self.scores(q)?;
        Ok(self.topk_from_scores(&scores, k, exclude, filter))
    }

    /// Top-k selection over scores already computed by [`DenseIndex::scores`],
    /// so one scan can serve several filtered queries.
    pub fn topk_from_scores(
        &self,
        scores: &[f64],
        k: usize,
        exclude: &[usize],
        filter: LabelFilter,
    ) -> Vec<Neighbor> {
        let cands = scores
            .iter()
            .enumerate()
            .filter(|&(r, _)| filter.admits(self.labels[r]) && !exclude.contains(&r))
            .map(|(r, &s)| (s, r))
            .collect();
        top_k(cands, k).into_iter().map(|(s, r)| self.neighbor(r, s)).collect()
    }

    /// The `k` most similar same-label rows, excluding the anchor's own row.
    pub fn pseudo_golds(&self, anchor_row: usize, g_anchor: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let label = *self.labels.get(anchor_row).ok_or(Error::NoCandidate)?;
        self.query_topk(g_anchor, k, &[anchor_row], LabelFilter::same(label))
    }

    pub fn pseudo_gold(&self, anchor_row: usize, g_anchor: &[f64]) -> Result<Neighbor> {
        self.pseudo_golds(anchor_row, g_anchor, 1)?.into_iter().next().ok_or(Error::NoCandidate)
    }

    /// The `k` most similar opposite-label rows.
    pub fn hard_negatives(&self, g_anchor: &[f64], anchor_label: Label, k: usize) -> Result<Vec<Neighbor>> {
        self.query_topk(g_anchor, k, &[], LabelFilter::opposite(anchor_label))
    }

    pub fn hard_negative(&self, g_anchor: &[f64], anchor_label: Label) -> Result<Neighbor> {
        self.hard_negatives(g_anchor, anchor_label, 1)?.into_iter().next().ok_or(Error::NoCandidate)
    }

    /// The index as an RGE1 dataset: embeddings in `f_img`, empty `f_txt`.
    pub fn to_dataset(&self) -> EmbeddingDataset {
        let records = (0..self.len())
            .map(|r| EmbeddingRecord {
                id: self.ids[r],
                label: self.labels[r],
                f_img: self.row(r).iter().map(|&v| v as f32).collect(),
                f_txt: Vec::new(),
            })
            .collect();
        EmbeddingDataset { d_img: self.dim, d_txt: 0, records, texts: None }
    }
}

/// Eval-mode embeddings for every record, in dataset order.
pub fn encode_dataset_eval(ds: &EmbeddingDataset, params: &VlEncoderParams) -> Result<Vec<Vec<f64>>> {
    if ds.d_img != params.d_img() || ds.d_txt != params.d_txt() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dims ({}, {}) do not match encoder dims ({}, {})",
            ds.d_img,
            ds.d_txt,
            params.d_img(),
            params.d_txt()
        )));
    }
    ds.records
        .par_iter()
        .map(|r| params.encode_eval(&to_f64(&r.f_img), &to_f64(&r.f_txt)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub metric: SimMetric,
    #[serde(rename = "N")]
    pub n_rows: usize,
    pub n: usize,
}

/// `out/index.rge1` -> `out/index.manifest.json`.
pub fn manifest_path(index_path: impl AsRef<Path>) -> PathBuf {
    index_path.as_ref().with_extension("manifest.json")
}

/// Writes the index as RGE1 plus its JSON manifest; returns the manifest path.
pub fn export_index(index: &DenseIndex, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    save_dataset(&index.to_dataset(), path)?;
    let manifest = IndexManifest { metric: index.metric, n_rows: index.len(), n: index.dim };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const METRICS: [SimMetric; 3] = [SimMetric::Cosine, SimMetric::InnerProduct, SimMetric::NegL2];

    fn basis(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    fn index(rows: Vec<Vec<f64>>, labels: Vec<Label>, metric: SimMetric) -> DenseIndex {
        let dim = rows[0].len();
        let ids = (0..rows.len() as u64).map(|i| 100 + i).collect();
        DenseIndex::from_embeddings(rows, labels, ids, dim, metric).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], SimMetric::Cosine).unwrap(), 0.0);
        assert_eq!(similarity(&[1.5, -2.0, 7.0], &[1.5, -2.0, 7.0], SimMetric::NegL2).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0], SimMetric::InnerProduct).unwrap(), 11.0);
        assert!(matches!(similarity(&[0.0, 0.0], &[1.0, 0.0], SimMetric::Cosine), Err(Error::ZeroNormVector)));
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0], SimMetric::InnerProduct).unwrap(), 0.0);
    }

    #[test]
    fn basis_query() {
        let idx = index(basis(4), vec![Label::Benign; 4], SimMetric::Cosine);
        let hit = idx.query_topk(&[0.0, 1.0, 0.0, 0.0], 1, &[], LabelFilter::Any).unwrap();
        assert_eq!(hit.len(), 1);
        assert_eq!((hit[0].row, hit[0].id, hit[0].score), (1, 101, 1.0));
    }

    #[test]
    fn ties_break_by_row() {
        let idx = index(vec![vec![1.0, 2.0]; 5], vec![Label::Hateful; 5], SimMetric::Cosine);
        let rows: Vec<usize> =
            idx.query_topk(&[0.3, 0.1], 3, &[], LabelFilter::Any).unwrap().iter().map(|n| n.row).collect();
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn fewer_than_k_when_filtered() {
        let labels = vec![Label::Hateful, Label::Benign, Label::Benign];
        let idx = index(basis(3), labels, SimMetric::InnerProduct);
        let got = idx.query_topk(&[1.0, 1.0, 1.0], 10, &[1], LabelFilter::same(Label::Benign)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].row, 2);
        let empty = idx.query_topk(&[1.0, 1.0, 1.0], 10, &[1, 2], LabelFilter::same(Label::Benign)).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn pseudo_gold_cases() {
        let labels = vec![Label::Hateful, Label::Benign, Label::Hateful, Label::Benign];
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.1], vec![-1.0, 0.5], vec![0.0, 1.0]];
        let idx = index(rows.clone(), labels.clone(), SimMetric::Cosine);
        // only two hateful rows: the other one is forced
        assert_eq!(idx.pseudo_gold(0, &rows[0]).unwrap().row, 2);
        assert_eq!(idx.pseudo_gold(2, &rows[2]).unwrap().row, 0);

        // duplicate of the anchor stays eligible
        let mut dup_rows = rows.clone();
        dup_rows.push(rows[0].clone());
        let mut dup_labels = labels.clone();
        dup_labels.push(Label::Hateful);
        let idx = index(dup_rows, dup_labels, SimMetric::Cosine);
        let n = idx.pseudo_gold(0, &rows[0]).unwrap();
        assert_eq!((n.row, n.score), (4, 1.0));
    }

    #[test]
    fn hard_negative_cases() {
        let labels = vec![Label::Hateful, Label::Hateful, Label::Benign];
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.2, 0.9]];
        let idx = index(rows.clone(), labels, SimMetric::Cosine);
        assert_eq!(idx.hard_negative(&rows[0], Label::Hateful).unwrap().row, 2);
        // confounder: anchor embedding equals an opposite-label row
        let n = idx.hard_negative(&rows[2], Label::Hateful).unwrap();
        assert_eq!((n.row, n.score), (2, 1.0));
        assert!(matches!(idx.hard_negative(&rows[0], Label::Benign).map(|n| n.label), Ok(Label::Hateful)));
        let all_benign = index(rows, vec![Label::Benign; 3], SimMetric::Cosine);
        assert!(matches!(all_benign.hard_negative(&[1.0, 0.0], Label::Benign), Err(Error::NoCandidate)));
    }

    #[test]
    fn empty_index_and_zero_rows() {
        let idx = DenseIndex::from_embeddings(vec![], vec![], vec![], 3, SimMetric::Cosine).unwrap();
        assert!(idx.query_topk(&[1.0, 0.0, 0.0], 3, &[], LabelFilter::Any).unwrap().is_empty());
        assert!(matches!(
            DenseIndex::from_embeddings(vec![vec![0.0; 2]], vec![Label::Benign], vec![0], 2, SimMetric::Cosine),
            Err(Error::ZeroNormVector)
        ));
    }

    fn full_sort_oracle(
        rows: &[Vec<f64>],
        labels: &[Label],
        q: &[f64],
        k: usize,
        exclude: &[usize],
        filter: LabelFilter,
        metric: SimMetric,
    ) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = rows
            .iter()
            .enumerate()
            .filter(|(r, _)| !exclude.contains(r))
            .filter(|(r, _)| match filter {
                LabelFilter::Any => true,
                LabelFilter::Only(l) => labels[*r] == l,
            })
            .map(|(r, row)| (r, similarity(q, row, metric).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..30 {
            let metric = METRICS[case % 3];
            let n_rows = 200;
            let dim = 16;
            // coarse grid values so exact ties happen
            let rows: Vec<Vec<f64>> = (0..n_rows)
                .map(|_| (0..dim).map(|_| rng.random_range(-2i32..=2) as f64 + 0.5).collect())
                .collect();
            let labels: Vec<Label> =
                (0..n_rows).map(|_| if rng.random::<bool>() { Label::Hateful } else { Label::Benign }).collect();
            let idx = index(rows.clone(), labels.clone(), metric);
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64 + 0.5).collect();
            let k = rng.random_range(1..40);
            let exclude: Vec<usize> = (0..3).map(|_| rng.random_range(0..n_rows)).collect();
            for filter in [LabelFilter::Any, LabelFilter::Only(Label::Hateful), LabelFilter::Only(Label::Benign)] {
                let got: Vec<(usize, f64)> = idx
                    .query_topk(&q, k, &exclude, filter)
                    .unwrap()
                    .iter()
                    .map(|n| (n.row, n.score))
                    .collect();
                assert_eq!(got, full_sort_oracle(&rows, &labels, &q, k, &exclude, filter, metric));
                assert!(got.windows(2).all(|w| w[0].1 >= w[1].1));
            }
        }
    }

    #[test]
    fn cosine_rankings_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = vec![Label::Benign; 50];
        let base = index(rows.clone(), labels.clone(), SimMetric::Cosine);
        let c = 3.0;
        let scaled = index(
            rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect(),
            labels,
            SimMetric::Cosine,
        );
        let qs: Vec<f64> = q.iter().map(|v| v * c).collect();
        let a: Vec<usize> = base.query_topk(&q, 50, &[], LabelFilter::Any).unwrap().iter().map(|n| n.row).collect();
        let b: Vec<usize> = scaled.query_topk(&qs, 50, &[], LabelFilter::Any).unwrap().iter().map(|n| n.row).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn export_writes_rge1_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let idx = index(basis(3), vec![Label::Benign, Label::Hateful, Label::Benign], SimMetric::NegL2);
        let p = dir.path().join("idx.rge1");
        let m = export_index(&idx, &p).unwrap();
        let back = crate::data::load_dataset(&p).unwrap();
        assert_eq!((back.len(), back.d_img, back.d_txt), (3, 3, 0));
        assert_eq!(back.records[1].label, Label::Hateful);
        let man: IndexManifest = serde_json::from_str(&std::fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(man, IndexManifest { metric: SimMetric::NegL2, n_rows: 3, n: 3 });
    }
}
