//! Contrastive, triplet and cross-entropy losses with analytic gradients.

use crate::config::SimMetric;
use crate::encoder::sigmoid;
use crate::error::{Error, Result};
use crate::neural::dot;
use crate::retrieval::{l2_norm, similarity};

/// Anchor, one positive, and a non-empty list of negatives (hard negatives
/// first, then in-batch negatives).
#[derive(Debug, Clone)]
pub struct ContrastiveItem<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negatives: Vec<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `(sim(a, b), d sim/da, d sim/db)`.
pub fn similarity_grad(a: &[f64], b: &[f64], metric: SimMetric) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let s = similarity(a, b, metric)?;
    let (da, db) = match metric {
        SimMetric::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            let inv = 1.0 / (na * nb);
            let raw = dot(a, b) * inv;
            let da = a.iter().zip(b).map(|(x, y)| y * inv - raw * x / (na * na)).collect();
            let db = a.iter().zip(b).map(|(x, y)| x * inv - raw * y / (nb * nb)).collect();
            (da, db)
        }
        SimMetric::InnerProduct => (b.to_vec(), a.to_vec()),
        SimMetric::NegL2 => {
            let da = a.iter().zip(b).map(|(x, y)| -2.0 * (x - y)).collect();
            let db = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
            (da, db)
        }
    };
    Ok((s, da, db))
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += alpha * b);
}

/// Softmax negative log-likelihood of the positive against all negatives:
/// `-log(e^{s+} / (e^{s+} + sum_j e^{s_j}))`, computed with a max-shifted
/// log-sum-exp.
pub fn rgcll(item: &ContrastiveItem<'_>, metric: SimMetric) -> Result<LossOutput> {
    if item.negatives.is_empty() {
        return Err(Error::ShapeMismatch("contrastive item needs at least one negative".into()));
    }
    let n = item.anchor.len();
    if item.positive.len() != n || item.negatives.iter().any(|g| g.len() != n) {
        return Err(Error::ShapeMismatch("contrastive item vectors differ in length".into()));
    }
    let (s_pos, da_pos, db_pos) = similarity_grad(item.anchor, item.positive, metric)?;
    let mut neg = Vec::with_capacity(item.negatives.len());
    for g in &item.negatives {
        neg.push(similarity_grad(item.anchor, g, metric)?);
    }

    let max = neg.iter().map(|t| t.0).fold(s_pos, f64::max);
    let z_pos = (s_pos - max).exp();
    let z_neg: Vec<f64> = neg.iter().map(|t| (t.0 - max).exp()).collect();
    let total = z_pos + z_neg.iter().sum::<f64>();
    let loss = max + total.ln() - s_pos;

    let w_pos = z_pos / total - 1.0;
    let mut d_anchor = vec![0.0; n];
    axpy(&mut d_anchor, w_pos, &da_pos);
    let d_positive = db_pos.iter().map(|v| w_pos * v).collect();
    let mut d_negatives = Vec::with_capacity(neg.len());
    for ((_, da, db), z) in neg.iter().zip(&z_neg) {
        let p = z / total;
        axpy(&mut d_anchor, p, da);
        d_negatives.push(db.iter().map(|v| p * v).collect());
    }
    Ok(LossOutput { loss, d_anchor, d_positive, d_negatives })
}

/// Hinge `max(0, margin - sim(a, p) + sim(a, n))`. Zero gradients when the
/// hinge is inactive (including exactly at the boundary).
pub fn triplet(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
    metric: SimMetric,
) -> Result<LossOutput> {
    let (s_ap, da_p, db_p) = similarity_grad(anchor, positive, metric)?;
    let (s_an, da_n, db_n) = similarity_grad(anchor, negative, metric)?;
    let v = margin - s_ap + s_an;
    let n = anchor.len();
    if v <= 0.0 {
        return Ok(LossOutput {
            loss: 0.0,
            d_anchor: vec![0.0; n],
            d_positive: vec![0.0; n],
            d_negatives: vec![vec![0.0; n]],
        });
    }
    let d_anchor = da_n.iter().zip(&da_p).map(|(x, y)| x - y).collect();
    let d_positive = db_p.iter().map(|v| -v).collect();
    Ok(LossOutput { loss: v, d_anchor, d_positive, d_negatives: vec![db_n] })
}

/// Mean triplet hinge of the positive against each negative in the item.
pub fn triplet_mean(item: &ContrastiveItem<'_>, margin: f64, metric: SimMetric) -> Result<LossOutput> {
    if item.negatives.is_empty() {
        return Err(Error::ShapeMismatch("contrastive item needs at least one negative".into()));
    }
    let n = item.anchor.len();
    let scale = 1.0 / item.negatives.len() as f64;
    let mut out = LossOutput {
        loss: 0.0,
        d_anchor: vec![0.0; n],
        d_positive: vec![0.0; n],
        d_negatives: Vec::with_capacity(item.negatives.len()),
    };
    for neg in &item.negatives {
        let t = triplet(item.anchor, item.positive, neg, margin, metric)?;
        out.loss += scale * t.loss;
        axpy(&mut out.d_anchor, scale, &t.d_anchor);
        axpy(&mut out.d_positive, scale, &t.d_positive);
        out.d_negatives.push(t.d_negatives[0].iter().map(|v| scale * v).collect());
    }
    Ok(out)
}

/// Binary cross-entropy from a logit. Returns `(loss, d loss / d logit)`,
/// where the gradient is `sigmoid(logit) - y`.
pub fn cross_entropy(logit: f64, y: f64) -> (f64, f64) {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - y * logit, sigmoid(logit) - y)
}

/// `lambda * rgcll + ce`.
pub fn joint_loss(rgcll_value: f64, ce_value: f64, lambda_rgcll: f64) -> f64 {
    weighted_joint_loss(rgcll_value, ce_value, lambda_rgcll, 1.0)
}

pub fn weighted_joint_loss(rgcll_value: f64, ce_value: f64, lambda_rgcll: f64, lambda_ce: f64) -> f64 {
    lambda_rgcll * rgcll_value + lambda_ce * ce_value
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn item<'a>(a: &'a [f64], p: &'a [f64], negs: &'a [Vec<f64>]) -> ContrastiveItem<'a> {
        ContrastiveItem { anchor: a, positive: p, negatives: negs.iter().map(Vec::as_slice).collect() }
    }

    #[test]
    fn uniform_similarities_give_log_m_plus_one() {
        for m in [1usize, 2, 4, 63] {
            let a = vec![1.0, 0.0];
            let p = vec![0.0, 1.0];
            let negs = vec![vec![0.0, -1.0]; m];
            for metric in [SimMetric::Cosine, SimMetric::InnerProduct] {
                let out = rgcll(&item(&a, &p, &negs), metric).unwrap();
                assert!((out.loss - ((m + 1) as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_falls_as_positive_similarity_rises() {
        let a = vec![1.0, 0.5];
        let negs = vec![vec![0.3, -0.2], vec![-1.0, 0.4]];
        let mut prev = f64::INFINITY;
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let p: Vec<f64> = a.iter().map(|v| v * scale).collect();
            let l = rgcll(&item(&a, &p, &negs), SimMetric::InnerProduct).unwrap().loss;
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn triplet_cases() {
        let a = [1.0, 0.0];
        let p = [1.0, 0.1];
        let n = [-1.0, 0.0];
        let out = triplet(&a, &p, &n, 0.2, SimMetric::Cosine).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.d_anchor.iter().chain(&out.d_positive).chain(&out.d_negatives[0]).all(|&v| v == 0.0));
        let same = [0.3, 0.8];
        let out = triplet(&a, &same, &same, 0.2, SimMetric::Cosine).unwrap();
        assert!((out.loss - 0.2).abs() < 1e-15);
        assert!(matches!(triplet(&[0.0, 0.0], &p, &n, 0.2, SimMetric::Cosine), Err(Error::ZeroNormVector)));
    }

    #[test]
    fn cross_entropy_values() {
        let (l, g) = cross_entropy(0.0, 1.0);
        assert!((l - LN2).abs() < 1e-12);
        assert!((g + 0.5).abs() < 1e-15);
        assert!(cross_entropy(20.0, 1.0).0 < 1e-8);
        assert!(cross_entropy(-800.0, 0.0).0.is_finite());
        assert!((cross_entropy(-800.0, 1.0).0 - 800.0).abs() < 1e-9);
        for logit in [-3.0, -0.2, 0.0, 1.7] {
            for y in [0.0, 1.0] {
                assert_eq!(cross_entropy(logit, y).1, sigmoid(logit) - y);
            }
        }
    }

    #[test]
    fn joint_loss_values() {
        assert_eq!(joint_loss(5.0, 0.7, 0.0), 0.7);
        assert!((joint_loss(LN2, LN2, 1.0) - 2.0 * LN2).abs() < 1e-15);
        let (r, c) = (1.3, 0.4);
        let l0 = joint_loss(r, c, 0.0);
        for lam in [0.5, 2.0, 4.0] {
            assert!((joint_loss(r, c, lam) - (l0 + lam * r)).abs() < 1e-12);
        }
    }

    #[test]
    fn rgcll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-5;
        for case in 0..30 {
            let metric = [SimMetric::Cosine, SimMetric::InnerProduct, SimMetric::NegL2][case % 3];
            let n = rng.random_range(2..6);
            let m = rng.random_range(1..5);
            let mut v = |k| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let a = v(n);
            let p = v(n);
            let negs: Vec<Vec<f64>> = (0..m).map(|_| v(n)).collect();
            let out = rgcll(&item(&a, &p, &negs), metric).unwrap();
            let f = |a: &[f64]| rgcll(&item(a, &p, &negs), metric).unwrap().loss;
            for k in 0..n {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[k] += h;
                am[k] -= h;
                let fd = (f(&ap) - f(&am)) / (2.0 * h);
                assert!((fd - out.d_anchor[k]).abs() < 1e-6 * fd.abs().max(1.0), "{metric:?}");
            }
        }
    }
}
