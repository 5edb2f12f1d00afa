//! Synthetic confounder benchmark.
//!
//! A hidden rule pairs each image concept `c` with exactly one hateful text
//! concept `partner(c)`. Each unit draws two image concepts `a != b`, one
//! instance of each, and one text instance of each partner, then emits four
//! records:
//!
//! * hateful anchor `(img a, txt partner(a))`,
//! * benign `(img b, txt partner(a))`: the first anchor's image confounder,
//! * benign `(img a, txt partner(b))`: the first anchor's text confounder,
//! * hateful anchor `(img b, txt partner(b))`, for which the two benign
//!   records are the text and image confounders respectively.
//!
//! Shared modalities reuse the same instance vector; each record then gets
//! independent Gaussian noise of scale `cluster_sigma`. Labels are exactly
//! balanced, and whether a record is hateful depends only on the image/text
//! interaction, never on either modality alone.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, EmbeddingRecord, Label};
use crate::error::{Error, Result};

fn default_concepts() -> usize {
    8
}

fn default_instance_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of four-record units (two anchors and their two shared
    /// confounders) in the training split.
    pub n_pairs: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub cluster_sigma: f64,
    pub seed: u64,
    /// Number of latent concepts per modality.
    #[serde(default = "default_concepts")]
    pub n_concepts: usize,
    /// Spread of per-triplet instances around their concept centre.
    #[serde(default = "default_instance_scale")]
    pub instance_scale: f64,
    /// Units in each held-out split; defaults to `n_pairs`.
    #[serde(default)]
    pub n_test_pairs: Option<usize>,
}

impl SynthSpec {
    pub fn new(n_pairs: usize, d_img: usize, d_txt: usize, cluster_sigma: f64, seed: u64) -> Self {
        SynthSpec {
            n_pairs,
            d_img,
            d_txt,
            cluster_sigma,
            seed,
            n_concepts: default_concepts(),
            instance_scale: default_instance_scale(),
            n_test_pairs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::OutOfRange(what.to_string()));
        if self.d_img < 2 {
            return bad("d_img");
        }
        if self.d_txt < 2 {
            return bad("d_txt");
        }
        if self.n_pairs < 1 {
            return bad("n_pairs");
        }
        if self.n_test_pairs.is_some_and(|n| n < 1) {
            return bad("n_test_pairs");
        }
        if !(self.cluster_sigma.is_finite() && self.cluster_sigma >= 0.0) {
            return bad("cluster_sigma");
        }
        if !(self.instance_scale.is_finite() && self.instance_scale >= 0.0) {
            return bad("instance_scale");
        }
        if self.n_concepts < 2 {
            return bad("n_concepts");
        }
        Ok(())
    }
}

struct World {
    img_centres: Vec<Vec<f64>>,
    txt_centres: Vec<Vec<f64>>,
    partner: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl World {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> World {
        let img_centres = (0..spec.n_concepts).map(|_| gaussian(rng, spec.d_img, 1.0)).collect();
        let txt_centres = (0..spec.n_concepts).map(|_| gaussian(rng, spec.d_txt, 1.0)).collect();
        // Random permutation via Fisher-Yates.
        let mut partner: Vec<usize> = (0..spec.n_concepts).collect();
        for i in (1..partner.len()).rev() {
            let j = rng.random_range(0..=i);
            partner.swap(i, j);
        }
        World { img_centres, txt_centres, partner }
    }

    fn instance(&self, centre: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        add(centre, &gaussian(rng, centre.len(), scale))
    }

    fn sample_split(
        &self,
        spec: &SynthSpec,
        n_units: usize,
        first_id: u64,
        rng: &mut ChaCha8Rng,
    ) -> EmbeddingDataset {
        let c = spec.n_concepts;
        let mut records = Vec::with_capacity(4 * n_units);
        let mut texts = HashMap::with_capacity(4 * n_units);
        let mut next_id = first_id;
        for _ in 0..n_units {
            let a = rng.random_range(0..c);
            let b = {
                let k = rng.random_range(0..c - 1);
                if k >= a {
                    k + 1
                } else {
                    k
                }
            };
            let (ta, tb) = (self.partner[a], self.partner[b]);
            let img_a = self.instance(&self.img_centres[a], spec.instance_scale, rng);
            let img_b = self.instance(&self.img_centres[b], spec.instance_scale, rng);
            let txt_a = self.instance(&self.txt_centres[ta], spec.instance_scale, rng);
            let txt_b = self.instance(&self.txt_centres[tb], spec.instance_scale, rng);

            let members = [
                (Label::Hateful, &img_a, &txt_a, a, ta),
                (Label::Benign, &img_b, &txt_a, b, ta),
                (Label::Benign, &img_a, &txt_b, a, tb),
                (Label::Hateful, &img_b, &txt_b, b, tb),
            ];
            for (label, fi, ft, ci, ct) in members {
                let noisy = |v: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
                    v.iter()
                        .zip(gaussian(rng, v.len(), spec.cluster_sigma))
                        .map(|(x, e)| (x + e) as f32)
                        .collect()
                };
                let f_img = noisy(fi, rng);
                let f_txt = noisy(ft, rng);
                records.push(EmbeddingRecord { id: next_id, label, f_img, f_txt });
                texts.insert(next_id, format!("img{ci} txt{ct}"));
                next_id += 1;
            }
        }
        EmbeddingDataset { d_img: spec.d_img, d_txt: spec.d_txt, records, texts: Some(texts) }
    }
}

/// Generates (train, dev, test). Dev and test each hold `n_test_pairs`
/// units; ids are disjoint across all three splits. Train and test are
/// identical to what [`gen_synthetic_confounders`] returns.
pub fn gen_synthetic_splits(
    spec: &SynthSpec,
) -> Result<(EmbeddingDataset, EmbeddingDataset, EmbeddingDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let n_test = spec.n_test_pairs.unwrap_or(spec.n_pairs);
    let train = world.sample_split(spec, spec.n_pairs, 0, &mut rng);
    let test_first = 4 * spec.n_pairs as u64;
    let test = world.sample_split(spec, n_test, test_first, &mut rng);
    let dev = world.sample_split(spec, n_test, test_first + 4 * n_test as u64, &mut rng);
    Ok((train, dev, test))
}

/// Generates a (train, test) pair of confounder datasets, deterministic in
/// the spec.
pub fn gen_synthetic_confounders(spec: &SynthSpec) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let (train, _, test) = gen_synthetic_splits(spec)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_dataset;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::new(6, 3, 4, 0.1, 42);
        let (a_tr, a_te) = gen_synthetic_confounders(&spec).unwrap();
        let (b_tr, b_te) = gen_synthetic_confounders(&spec).unwrap();
        assert_eq!(encode_dataset(&a_tr).unwrap(), encode_dataset(&b_tr).unwrap());
        assert_eq!(encode_dataset(&a_te).unwrap(), encode_dataset(&b_te).unwrap());
        assert_eq!(a_tr.texts, b_tr.texts);
    }

    #[test]
    fn four_pairs_make_sixteen_balanced_records() {
        let (train, test) = gen_synthetic_confounders(&SynthSpec::new(4, 2, 2, 0.1, 1)).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(train.class_counts(), (8, 8));
        let train_ids: std::collections::HashSet<_> = train.ids().into_iter().collect();
        assert!(test.ids().iter().all(|id| !train_ids.contains(id)));
        crate::data::validate_for_training(&train).unwrap();
    }

    #[test]
    fn nearest_shared_modality_record_flips_label() {
        let spec = SynthSpec::new(30, 4, 4, 0.0, 7);
        let (train, _) = gen_synthetic_confounders(&spec).unwrap();
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
        };
        let img = |r: &EmbeddingRecord| r.f_img.clone();
        let txt = |r: &EmbeddingRecord| r.f_txt.clone();
        for modality in [&img as &dyn Fn(&EmbeddingRecord) -> Vec<f32>, &txt] {
            for (i, anchor) in train.records.iter().enumerate() {
                if anchor.label != Label::Hateful {
                    continue;
                }
                let nearest = train
                    .records
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .min_by(|(_, a), (_, b)| {
                        dist(&modality(a), &modality(anchor)).total_cmp(&dist(&modality(b), &modality(anchor)))
                    })
                    .unwrap()
                    .1;
                assert_eq!(dist(&modality(nearest), &modality(anchor)), 0.0);
                assert_eq!(nearest.label, Label::Benign);
            }
        }
    }

    #[test]
    fn every_split_is_balanced() {
        let mut spec = SynthSpec::new(7, 3, 3, 0.2, 5);
        spec.n_test_pairs = Some(5);
        let (train, dev, test) = gen_synthetic_splits(&spec).unwrap();
        assert_eq!(train.class_counts(), (14, 14));
        assert_eq!(dev.class_counts(), (10, 10));
        assert_eq!(test.class_counts(), (10, 10));
    }

    #[test]
    fn bad_specs() {
        assert!(gen_synthetic_confounders(&SynthSpec::new(0, 2, 2, 0.1, 0)).is_err());
        assert!(gen_synthetic_confounders(&SynthSpec::new(4, 1, 2, 0.1, 0)).is_err());
        assert!(gen_synthetic_confounders(&SynthSpec::new(4, 2, 2, -1.0, 0)).is_err());
    }
}
