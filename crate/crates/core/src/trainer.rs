//! The retrieval-guided training loop.
//!
//! Per batch: encode the batch in train mode; select pseudo-gold positives
//! and hard negatives from the epoch-start index snapshot; re-encode the
//! selected records with the current parameters; build contrastive items
//! from the hard negatives plus in-batch negatives; take one AdamW step on
//! the mean joint loss. The index is rebuilt in eval mode after each epoch.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{LossKind, RetrievalMode, RunConfig};
use crate::data::{validate_for_training, EmbeddingDataset, Label};
use crate::encoder::{to_f64, ForwardCache, Model};
use crate::error::{Error, Result};
use crate::eval::evaluate_logistic;
use crate::losses::{cross_entropy, rgcll, triplet_mean, ContrastiveItem, LossOutput};
use crate::neural::{clip_gradients, AdamW, TrainRng};
use crate::retrieval::{DenseIndex, LabelFilter, Neighbor, SparseIndex};

/// A uniform shuffle of `0..n` cut into consecutive chunks of `batch_size`;
/// the last chunk may be short.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut TrainRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Positions `j != i` in the batch whose label differs from position `i`.
pub fn in_batch_negatives(batch_labels: &[Label], i: usize) -> Vec<usize> {
    let li = batch_labels[i];
    (0..batch_labels.len()).filter(|&j| j != i && batch_labels[j] != li).collect()
}

/// Positions `j != i` in the batch sharing position `i`'s label.
pub fn in_batch_positives(batch_labels: &[Label], i: usize) -> Vec<usize> {
    let li = batch_labels[i];
    (0..batch_labels.len()).filter(|&j| j != i && batch_labels[j] == li).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rgcll: f64,
    pub mean_ce: f64,
    pub dev_auroc: Option<f64>,
    pub dev_accuracy: Option<f64>,
    /// Wall-clock time; kept out of the history file so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

/// Where a contrastive example's embedding lives during a step.
#[derive(Debug, Clone, Copy)]
enum Slot {
    Batch(usize),
    Extra(usize),
}

struct Extra {
    emb: Vec<f64>,
    cache: Option<ForwardCache>,
    grad: Vec<f64>,
}

/// Result of [`TrainState::batch_gradient`].
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub objective: f64,
    pub rgcll_sum: f64,
    /// Anchors that contributed a contrastive term.
    pub rgcll_anchors: usize,
    pub ce_sum: f64,
    pub grads: Model,
}

#[derive(Default)]
struct EpochSums {
    joint: f64,
    rgcll: f64,
    rgcll_count: usize,
    ce: f64,
    examples: usize,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Eval-mode snapshot of the training set, rebuilt once per epoch.
    pub index: DenseIndex,
    pub epoch: usize,
    rng: TrainRng,
    features: Vec<(Vec<f64>, Vec<f64>)>,
    labels: Vec<Label>,
    sparse: Option<(SparseIndex, Vec<String>)>,
}

impl TrainState {
    /// Validates the training set, initializes the model from `config.seed`
    /// and builds the epoch-0 index from the untrained encoder.
    pub fn new(train: &EmbeddingDataset, config: &RunConfig) -> Result<Self> {
        config.validate()?;
        validate_for_training(train)?;
        let mut rng = TrainRng::seed_from_u64(config.seed);
        let model = Model::init(train.d_img, train.d_txt, config, &mut rng);
        Self::with_model(train, config, model, rng)
    }

    /// Starts from given parameters instead of a fresh init.
    pub fn with_model(
        train: &EmbeddingDataset,
        config: &RunConfig,
        model: Model,
        rng: TrainRng,
    ) -> Result<Self> {
        validate_for_training(train)?;
        model.encoder.check_shapes()?;
        let sparse = match config.retrieval {
            RetrievalMode::Dense => None,
            RetrievalMode::Sparse => {
                let texts = train.texts_in_order()?;
                let idx = SparseIndex::build(&train.ids(), &texts, &train.labels())?;
                Some((idx, texts.into_iter().map(str::to_string).collect()))
            }
        };
        let index = DenseIndex::build(train, &model.encoder, config.sim_metric)?;
        let optimizer = AdamW::new(&model, config.learning_rate, config.weight_decay);
        let features = train.records.iter().map(|r| (to_f64(&r.f_img), to_f64(&r.f_txt))).collect();
        Ok(TrainState {
            config: config.clone(),
            model,
            optimizer,
            index,
            epoch: 0,
            rng,
            features,
            labels: train.labels(),
            sparse,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.clone(), model: self.model.clone() }
    }

    /// Positive and hard-negative rows for an anchor, chosen from the
    /// epoch-start snapshot only.
    fn select(&self, row: usize) -> Result<(Vec<Neighbor>, Vec<Neighbor>)> {
        let cfg = &self.config;
        let label = self.labels[row];
        match &self.sparse {
            None => {
                let scores = self.index.scores(self.index.row(row))?;
                let pos = self.index.topk_from_scores(&scores, cfg.n_pseudo_gold, &[row], LabelFilter::same(label));
                let neg = self.index.topk_from_scores(&scores, cfg.n_hard_negative, &[], LabelFilter::opposite(label));
                Ok((pos, neg))
            }
            Some((sparse, texts)) => {
                let pos = sparse.query_topk(&texts[row], cfg.n_pseudo_gold, &[row], LabelFilter::same(label));
                let neg = sparse.query_topk(&texts[row], cfg.n_hard_negative, &[], LabelFilter::opposite(label));
                Ok((pos, neg))
            }
        }
    }

    fn retrieved(&mut self, row: usize) -> Result<Extra> {
        let n = self.model.encoder.embed_dim();
        if self.config.detach_retrieved {
            return Ok(Extra { emb: self.index.row(row).to_vec(), cache: None, grad: vec![0.0; n] });
        }
        let (fi, ft) = &self.features[row];
        let (emb, cache) = self.model.encoder.encode_train(fi, ft, &mut self.rng)?;
        Ok(Extra { emb, cache: Some(cache), grad: vec![0.0; n] })
    }

    /// Joint objective of one batch and its unclipped gradient. The
    /// objective is `(lambda_rgcll * sum_i rgcll_i + lambda_ce * sum_i ce_i) / b`.
    pub fn batch_gradient(&mut self, batch: &[usize]) -> Result<BatchGradient> {
        let cfg = self.config.clone();
        let b = batch.len();
        let n = self.model.encoder.embed_dim();
        let batch_labels: Vec<Label> = batch.iter().map(|&r| self.labels[r]).collect();

        let mut embs = Vec::with_capacity(b);
        let mut caches = Vec::with_capacity(b);
        for &r in batch {
            let (fi, ft) = &self.features[r];
            let (g, cache) = self.model.encoder.encode_train(fi, ft, &mut self.rng)?;
            embs.push(g);
            caches.push(cache);
        }
        let mut d_embs = vec![vec![0.0; n]; b];
        let mut grads = self.model.zeros_like();

        let mut ce_sum = 0.0;
        for i in 0..b {
            let (ce, d_logit) = cross_entropy(self.model.head.logit(&embs[i]), batch_labels[i].as_f64());
            ce_sum += ce;
            if cfg.lambda_ce > 0.0 {
                let (dw, db, dg) = self.model.head.backward(&embs[i], cfg.lambda_ce * d_logit / b as f64);
                grads.head.w.iter_mut().zip(&dw).for_each(|(a, v)| *a += v);
                grads.head.b += db;
                d_embs[i].iter_mut().zip(&dg).for_each(|(a, v)| *a += v);
            }
        }

        let mut rgcll_sum = 0.0;
        let mut rgcll_anchors = 0;
        let mut extras: Vec<Extra> = Vec::new();
        if cfg.lambda_rgcll > 0.0 {
            for i in 0..b {
                let (pos_rows, neg_rows) = self.select(batch[i])?;
                let mut positives: Vec<Slot> = Vec::new();
                if cfg.n_pseudo_gold == 0 {
                    positives.extend(in_batch_positives(&batch_labels, i).into_iter().map(Slot::Batch));
                } else {
                    for nb in &pos_rows {
                        extras.push(self.retrieved(nb.row)?);
                        positives.push(Slot::Extra(extras.len() - 1));
                    }
                }
                let mut negatives: Vec<Slot> = Vec::new();
                for nb in &neg_rows {
                    extras.push(self.retrieved(nb.row)?);
                    negatives.push(Slot::Extra(extras.len() - 1));
                }
                negatives.extend(in_batch_negatives(&batch_labels, i).into_iter().map(Slot::Batch));
                if positives.is_empty() || negatives.is_empty() {
                    continue;
                }

                let emb = |s: Slot| -> &[f64] {
                    match s {
                        Slot::Batch(j) => &embs[j],
                        Slot::Extra(k) => &extras[k].emb,
                    }
                };
                let mut outs: Vec<(Slot, LossOutput)> = Vec::with_capacity(positives.len());
                for &p in &positives {
                    let item = ContrastiveItem {
                        anchor: &embs[i],
                        positive: emb(p),
                        negatives: negatives.iter().map(|&s| emb(s)).collect(),
                    };
                    let out = match cfg.loss_kind {
                        LossKind::Nll => rgcll(&item, cfg.sim_metric)?,
                        LossKind::Triplet => triplet_mean(&item, cfg.triplet_margin, cfg.sim_metric)?,
                    };
                    outs.push((p, out));
                }

                let per_pos = 1.0 / positives.len() as f64;
                let scale = cfg.lambda_rgcll * per_pos / b as f64;
                let mut term = 0.0;
                for (p, out) in outs {
                    term += per_pos * out.loss;
                    let mut add = |s: Slot, d: &[f64]| {
                        let dst = match s {
                            Slot::Batch(j) => &mut d_embs[j],
                            Slot::Extra(k) => &mut extras[k].grad,
                        };
                        dst.iter_mut().zip(d).for_each(|(a, v)| *a += scale * v);
                    };
                    add(Slot::Batch(i), &out.d_anchor);
                    add(p, &out.d_positive);
                    for (&s, d) in negatives.iter().zip(&out.d_negatives) {
                        add(s, d);
                    }
                }
                rgcll_sum += term;
                rgcll_anchors += 1;
            }
        }

        let joint = cfg.lambda_rgcll * rgcll_sum + cfg.lambda_ce * ce_sum;
        if joint.is_finite() {
            for (cache, d) in caches.iter().zip(&d_embs) {
                self.model.encoder.backward_into(cache, d, &mut grads.encoder)?;
            }
            for e in &extras {
                if let Some(cache) = &e.cache {
                    self.model.encoder.backward_into(cache, &e.grad, &mut grads.encoder)?;
                }
            }
        }
        Ok(BatchGradient {
            objective: joint / b as f64,
            rgcll_sum,
            rgcll_anchors,
            ce_sum,
            grads,
        })
    }

    fn train_batch(&mut self, batch: &[usize], batch_no: usize, sums: &mut EpochSums) -> Result<()> {
        let mut bg = self.batch_gradient(batch)?;
        if !bg.objective.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                batch: batch_no,
                detail: format!("rgcll sum {}, ce sum {}", bg.rgcll_sum, bg.ce_sum),
            });
        }
        sums.joint += bg.objective * batch.len() as f64;
        sums.rgcll += bg.rgcll_sum;
        sums.rgcll_count += bg.rgcll_anchors;
        sums.ce += bg.ce_sum;
        sums.examples += batch.len();
        clip_gradients(&mut bg.grads, self.config.grad_clip_value, self.config.clip_mode);
        self.optimizer.step(&mut self.model, &bg.grads)
    }

    /// One pass over the training set followed by the index rebuild.
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        let batches = make_batches(self.labels.len(), self.config.batch_size, &mut self.rng);
        let mut sums = EpochSums::default();
        for (bi, batch) in batches.iter().enumerate() {
            self.train_batch(batch, bi, &mut sums)?;
        }
        let encoder = &self.model.encoder;
        self.index = DenseIndex::from_embeddings(
            self.features
                .par_iter()
                .map(|(fi, ft)| encoder.encode_eval(fi, ft))
                .collect::<Result<Vec<_>>>()?,
            self.labels.clone(),
            self.index.ids().to_vec(),
            self.model.encoder.embed_dim(),
            self.config.sim_metric,
        )?;
        self.epoch += 1;
        let examples = sums.examples.max(1) as f64;
        Ok(EpochReport {
            epoch: self.epoch,
            mean_loss: sums.joint / examples,
            mean_rgcll: if sums.rgcll_count == 0 { 0.0 } else { sums.rgcll / sums.rgcll_count as f64 },
            mean_ce: sums.ce / examples,
            dev_auroc: None,
            dev_accuracy: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_dev_auroc: Option<f64>,
    pub history: Vec<EpochReport>,
}

/// Runs every epoch, scoring the dev set through the logistic head after
/// each one, and keeps the highest-dev-AUROC checkpoint (earlier epoch wins
/// ties).
pub fn train(train: &EmbeddingDataset, dev: &EmbeddingDataset, config: &RunConfig) -> Result<TrainOutcome> {
    train_with(train, dev, config, |_| {})
}

pub fn train_with(
    train: &EmbeddingDataset,
    dev: &EmbeddingDataset,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    dev.check_invariants()?;
    if dev.d_img != train.d_img || dev.d_txt != train.d_txt {
        return Err(Error::ShapeMismatch(format!(
            "dev dims ({}, {}) differ from train dims ({}, {})",
            dev.d_img, dev.d_txt, train.d_img, train.d_txt
        )));
    }
    let mut state = TrainState::new(train, config)?;
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, Option<f64>, Checkpoint)> = None;
    for _ in 0..config.max_epochs {
        let mut report = state.train_epoch()?;
        let start = Instant::now();
        if !dev.is_empty() {
            let m = evaluate_logistic(dev, &state.model)?;
            report.dev_auroc = m.auroc;
            report.dev_accuracy = Some(m.accuracy);
        }
        report.seconds += start.elapsed().as_secs_f64();
        let better = match &best {
            None => true,
            Some((_, prev, _)) => report.dev_auroc.unwrap_or(f64::NEG_INFINITY) > prev.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some((report.epoch, report.dev_auroc, state.checkpoint()));
        }
        on_epoch(&report);
        history.push(report);
    }
    let (best_epoch, best_dev_auroc, best) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome { best, best_epoch, best_dev_auroc, history })
}

/// One JSON object per line.
pub fn history_jsonl(history: &[EpochReport]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("report serializes") + "\n").collect()
}

pub fn write_history(history: &[EpochReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_jsonl(history).as_bytes()).map_err(|e| Error::io(path, e))
}
