//! Run configuration: every modelling and retrieval hyperparameter plus the
//! ablation switches. Loaded from a strict JSON object; absent keys take
//! their defaults, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMetric {
    Cosine,
    InnerProduct,
    NegL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Nll,
    Triplet,
}

/// How `grad_clip_value` is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp every entry into `[-c, c]`.
    Value,
    /// Rescale all gradients so their global L2 norm is at most `c`.
    Norm,
}

/// Source of pseudo-gold positives and hard negatives during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Dense,
    /// BM25 over the text sidecar.
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub projection_dim: usize,
    pub pre_output_layers: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_value: f64,
    pub clip_mode: ClipMode,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub sim_metric: SimMetric,
    pub loss_kind: LossKind,
    pub triplet_margin: f64,
    /// Weight of the contrastive term in the joint loss.
    pub lambda_rgcll: f64,
    /// Weight of the cross-entropy term; 0 trains on the contrastive loss alone.
    pub lambda_ce: f64,
    pub n_hard_negative: usize,
    pub n_pseudo_gold: usize,
    pub knn_k: usize,
    pub retrieval: RetrievalMode,
    /// Use the stale index embeddings for retrieved examples instead of
    /// re-encoding them with the current parameters.
    pub detach_retrieved: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            projection_dim: 1024,
            pre_output_layers: 3,
            dropout_rate: 0.1,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            grad_clip_value: 0.1,
            clip_mode: ClipMode::Value,
            batch_size: 64,
            max_epochs: 30,
            sim_metric: SimMetric::Cosine,
            loss_kind: LossKind::Nll,
            triplet_margin: 0.2,
            lambda_rgcll: 1.0,
            lambda_ce: 1.0,
            n_hard_negative: 1,
            n_pseudo_gold: 1,
            knn_k: 10,
            retrieval: RetrievalMode::Dense,
            detach_retrieved: false,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "projection_dim",
    "pre_output_layers",
    "dropout_rate",
    "learning_rate",
    "weight_decay",
    "grad_clip_value",
    "clip_mode",
    "batch_size",
    "max_epochs",
    "sim_metric",
    "loss_kind",
    "triplet_margin",
    "lambda_rgcll",
    "lambda_ce",
    "n_hard_negative",
    "n_pseudo_gold",
    "knn_k",
    "retrieval",
    "detach_retrieved",
    "seed",
];

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::ParseError(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::ParseError("config must be a JSON object".into()))?;
        if let Some(key) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownKey(key.clone()));
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::ParseError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 13] = [
            ("projection_dim", self.projection_dim >= 1),
            ("pre_output_layers", self.pre_output_layers >= 1),
            ("dropout_rate", (0.0..1.0).contains(&self.dropout_rate)),
            ("learning_rate", self.learning_rate.is_finite() && self.learning_rate >= 0.0),
            ("weight_decay", self.weight_decay.is_finite() && self.weight_decay >= 0.0),
            ("grad_clip_value", self.grad_clip_value.is_finite() && self.grad_clip_value > 0.0),
            ("batch_size", self.batch_size >= 2),
            ("max_epochs", self.max_epochs >= 1),
            ("triplet_margin", self.triplet_margin.is_finite() && self.triplet_margin >= 0.0),
            ("lambda_rgcll", self.lambda_rgcll.is_finite() && self.lambda_rgcll >= 0.0),
            ("lambda_ce", self.lambda_ce.is_finite() && self.lambda_ce >= 0.0),
            ("knn_k", self.knn_k >= 1),
            ("lambda_rgcll", self.lambda_rgcll > 0.0 || self.lambda_ce > 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::OutOfRange(name.to_string())),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.projection_dim, 1024);
        assert_eq!(cfg.pre_output_layers, 3);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.grad_clip_value, 0.1);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.max_epochs, 30);
        assert_eq!(cfg.sim_metric, SimMetric::Cosine);
        assert_eq!(cfg.loss_kind, LossKind::Nll);
        assert_eq!((cfg.n_hard_negative, cfg.n_pseudo_gold, cfg.knn_k), (1, 1, 10));
    }

    #[test]
    fn mixing_ratio_key() {
        let cfg = RunConfig::from_json_str(r#"{"lambda_rgcll": 2.0}"#).unwrap();
        assert_eq!(cfg.lambda_rgcll, 2.0);
        assert_eq!(cfg.lambda_ce, 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            RunConfig::from_json_str(r#"{"knn_k": 0}"#),
            Err(Error::OutOfRange(k)) if k == "knn_k"
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"lambda_rgc": 1}"#),
            Err(Error::UnknownKey(k)) if k == "lambda_rgc"
        ));
        assert!(matches!(RunConfig::from_json_str("[1]"), Err(Error::ParseError(_))));
        assert!(matches!(RunConfig::from_json_str("{"), Err(Error::ParseError(_))));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"sim_metric": "manhattan"}"#),
            Err(Error::ParseError(_))
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"lambda_rgcll": 0, "lambda_ce": 0}"#),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn json_round_trip_and_hash() {
        let cfg = RunConfig { sim_metric: SimMetric::NegL2, seed: 9, ..Default::default() };
        let back = RunConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hash(), back.hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(cfg.hash().len(), 64);
    }
}
