use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::defaults;
use crate::tensor::Real;

/// How routing scores become group weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Sinkhorn,
    SoftmaxWithBalanceLoss,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Sinkhorn => "sinkhorn",
            Normalization::SoftmaxWithBalanceLoss => "softmax_with_balance_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sinkhorn" => Some(Normalization::Sinkhorn),
            "softmax" | "softmax_with_balance_loss" => Some(Normalization::SoftmaxWithBalanceLoss),
            _ => None,
        }
    }
}

/// Architecture and routing hyperparameters of the toy language model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    #[serde(rename = "T")]
    pub context: usize,
    pub w: usize,
    #[serde(rename = "K")]
    pub groups: usize,
    pub d_g: usize,
    pub tau: Real,
    pub lambda: Real,
    pub a0: Real,
    #[serde(rename = "N")]
    pub sinkhorn_iters: usize,
    pub normalization: Normalization,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            context: 128,
            w: 16,
            groups: defaults::GROUPS,
            d_g: defaults::ROUTING_DIM,
            tau: defaults::TAU,
            lambda: defaults::GATE_SHARPNESS,
            a0: defaults::GATE_OFFSET,
            sinkhorn_iters: defaults::SINKHORN_ITERS,
            normalization: Normalization::Sinkhorn,
        }
    }
}

fn config_err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.to_string(), reason: reason.into() }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("vocab", self.vocab),
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("T", self.context),
            ("w", self.w),
            ("d_g", self.d_g),
            ("N", self.sinkhorn_iters),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return Err(config_err("heads", format!("d={} is not divisible by heads={}", self.d, self.heads)));
        }
        if self.context < self.w {
            return Err(config_err("w", format!("window {} exceeds context T={}", self.w, self.context)));
        }
        if !(2..=64).contains(&self.groups) {
            return Err(config_err("K", format!("need 2 <= K <= 64, got {}", self.groups)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config_err("tau", "must be positive and finite"));
        }
        if !self.lambda.is_finite() || !self.a0.is_finite() {
            return Err(config_err("lambda", "gate parameters must be finite"));
        }
        if self.vocab > 256 {
            return Err(config_err("vocab", "byte-level model supports at most 256 symbols"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Optimiser, phase lengths and mitigation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    /// Full-attention steps with routing bypassed, producing the frozen base.
    pub pretrain_steps: usize,
    pub centroid_steps: usize,
    pub full_steps: usize,
    pub lr_pretrain: Real,
    pub lr_centroid: Real,
    pub lr_full: Real,
    pub eval_every: usize,
    pub eval_sequences: usize,
    pub balance_weight: Real,
    pub entropy_weight: Real,
    pub balance_x5: bool,
    pub ema_centroids: bool,
    pub ema_decay: Real,
    pub stop_grad_inputs: bool,
    /// Re-seed centroids by k-means every this many steps; 0 disables.
    pub recluster_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            pretrain_steps: 300,
            centroid_steps: 2000,
            full_steps: 1000,
            lr_pretrain: 1e-3,
            lr_centroid: 3e-4,
            lr_full: 1e-4,
            eval_every: 50,
            eval_sequences: 4,
            balance_weight: 0.01,
            entropy_weight: 0.001,
            balance_x5: false,
            ema_centroids: false,
            ema_decay: 0.99,
            stop_grad_inputs: false,
            recluster_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(config_err("batch", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every", "must be positive"));
        }
        if self.eval_sequences == 0 {
            return Err(config_err("eval_sequences", "must be positive"));
        }
        for (field, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_centroid", self.lr_centroid), ("lr_full", self.lr_full)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config_err(field, "must be positive and finite"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err("ema_decay", "must lie in [0, 1)"));
        }
        if self.balance_weight < 0.0 || self.entropy_weight < 0.0 {
            return Err(config_err("balance_weight", "loss weights must be nonnegative"));
        }
        Ok(())
    }

    /// Balance weight after the ×5 toggle.
    pub fn effective_balance_weight(&self) -> Real {
        if self.balance_x5 {
            5.0 * self.balance_weight
        } else {
            self.balance_weight
        }
    }
}

/// Synthetic corpus shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Bytes of training text.
    pub train_bytes: usize,
    /// Bytes of held-out text used for evaluation and k-means.
    pub eval_bytes: usize,
    pub words: usize,
    pub entities: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { train_bytes: 200_000, eval_bytes: 20_000, words: 48, entities: 12 }
    }
}

impl CorpusConfig {
    pub fn validate(&self, context: usize) -> Result<()> {
        if self.train_bytes <= context + 1 || self.eval_bytes <= context + 1 {
            return Err(config_err("train_bytes", format!("corpus must be longer than T+1 = {}", context + 1)));
        }
        if self.words < 2 || self.entities < 2 {
            return Err(config_err("words", "need at least 2 words and 2 entities"));
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub model: ToyModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate(self.model.context)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LabConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        LabConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let field_of = |c: &LabConfig| match c.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        let mut c = LabConfig::default();
        c.model.heads = 3;
        assert_eq!(field_of(&c), "heads");
        let mut c = LabConfig::default();
        c.model.w = 1000;
        assert_eq!(field_of(&c), "w");
        let mut c = LabConfig::default();
        c.model.groups = 1;
        assert_eq!(field_of(&c), "K");
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = LabConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(LabConfig::from_json(&text).unwrap(), c);
        let partial = LabConfig::from_json(r#"{"seed": 3, "model": {"K": 4, "normalization": "softmax_with_balance_loss"}}"#).unwrap();
        assert_eq!(partial.model.groups, 4);
        assert_eq!(partial.model.d, 64);
        assert!(LabConfig::from_json(r#"{"model": {"KK": 4}}"#).is_err());
        assert!(LabConfig::from_json(r#"{"extra": 1}"#).is_err());
    }
}
