//! Flat key-value run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which masked-vision objective fills the vision-modeling task slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MvmVariant {
    /// Knowledge-guided object masking with class + roi-feature targets.
    Omvm,
    /// Proposals masked independently at `random_mvm_rate`, same targets.
    RandomMvm,
    /// Random grid cells masked at `standard_mvm_rate`, regressing their own input features.
    StandardMvm,
}

/// Where replacement captions for image-text matching negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Batch,
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    /// Sampling weights for (OMVM, PRA, MLM, ITM).
    pub task_weights: [f64; 4],
    pub lr_backbone: f64,
    pub lr_transformer: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_steps: usize,
    pub grad_accum_steps: usize,
    /// Periodic checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Word-embedding width; projected to `d_model` when different.
    pub d_word: usize,
    pub conv_channels: [usize; 3],
    pub max_text_len: usize,
    pub use_segment_embeddings: bool,

    /// Weight of the feature-regression term relative to classification.
    pub lambda: f64,
    /// Softmax temperature for phrase-label similarities.
    pub tau: f64,
    pub mask_rate: f64,
    pub itm_neg_rate: f64,
    pub itm_negatives: NegativeSource,
    pub pra_kl_reverse: bool,
    pub mvm_variant: MvmVariant,
    pub random_mvm_rate: f64,
    pub standard_mvm_rate: f64,

    pub embed_dim: usize,
    pub embed_seed: u64,
    /// Optional pretrained embedding file; the hash embedder is used otherwise.
    pub embeddings_path: Option<String>,
    pub max_proposals: usize,
    pub vocab_min_count: usize,

    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            batch_size: 32,
            task_weights: [0.25; 4],
            lr_backbone: 1e-2,
            lr_transformer: 1e-4,
            decay_steps: vec![1200, 2400],
            decay_factor: 0.1,
            warmup_steps: 0,
            grad_accum_steps: 1,
            checkpoint_every: 0,
            seed: 0,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            d_ff: 256,
            d_word: 64,
            conv_channels: [16, 32, 64],
            max_text_len: 32,
            use_segment_embeddings: true,
            lambda: 1.0,
            tau: 1.0,
            mask_rate: 0.15,
            itm_neg_rate: 0.5,
            itm_negatives: NegativeSource::Batch,
            pra_kl_reverse: false,
            mvm_variant: MvmVariant::Omvm,
            random_mvm_rate: 0.15,
            standard_mvm_rate: 0.15,
            embed_dim: 64,
            embed_seed: 7,
            embeddings_path: None,
            max_proposals: crate::corpus::DEFAULT_MAX_PROPOSALS,
            vocab_min_count: 1,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

fn unit_rate(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_steps must be strictly increasing".into()));
        }
        if let Some(&last) = self.decay_steps.last() {
            if self.total_steps > 0 && last >= self.total_steps {
                return Err(Error::Config(format!("decay step {last} is not below total_steps {}", self.total_steps)));
            }
        }
        unit_rate("decay_factor", self.decay_factor)?;
        unit_rate("mask_rate", self.mask_rate)?;
        unit_rate("itm_neg_rate", self.itm_neg_rate)?;
        unit_rate("random_mvm_rate", self.random_mvm_rate)?;
        unit_rate("standard_mvm_rate", self.standard_mvm_rate)?;
        if self.task_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.task_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("task_weights must be non-negative with a positive sum".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!("d_model {} must be divisible by 4 for 2-D sine positions", self.d_model)));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.d_word == 0 || self.max_text_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_transformer", self.lr_transformer)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// Configuration small enough for gradient checks.
    pub fn tiny() -> Self {
        Self {
            total_steps: 10,
            batch_size: 2,
            decay_steps: vec![],
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            d_word: 12,
            conv_channels: [4, 6, 8],
            max_text_len: 12,
            embed_dim: 16,
            ..Self::default()
        }
    }
}
