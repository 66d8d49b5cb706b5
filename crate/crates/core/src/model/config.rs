use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, SpecialIds, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputMode {
    /// Token ids through the shared embedding table.
    Text,
    /// Frame features through two stride-2 convolution blocks (kernel 3).
    Features { feat_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub input: InputMode,
    pub vocab_size: usize,
    /// Maximum output length in tokens (excluding EOS); also the number of length classes.
    pub max_len: usize,
    /// Build the CMLM decoder and the length head.
    pub nar: bool,
    /// Language the model generates by default; the other one is the auxiliary target.
    pub target_lang: Lang,
    pub specials: SpecialIds,
    /// Ids below this bound are specials and language tags.
    pub num_reserved: usize,
}

impl TransformerConfig {
    /// 2/2 layers, d=64, ff=256, 4 heads.
    pub fn desk(vocab: &Vocabulary, input: InputMode, target_lang: Lang) -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            dropout: 0.1,
            input,
            vocab_size: vocab.len(),
            max_len: 32,
            nar: false,
            target_lang,
            specials: vocab.specials(),
            num_reserved: vocab.num_reserved(),
        }
    }

    /// Full-size layout: 12 encoder and 6 decoder layers, d=256, ff=2048, 4 heads.
    pub fn full(vocab: &Vocabulary, input: InputMode, target_lang: Lang) -> Self {
        Self { enc_layers: 12, dec_layers: 6, d_model: 256, d_ff: 2048, heads: 4, ..Self::desk(vocab, input, target_lang) }
    }

    /// Small layout for minute-scale experiment matrices on one core.
    pub fn toy(vocab: &Vocabulary, input: InputMode, target_lang: Lang) -> Self {
        Self { enc_layers: 1, dec_layers: 1, d_model: 32, d_ff: 64, heads: 2, max_len: 12, ..Self::desk(vocab, input, target_lang) }
    }

    pub fn with_nar(mut self, nar: bool) -> Self {
        self.nar = nar;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.enc_layers < 1 || self.dec_layers < 1 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.vocab_size < 2 {
            return bad("d_ff, max_len and vocab size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let InputMode::Features { feat_dim: 0 } = self.input {
            return bad("feature dimension must be positive".into());
        }
        if self.num_reserved > self.vocab_size {
            return bad("reserved ids exceed the vocabulary".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the auxiliary source-language loss.
    pub lambda_src: f64,
    /// Weight of the auxiliary AR decoder loss (NAR models).
    pub lambda_ar: f64,
    /// Weight of the length-prediction loss (NAR models).
    pub lambda_lp: f64,
    /// Refine CMLM training with a pass conditioned on the model's own predictions.
    pub smart: bool,
    pub adam: AdamConfig,
    pub lr_factor: f64,
    pub warmup: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Checkpoints kept (best by validation metric) and averaged at the end.
    pub keep_best: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_src: 0.3,
            lambda_ar: 0.3,
            lambda_lp: 0.1,
            smart: false,
            adam: AdamConfig::default(),
            lr_factor: 1.0,
            warmup: 400,
            epochs: 20,
            batch_size: 32,
            label_smoothing: 0.1,
            clip_norm: 5.0,
            keep_best: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_src", self.lambda_src), ("lambda_ar", self.lambda_ar), ("lambda_lp", self.lambda_lp)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.keep_best == 0 || self.warmup == 0 {
            return Err(Error::Config("epochs, batch size, keep_best and warmup must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(self.lr_factor > 0.0) || self.clip_norm < 0.0 {
            return Err(Error::Config("invalid smoothing, learning-rate factor or clip norm".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Mask-predict iterations `T`.
    pub iterations: usize,
    /// Mask-predict length candidates `l`.
    pub length_beam: usize,
    /// Output cap in tokens, EOS excluded; clipped to the model's `max_len`.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 4, iterations: 10, length_beam: 9, max_len: 32 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.iterations == 0 || self.length_beam == 0 || self.max_len == 0 {
            return Err(Error::Config("beam, iterations, length beam and max_len must be >= 1".into()));
        }
        if self.length_beam.is_multiple_of(2) {
            return Err(Error::Config(format!("length beam {} must be odd", self.length_beam)));
        }
        Ok(())
    }
}

/// Loss terms of one step. Entries a mode does not use stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub st: f64,
    pub src: f64,
    pub cmlm: f64,
    pub ar: f64,
    pub lp: f64,
}
