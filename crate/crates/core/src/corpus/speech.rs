use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureSeq, TokenId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeechConfig {
    pub feat_dim: usize,
    /// Inclusive frame-repeat range per token.
    pub repeat_min: usize,
    pub repeat_max: usize,
    /// Standard deviation of the additive Gaussian frame noise.
    pub noise: f64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self { feat_dim: 16, repeat_min: 1, repeat_max: 3, noise: 0.1 }
    }
}

/// Fixed random per-token embeddings used to render token sequences as frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechSynth {
    pub cfg: SpeechConfig,
    table: Vec<Vec<f32>>,
    silent: Vec<TokenId>,
}

impl SpeechSynth {
    pub fn new(vocab_size: usize, cfg: SpeechConfig, seed: u64) -> Result<Self> {
        if cfg.feat_dim == 0 || cfg.repeat_min == 0 || cfg.repeat_min > cfg.repeat_max {
            return Err(Error::Config("speech config needs feat_dim >= 1 and 1 <= repeat_min <= repeat_max".into()));
        }
        if !cfg.noise.is_finite() || cfg.noise < 0.0 {
            return Err(Error::Config("speech noise must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let table = (0..vocab_size)
            .map(|_| (0..cfg.feat_dim).map(|_| normal.sample(&mut rng) as f32).collect())
            .collect();
        Ok(Self { cfg, table, silent: Vec::new() })
    }

    /// Tokens that produce no frames (e.g. the casing marker).
    pub fn with_silent(mut self, ids: impl IntoIterator<Item = TokenId>) -> Self {
        self.silent.extend(ids);
        self
    }

    pub fn is_silent(&self, id: TokenId) -> bool {
        self.silent.contains(&id)
    }

    pub fn table(&self) -> &[Vec<f32>] {
        &self.table
    }

    pub fn synth(&self, tokens: &[TokenId], seed: u64) -> Result<FeatureSeq> {
        synth_pseudo_speech(tokens, &self.table, (self.cfg.repeat_min, self.cfg.repeat_max), self.cfg.noise, seed)
    }
}

/// Renders each token as `r ∈ [lo, hi]` copies of its embedding row plus `N(0, σ²)` noise.
pub fn synth_pseudo_speech(
    tokens: &[TokenId],
    table: &[Vec<f32>],
    repeat: (usize, usize),
    noise: f64,
    seed: u64,
) -> Result<FeatureSeq> {
    let feat_dim = table.first().map(Vec::len).ok_or_else(|| Error::Config("empty embedding table".into()))?;
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut data = Vec::new();
    let mut frames = 0;
    for &t in tokens {
        let row = table.get(t as usize).ok_or_else(|| Error::UnknownToken(format!("id {t}")))?;
        let r = rng.random_range(repeat.0..=repeat.1);
        for _ in 0..r {
            for &v in row {
                let n = if noise > 0.0 { noise * normal.sample(&mut rng) } else { 0.0 };
                data.push((v as f64 + n) as f32);
            }
            frames += 1;
        }
    }
    FeatureSeq::new(frames, feat_dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(noise: f64, lo: usize, hi: usize) -> SpeechSynth {
        SpeechSynth::new(12, SpeechConfig { feat_dim: 4, repeat_min: lo, repeat_max: hi, noise }, 3).unwrap()
    }

    #[test]
    fn fixed_repeat_without_noise() {
        let s = synth(0.0, 2, 2);
        let f = s.synth(&[3, 4, 5], 1).unwrap();
        assert_eq!(f.num_frames(), 6);
        assert_eq!(f.frame(0), f.frame(1));
        assert_ne!(f.frame(1), f.frame(2));
    }

    #[test]
    fn identity_case_reproduces_rows() {
        let s = synth(0.0, 1, 1);
        let f = s.synth(&[7, 2], 1).unwrap();
        assert_eq!(f.frame(0), &s.table()[7][..]);
        assert_eq!(f.frame(1), &s.table()[2][..]);
    }

    #[test]
    fn noisy_frames_average_to_embedding() {
        // Monte-Carlo: mean of n noisy copies sits within 3σ/√n of the row
        let (sigma, n) = (0.1, 400);
        let s = synth(sigma, n, n);
        let f = s.synth(&[5], 11).unwrap();
        for d in 0..4 {
            let mean: f64 = (0..n).map(|t| f.frame(t)[d] as f64).sum::<f64>() / n as f64;
            assert!((mean - s.table()[5][d] as f64).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn deterministic_and_errors() {
        let s = synth(0.3, 1, 3);
        assert_eq!(s.synth(&[1, 2, 3], 5).unwrap(), s.synth(&[1, 2, 3], 5).unwrap());
        assert!(matches!(s.synth(&[99], 5), Err(Error::UnknownToken(_))));
        let f = s.synth(&[1, 2, 3, 4], 8).unwrap();
        assert!((4..=12).contains(&f.num_frames()));
    }
}
