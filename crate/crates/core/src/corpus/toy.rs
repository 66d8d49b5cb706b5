use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_partitioned_vocab, Lang, ParallelCorpus, SentencePair, Special, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Synthetic bitext whose translation ambiguity is set by the synonym fan-out and
/// the reordering rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyGenConfig {
    /// Number of source word types.
    pub src_vocab: usize,
    /// Number of target word types. Fewer than `src_vocab · synonyms` makes target
    /// words shared between source words, so the backward direction is ambiguous too.
    pub tgt_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Interchangeable target words per source word (`k`).
    pub synonyms: usize,
    /// Zipf exponent over a word's synonyms; 0 picks them uniformly.
    pub synonym_skew: f64,
    /// Probability of swapping an adjacent target pair.
    pub reorder_prob: f64,
    /// Corpus size `I`.
    pub size: usize,
    /// Prefix source sentences with a casing marker that ASR pre-training strips.
    pub case_marker: bool,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            src_vocab: 24,
            tgt_vocab: 36,
            min_len: 3,
            max_len: 7,
            synonyms: 3,
            synonym_skew: 0.0,
            reorder_prob: 0.1,
            size: 2000,
            case_marker: false,
            seed: 0,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.synonyms < 1 {
            return bad("synonym fan-out must be at least 1");
        }
        if self.synonyms > self.tgt_vocab {
            return bad("synonym fan-out exceeds the target vocabulary");
        }
        if !(0.0..=1.0).contains(&self.reorder_prob) {
            return bad("reorder probability must lie in [0, 1]");
        }
        if self.size < 1 {
            return bad("corpus size must be at least 1");
        }
        if self.src_vocab < 1 || self.min_len < 1 || self.min_len > self.max_len {
            return bad("need src_vocab >= 1 and 1 <= min_len <= max_len");
        }
        if !self.synonym_skew.is_finite() || self.synonym_skew < 0.0 {
            return bad("synonym skew must be finite and non-negative");
        }
        Ok(())
    }
}

pub const CASE_MARKER: &str = "^";

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBitext {
    pub vocab: Vocabulary,
    pub corpus: ParallelCorpus,
    /// For every source word id (by position in `source_words`), its target synonyms.
    pub lexicon: Vec<Vec<TokenId>>,
    pub source_words: Vec<TokenId>,
    pub case_marker: Option<TokenId>,
}

fn src_word(i: usize) -> String {
    format!("s{i}")
}

fn tgt_word(i: usize) -> String {
    format!("t{i}")
}

pub fn synth_toy_bitext(cfg: &ToyGenConfig) -> Result<ToyBitext> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let src_words: Vec<Vec<String>> = vec![(0..cfg.src_vocab)
        .map(src_word)
        .chain(cfg.case_marker.then(|| CASE_MARKER.to_string()))
        .collect()];
    let tgt_words: Vec<Vec<String>> = vec![(0..cfg.tgt_vocab).map(tgt_word).collect()];
    let vocab = build_partitioned_vocab(
        &[(Some(Lang::Src), &src_words), (Some(Lang::Tgt), &tgt_words)],
        &Special::ALL,
        &Lang::ALL,
    )?;
    let sid = |i: usize| vocab.id(&src_word(i)).expect("source word registered");
    let tid = |i: usize| vocab.id(&tgt_word(i)).expect("target word registered");

    let lexicon: Vec<Vec<TokenId>> = (0..cfg.src_vocab)
        .map(|_| sample(&mut rng, cfg.tgt_vocab, cfg.synonyms).into_iter().map(tid).collect())
        .collect();
    let weights: Vec<f64> = (0..cfg.synonyms).map(|r| ((r + 1) as f64).powf(-cfg.synonym_skew)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut pairs = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let src_types: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.src_vocab)).collect();
        let mut tgt: Vec<TokenId> = src_types
            .iter()
            .map(|&s| {
                let syn = &lexicon[s];
                if syn.len() == 1 {
                    return syn[0];
                }
                let mut u = rng.random::<f64>() * wsum;
                for (w, &t) in weights.iter().zip(syn) {
                    if u < *w {
                        return t;
                    }
                    u -= w;
                }
                *syn.last().expect("nonempty synonym list")
            })
            .collect();
        if cfg.reorder_prob > 0.0 {
            let mut i = 0;
            while i + 1 < tgt.len() {
                if rng.random::<f64>() < cfg.reorder_prob {
                    tgt.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        let mut src: Vec<TokenId> = src_types.into_iter().map(sid).collect();
        if cfg.case_marker {
            src.insert(0, vocab.id(CASE_MARKER).expect("marker registered"));
        }
        pairs.push(SentencePair { src, tgt });
    }

    let case_marker = cfg.case_marker.then(|| vocab.id(CASE_MARKER).expect("marker registered"));
    Ok(ToyBitext {
        corpus: ParallelCorpus::new(pairs, Lang::Src, Lang::Tgt)?,
        source_words: (0..cfg.src_vocab).map(sid).collect(),
        lexicon,
        vocab,
        case_marker,
    })
}
