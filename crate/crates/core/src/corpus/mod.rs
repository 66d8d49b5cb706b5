//! Corpus data model: vocabularies, bitext, pseudo-speech features and the
//! speech-translation triplet datasets together with their file formats.

mod io;
mod speech;
mod toy;
mod vocab;

pub use io::{
    load_st_dataset, read_parallel_tsv, read_st_tsv, save_st_dataset, sidecar_path, write_parallel_tsv,
    write_st_tsv, StTextRow,
};
pub use speech::{synth_pseudo_speech, SpeechConfig, SpeechSynth};
pub use toy::{synth_toy_bitext, ToyBitext, ToyGenConfig};
pub use vocab::{build_partitioned_vocab, build_vocab, Special, SpecialIds, Vocabulary};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Language of a text side; doubles as the decoder's language-embedding selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Src,
    Tgt,
}

impl Lang {
    pub const ALL: [Lang; 2] = [Lang::Src, Lang::Tgt];

    pub fn tag(self) -> &'static str {
        match self {
            Lang::Src => "<src>",
            Lang::Tgt => "<tgt>",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Lang::Src => 0,
            Lang::Tgt => 1,
        }
    }

    pub fn other(self) -> Lang {
        match self {
            Lang::Src => Lang::Tgt,
            Lang::Tgt => Lang::Src,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenScheme {
    Whitespace,
    Char,
}

/// Space marker standing in for whitespace runs under [`TokenScheme::Char`].
pub const CHAR_SPACE: &str = "▁";

pub fn tokenize(text: &str, scheme: TokenScheme) -> Result<Vec<String>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(match scheme {
        TokenScheme::Whitespace => words.into_iter().map(String::from).collect(),
        TokenScheme::Char => {
            let mut out = Vec::new();
            for (i, w) in words.iter().enumerate() {
                if i > 0 {
                    out.push(CHAR_SPACE.to_string());
                }
                out.extend(w.chars().map(|c| c.to_string()));
            }
            out
        }
    })
}

pub fn detokenize(tokens: &[String], scheme: TokenScheme) -> String {
    match scheme {
        TokenScheme::Whitespace => tokens.join(" "),
        TokenScheme::Char => tokens.iter().map(|t| if t == CHAR_SPACE { " " } else { t.as_str() }).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

/// Text bitext; both sides of every pair are nonempty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    pub src_lang: Lang,
    pub tgt_lang: Lang,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, src_lang: Lang, tgt_lang: Lang) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|p| p.src.is_empty() || p.tgt.is_empty()) {
            return Err(Error::Config(format!("pair {i} has an empty side")));
        }
        Ok(Self { pairs, src_lang, tgt_lang })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same pairs with the two sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(|p| SentencePair { src: p.tgt.clone(), tgt: p.src.clone() }).collect(),
            src_lang: self.tgt_lang,
            tgt_lang: self.src_lang,
        }
    }
}

/// A `[num_frames × feat_dim]` matrix of finite features, stored as `f32` so that the
/// sidecar format round-trips exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeq {
    num_frames: usize,
    feat_dim: usize,
    data: Vec<f32>,
}

impl FeatureSeq {
    pub fn new(num_frames: usize, feat_dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_frames == 0 || feat_dim == 0 {
            return Err(Error::Shape("feature sequence needs at least one frame and one dimension".into()));
        }
        if data.len() != num_frames * feat_dim {
            return Err(Error::Shape(format!(
                "{num_frames}x{feat_dim} features need {} values, got {}",
                num_frames * feat_dim,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(Self { num_frames, feat_dim, data })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.feat_dim..(t + 1) * self.feat_dim]
    }
}

/// Which corpus a dataset (or one item of a concatenated dataset) came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Real,
    Fwd,
    Bwd,
    Bidir,
    Combined(Vec<Variant>),
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Real => f.write_str("real"),
            Variant::Fwd => f.write_str("fwd"),
            Variant::Bwd => f.write_str("bwd"),
            Variant::Bidir => f.write_str("bidir"),
            Variant::Combined(parts) => {
                f.write_str("combined:")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str("+")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "real" => Variant::Real,
            "fwd" => Variant::Fwd,
            "bwd" => Variant::Bwd,
            "bidir" => Variant::Bidir,
            _ => match s.strip_prefix("combined:") {
                Some(rest) => Variant::Combined(rest.split('+').map(str::parse).collect::<Result<_>>()?),
                None => return Err(Error::Config(format!("unknown dataset variant `{s}`"))),
            },
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StItem {
    pub utt_id: String,
    pub speech: FeatureSeq,
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    /// Parent dataset for items of a concatenated dataset.
    pub parent: Option<Variant>,
    /// Set when a generated side was degenerate and replaced by a lone EOS.
    pub flagged: bool,
}

/// Triplet dataset `(speech, source text, target text)` with its provenance tag.
#[derive(Clone, Debug, PartialEq)]
pub struct StDataset {
    pub items: Vec<StItem>,
    pub variant: Variant,
    pub src_lang: Lang,
    pub tgt_lang: Lang,
}

impl StDataset {
    pub fn new(items: Vec<StItem>, variant: Variant) -> Result<Self> {
        if let Some(it) = items.iter().find(|it| it.src.is_empty() || it.tgt.is_empty()) {
            return Err(Error::Config(format!("item {} has an empty text side", it.utt_id)));
        }
        Ok(Self { items, variant, src_lang: Lang::Src, tgt_lang: Lang::Tgt })
    }

    /// Pairs each bitext entry with synthesized speech; utterance ids are assigned in order.
    pub fn from_bitext(corpus: &ParallelCorpus, synth: &SpeechSynth, seed: u64) -> Result<Self> {
        let items = corpus
            .pairs()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let speech_tokens: Vec<TokenId> =
                    p.src.iter().copied().filter(|&t| !synth.is_silent(t)).collect();
                Ok(StItem {
                    utt_id: format!("utt{i:05}"),
                    speech: synth.synth(&speech_tokens, seed.wrapping_add(i as u64))?,
                    src: p.src.clone(),
                    tgt: p.tgt.clone(),
                    parent: None,
                    flagged: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Self::new(items, Variant::Real)?;
        ds.src_lang = corpus.src_lang;
        ds.tgt_lang = corpus.tgt_lang;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn utt_ids(&self) -> Vec<&str> {
        self.items.iter().map(|it| it.utt_id.as_str()).collect()
    }

    /// The text bitext `(src, tgt)` of this dataset.
    pub fn mt_view(&self) -> Result<ParallelCorpus> {
        ParallelCorpus::new(
            self.items.iter().map(|it| SentencePair { src: it.src.clone(), tgt: it.tgt.clone() }).collect(),
            self.src_lang,
            self.tgt_lang,
        )
    }

    /// ASR projection: speech paired with source text, dropping tokens rejected by `keep`.
    pub fn asr_view(&self, keep: impl Fn(TokenId) -> bool) -> Vec<(&FeatureSeq, Vec<TokenId>)> {
        self.items
            .iter()
            .map(|it| (&it.speech, it.src.iter().copied().filter(|&t| keep(t)).collect::<Vec<_>>()))
            .filter(|(_, s)| !s.is_empty())
            .collect()
    }

    /// Keeps the items whose utterance id satisfies `pred`.
    pub fn filter(&self, pred: impl Fn(&str) -> bool) -> StDataset {
        StDataset {
            items: self.items.iter().filter(|it| pred(&it.utt_id)).cloned().collect(),
            variant: self.variant.clone(),
            src_lang: self.src_lang,
            tgt_lang: self.tgt_lang,
        }
    }
}
