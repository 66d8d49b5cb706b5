//! Distilled dataset builders: forward and backward sequence-level distillation,
//! their bidirectional combination, two-reference concatenation, and quality
//! reports of regenerated text against the originals.

use serde::{Deserialize, Serialize};

use crate::alignmetrics::{bleu, ter};
use crate::corpus::{Lang, StDataset, StItem, TokenId, Variant};
use crate::error::{Error, Result};
use crate::model::{DecodeConfig, Seq2SeqModel, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub beam: usize,
    /// Output cap in tokens, EOS excluded.
    pub max_len: usize,
    /// Variants to build; `bidir` implies `fwd` and `bwd`.
    pub variants: Vec<Variant>,
    /// Recorded in manifests; beam search itself is deterministic.
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { beam: 4, max_len: 32, variants: vec![Variant::Fwd, Variant::Bwd, Variant::Bidir], seed: 0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("distillation needs beam >= 1 and max_len >= 1".into()));
        }
        if let Some(v) = self.variants.iter().find(|v| !matches!(v, Variant::Fwd | Variant::Bwd | Variant::Bidir)) {
            return Err(Error::Config(format!("cannot generate variant {v}")));
        }
        Ok(())
    }

    pub fn wants(&self, v: &Variant) -> bool {
        self.variants.contains(v) || (matches!(v, Variant::Fwd | Variant::Bwd) && self.variants.contains(&Variant::Bidir))
    }
}

/// Rewrites token sequences of one language into the other.
pub trait TextGenerator {
    fn generate(&self, inputs: &[&[TokenId]]) -> Result<Vec<Vec<TokenId>>>;
    /// Identifies the generator in manifests.
    fn fingerprint(&self) -> Result<String>;
}

/// Beam search with a text-mode model toward its target language.
pub struct BeamGenerator<'m> {
    pub model: &'m Seq2SeqModel,
    pub beam: usize,
    pub max_len: usize,
}

impl TextGenerator for BeamGenerator<'_> {
    fn generate(&self, inputs: &[&[TokenId]]) -> Result<Vec<Vec<TokenId>>> {
        let srcs: Vec<Source> = inputs.iter().map(|t| Source::Tokens(t.to_vec())).collect();
        let refs: Vec<&Source> = srcs.iter().collect();
        let cfg = DecodeConfig { beam: self.beam, max_len: self.max_len, ..Default::default() };
        let hyps = self.model.beam_decode(&refs, self.model.cfg.target_lang, &cfg)?;
        Ok(hyps.into_iter().map(|h| h.content().to_vec()).collect())
    }

    fn fingerprint(&self) -> Result<String> {
        self.model.checksum()
    }
}

/// Provenance record written next to a distilled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillManifest {
    pub variant: Variant,
    /// Fingerprints of the generators involved (forward first for bidirectional data).
    pub generators: Vec<String>,
    pub beam: usize,
    pub max_len: usize,
    pub seed: u64,
    pub items: usize,
    /// Utterances whose generated side was empty and replaced by a lone EOS.
    pub flagged: Vec<String>,
    /// Parent variants for concatenated datasets, in item order blocks.
    pub parents: Vec<Variant>,
}

impl DistillManifest {
    pub fn for_dataset(ds: &StDataset, generators: Vec<String>, cfg: &DistillConfig) -> Self {
        let parents = match &ds.variant {
            Variant::Combined(p) => p.clone(),
            _ => Vec::new(),
        };
        Self {
            variant: ds.variant.clone(),
            generators,
            beam: cfg.beam,
            max_len: cfg.max_len,
            seed: cfg.seed,
            items: ds.len(),
            flagged: ds.items.iter().filter(|it| it.flagged).map(|it| it.utt_id.clone()).collect(),
            parents,
        }
    }
}

fn regenerate(gen: &dyn TextGenerator, ds: &StDataset, side: Lang, eos: TokenId, variant: Variant) -> Result<StDataset> {
    let pick = |it: &StItem| if side == Lang::Tgt { it.src.clone() } else { it.tgt.clone() };
    let inputs: Vec<Vec<TokenId>> = ds.items.iter().map(pick).collect();
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let outs = gen.generate(&refs)?;
    if outs.len() != ds.len() {
        return Err(Error::Alignment(format!("generator returned {} outputs for {} inputs", outs.len(), ds.len())));
    }
    let items = ds
        .items
        .iter()
        .zip(outs)
        .map(|(it, out)| {
            let flagged = out.is_empty();
            let text = if flagged { vec![eos] } else { out };
            let mut n = StItem { parent: None, flagged: it.flagged || flagged, ..it.clone() };
            match side {
                Lang::Tgt => n.tgt = text,
                Lang::Src => n.src = text,
            }
            n
        })
        .collect();
    Ok(StDataset { items, variant, src_lang: ds.src_lang, tgt_lang: ds.tgt_lang })
}

/// Replaces every translation with the forward model's output on the transcription.
pub fn forward_seqkd(gen: &dyn TextGenerator, ds: &StDataset, eos: TokenId) -> Result<StDataset> {
    regenerate(gen, ds, Lang::Tgt, eos, Variant::Fwd)
}

/// Replaces every transcription with the backward model's paraphrase of the translation.
pub fn backward_seqkd(gen: &dyn TextGenerator, ds: &StDataset, eos: TokenId) -> Result<StDataset> {
    regenerate(gen, ds, Lang::Src, eos, Variant::Bwd)
}

fn check_same_utts(a: &StDataset, b: &StDataset, ordered: bool) -> Result<()> {
    let (mut ia, mut ib) = (a.utt_ids(), b.utt_ids());
    if !ordered {
        ia.sort_unstable();
        ib.sort_unstable();
    }
    if ia != ib {
        let at = ia.iter().zip(&ib).position(|(x, y)| x != y).unwrap_or(ia.len().min(ib.len()));
        return Err(Error::Alignment(format!(
            "utterance sets differ ({} vs {} items, first mismatch at position {at})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `(X, Ŷs, Ŷt)`: paraphrased transcriptions from `bwd`, translations from `fwd`.
pub fn make_bidir(fwd: &StDataset, bwd: &StDataset) -> Result<StDataset> {
    check_same_utts(fwd, bwd, true)?;
    let items = fwd
        .items
        .iter()
        .zip(&bwd.items)
        .map(|(f, b)| StItem { src: b.src.clone(), flagged: f.flagged || b.flagged, parent: None, ..f.clone() })
        .collect();
    Ok(StDataset { items, variant: Variant::Bidir, src_lang: fwd.src_lang, tgt_lang: fwd.tgt_lang })
}

/// Every item of `a` followed by every item of `b`, each tagged with its parent.
pub fn concat_2ref(a: &StDataset, b: &StDataset) -> Result<StDataset> {
    check_same_utts(a, b, false)?;
    let mut items = Vec::with_capacity(a.len() + b.len());
    for ds in [a, b] {
        items.extend(ds.items.iter().map(|it| StItem { parent: Some(it.parent.clone().unwrap_or_else(|| ds.variant.clone())), ..it.clone() }));
    }
    Ok(StDataset {
        items,
        variant: Variant::Combined(vec![a.variant.clone(), b.variant.clone()]),
        src_lang: a.src_lang,
        tgt_lang: a.tgt_lang,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub side: Lang,
    pub bleu: f64,
    pub ter: f64,
    /// Fraction of items whose regenerated side equals the original exactly.
    pub exact_match: f64,
}

/// BLEU/TER of one text side of `distilled` against the same side of `real`.
/// On the source side this is the paraphrase quality of backward distillation.
pub fn quality_report(real: &StDataset, distilled: &StDataset, side: Lang) -> Result<QualityReport> {
    check_same_utts(real, distilled, true)?;
    let text = |it: &StItem| if side == Lang::Src { it.src.clone() } else { it.tgt.clone() };
    let refs: Vec<Vec<TokenId>> = real.items.iter().map(text).collect();
    let hyps: Vec<Vec<TokenId>> = distilled.items.iter().map(text).collect();
    let same = refs.iter().zip(&hyps).filter(|(r, h)| r == h).count();
    Ok(QualityReport { side, bleu: bleu(&hyps, &refs)?, ter: ter(&hyps, &refs)?, exact_match: same as f64 / refs.len() as f64 })
}

/// Paraphrase quality: regenerated transcriptions against the originals.
pub fn paraphrase_report(real: &StDataset, bwd: &StDataset) -> Result<QualityReport> {
    quality_report(real, bwd, Lang::Src)
}
