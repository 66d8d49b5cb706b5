//! Training objectives. AR models: `total = st + λ_src·src`. NAR models:
//! `st = cmlm + λ_ar·ar + λ_lp·lp` and `total = st + λ_src·src`, with the source
//! term a CMLM loss through the NAR decoder.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecoderKind, Dropout, Encoded, LossBreakdown, Seq2SeqModel, Source};
use crate::corpus::{Lang, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// One training sample. `primary` is in the model's target language, `auxiliary`
/// in the other language; at least one must be present.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input: &'a Source,
    pub primary: Option<&'a [TokenId]>,
    pub auxiliary: Option<&'a [TokenId]>,
}

/// Per-step randomness and regularization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCtx {
    pub dropout: f64,
    pub smoothing: f64,
    pub seed: u64,
    pub step: u64,
}

impl StepCtx {
    pub fn eval() -> Self {
        Self { dropout: 0.0, smoothing: 0.0, seed: 0, step: 0 }
    }

    fn drop(&self, branch: u64) -> Dropout {
        Dropout::train(self.dropout, self.seed, self.step, branch)
    }

    fn rng(&self, branch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d61_736b);
        rng.set_stream(self.step.wrapping_mul(32).wrapping_add(branch));
        rng
    }
}

// Dropout and masking streams; each branch draws from its own stream so that
// enabling one term never perturbs the randomness of another.
const BR_ENC: u64 = 0;
const BR_PRIMARY: u64 = 1;
const BR_AUX: u64 = 2;
const BR_NAR: u64 = 3;
const BR_MASK: u64 = 4;
const BR_SMART_OFFSET: u64 = 16;
const BR_NAR_AUX: u64 = 6;
const BR_MASK_AUX: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NarWeights {
    pub ar: f64,
    pub lp: f64,
    pub src: f64,
}

fn check_batch(model: &Seq2SeqModel, batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    for ex in batch {
        if ex.primary.is_none() && ex.auxiliary.is_none() {
            return Err(Error::Config("example has neither target".into()));
        }
        for t in ex.primary.iter().chain(ex.auxiliary.iter()) {
            if t.is_empty() {
                return Err(Error::Config("empty target sequence".into()));
            }
            if t.len() > model.cfg.max_len {
                return Err(Error::Length { len: t.len(), max: model.cfg.max_len });
            }
        }
    }
    Ok(())
}

fn targets_of<'a>(batch: &[Example<'a>], aux: bool) -> Vec<(usize, &'a [TokenId])> {
    batch
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| if aux { ex.auxiliary } else { ex.primary }.map(|t| (i, t)))
        .collect()
}

fn weighted(g: &mut Graph, acc: Var, term: Var, w: f64) -> Result<Var> {
    let s = g.scale(term, w)?;
    Ok(g.add(acc, s)?)
}

/// Teacher-forced AR cross entropy over `items` (encoder index, target), mean per token.
pub fn ar_cross_entropy(
    model: &Seq2SeqModel,
    g: &mut Graph,
    enc: &Encoded,
    items: &[(usize, &[TokenId])],
    lang: Lang,
    smoothing: f64,
    drop: &mut Dropout,
) -> Result<Var> {
    let sp = model.cfg.specials;
    let inputs: Vec<Vec<TokenId>> = items.iter().map(|(_, t)| std::iter::once(sp.bos).chain(t.iter().copied()).collect()).collect();
    let mut targets = Vec::new();
    for (_, t) in items {
        targets.extend(t.iter().map(|&x| Some(x as usize)));
        targets.push(Some(sp.eos as usize));
    }
    let seqs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let enc_of: Vec<usize> = items.iter().map(|(i, _)| *i).collect();
    let logits = model.decode(g, DecoderKind::Ar, enc, &enc_of, &seqs, &vec![lang; items.len()], drop)?;
    Ok(g.cross_entropy(logits, &targets, smoothing)?)
}

/// Joint objective for the AR decoder. With `lambda_src == 0` the
/// auxiliary branch is not built at all.
pub fn ar_joint_loss(
    model: &Seq2SeqModel,
    g: &mut Graph,
    batch: &[Example],
    lambda_src: f64,
    ctx: &StepCtx,
) -> Result<(Var, LossBreakdown)> {
    check_batch(model, batch)?;
    let main = model.cfg.target_lang;
    let inputs: Vec<&Source> = batch.iter().map(|e| e.input).collect();
    let enc = model.encode(g, &inputs, &mut ctx.drop(BR_ENC))?;
    let prim = targets_of(batch, false);
    let st = if prim.is_empty() {
        g.constant(Tensor::scalar(0.0))?
    } else {
        ar_cross_entropy(model, g, &enc, &prim, main, ctx.smoothing, &mut ctx.drop(BR_PRIMARY))?
    };
    let mut out = LossBreakdown { st: g.value(st).item(), ..Default::default() };
    let aux = targets_of(batch, true);
    let total = if lambda_src > 0.0 && !aux.is_empty() {
        let src = ar_cross_entropy(model, g, &enc, &aux, main.other(), ctx.smoothing, &mut ctx.drop(BR_AUX))?;
        out.src = g.value(src).item();
        weighted(g, st, src, lambda_src)?
    } else {
        st
    };
    out.total = g.value(total).item();
    Ok((total, out))
}

struct Masked {
    inputs: Vec<Vec<TokenId>>,
    targets: Vec<Option<usize>>,
}

/// Masks `k ~ U[1, n]` uniformly chosen positions of each sequence.
fn mask_uniform(items: &[(usize, &[TokenId])], mask: TokenId, rng: &mut ChaCha8Rng) -> Masked {
    let mut inputs = Vec::with_capacity(items.len());
    let mut targets = Vec::new();
    for (_, t) in items {
        let n = t.len();
        let k = rng.random_range(1..=n);
        let mut masked = vec![false; n];
        for p in sample(rng, n, k) {
            masked[p] = true;
        }
        inputs.push(t.iter().zip(&masked).map(|(&x, &m)| if m { mask } else { x }).collect());
        targets.extend(t.iter().zip(&masked).map(|(&x, &m)| m.then_some(x as usize)));
    }
    Masked { inputs, targets }
}

fn nar_logits(model: &Seq2SeqModel, g: &mut Graph, enc: &Encoded, items: &[(usize, &[TokenId])], seqs: &[Vec<TokenId>], lang: Lang, drop: &mut Dropout) -> Result<Var> {
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let enc_of: Vec<usize> = items.iter().map(|(i, _)| *i).collect();
    model.decode(g, DecoderKind::Nar, enc, &enc_of, &refs, &vec![lang; items.len()], drop)
}

/// Best content token per row of `logits`.
pub(crate) fn argmax_content(model: &Seq2SeqModel, logits: &Tensor, row: usize) -> (TokenId, f64) {
    let r = logits.row(row);
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
    let mut best = (model.cfg.num_reserved, f64::NEG_INFINITY);
    for (c, &v) in r.iter().enumerate().skip(model.cfg.num_reserved) {
        if v > best.1 {
            best = (c, v);
        }
    }
    (best.0 as TokenId, (best.1 - max).exp() / z)
}

/// CMLM loss, optionally with the refinement pass: the first pass fills its masked
/// positions with its own argmax (no gradient), that sequence is masked afresh, and
/// the second pass is trained to recover the gold tokens at every position.
#[allow(clippy::too_many_arguments)]
fn cmlm_loss(
    model: &Seq2SeqModel,
    g: &mut Graph,
    enc: &Encoded,
    batch: &[Example],
    items: &[(usize, &[TokenId])],
    lang: Lang,
    smart: bool,
    ctx: &StepCtx,
    branches: (u64, u64),
) -> Result<Var> {
    let mask = model.cfg.specials.mask;
    let mut rng = ctx.rng(branches.1);
    let first = mask_uniform(items, mask, &mut rng);
    if !smart {
        let logits = nar_logits(model, g, enc, items, &first.inputs, lang, &mut ctx.drop(branches.0))?;
        return Ok(g.cross_entropy(logits, &first.targets, ctx.smoothing)?);
    }
    let mut scratch = Graph::new();
    let inputs: Vec<&Source> = batch.iter().map(|e| e.input).collect();
    let enc0 = model.encode(&mut scratch, &inputs, &mut Dropout::off())?;
    let l0 = nar_logits(model, &mut scratch, &enc0, items, &first.inputs, lang, &mut Dropout::off())?;
    let l0 = scratch.value(l0);
    let mut row = 0;
    let mut filled = Vec::with_capacity(items.len());
    for seq in &first.inputs {
        let mut s = seq.clone();
        for tok in s.iter_mut() {
            if *tok == mask {
                *tok = argmax_content(model, l0, row).0;
            }
            row += 1;
        }
        filled.push(s);
    }
    let filled_items: Vec<(usize, &[TokenId])> = items.iter().zip(&filled).map(|((i, _), f)| (*i, f.as_slice())).collect();
    let second = mask_uniform(&filled_items, mask, &mut rng);
    let targets: Vec<Option<usize>> = items.iter().flat_map(|(_, t)| t.iter().map(|&x| Some(x as usize))).collect();
    let logits = nar_logits(model, g, enc, items, &second.inputs, lang, &mut ctx.drop(branches.0 + BR_SMART_OFFSET))?;
    Ok(g.cross_entropy(logits, &targets, ctx.smoothing)?)
}

/// NAR objective plus the auxiliary source-language CMLM term.
/// Terms with zero weight are skipped and reported as zero.
pub fn nar_joint_loss(
    model: &Seq2SeqModel,
    g: &mut Graph,
    batch: &[Example],
    w: NarWeights,
    smart: bool,
    ctx: &StepCtx,
) -> Result<(Var, LossBreakdown)> {
    check_batch(model, batch)?;
    if !model.has_nar() {
        return Err(Error::Config("NAR loss needs a model with the CMLM decoder".into()));
    }
    let main = model.cfg.target_lang;
    let inputs: Vec<&Source> = batch.iter().map(|e| e.input).collect();
    let enc = model.encode(g, &inputs, &mut ctx.drop(BR_ENC))?;
    let mut out = LossBreakdown::default();
    let prim = targets_of(batch, false);
    let st = if prim.is_empty() {
        g.constant(Tensor::scalar(0.0))?
    } else {
        let cmlm = cmlm_loss(model, g, &enc, batch, &prim, main, smart, ctx, (BR_NAR, BR_MASK))?;
        out.cmlm = g.value(cmlm).item();
        let mut st = cmlm;
        if w.ar > 0.0 {
            let ar = ar_cross_entropy(model, g, &enc, &prim, main, ctx.smoothing, &mut ctx.drop(BR_PRIMARY))?;
            out.ar = g.value(ar).item();
            st = weighted(g, st, ar, w.ar)?;
        }
        if w.lp > 0.0 {
            let enc_of: Vec<usize> = prim.iter().map(|(i, _)| *i).collect();
            let logits = model.length_logits(g, &enc, &enc_of, &vec![main; prim.len()])?;
            let targets: Vec<Option<usize>> = prim.iter().map(|(_, t)| Some(t.len() - 1)).collect();
            let lp = g.cross_entropy(logits, &targets, 0.0)?;
            out.lp = g.value(lp).item();
            st = weighted(g, st, lp, w.lp)?;
        }
        st
    };
    out.st = g.value(st).item();
    let aux = targets_of(batch, true);
    let total = if w.src > 0.0 && !aux.is_empty() {
        let src = cmlm_loss(model, g, &enc, batch, &aux, main.other(), smart, ctx, (BR_NAR_AUX, BR_MASK_AUX))?;
        out.src = g.value(src).item();
        weighted(g, st, src, w.src)?
    } else {
        st
    };
    out.total = g.value(total).item();
    Ok((total, out))
}
