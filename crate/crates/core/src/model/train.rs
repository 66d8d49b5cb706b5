use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{ar_cross_entropy, ar_joint_loss, nar_joint_loss, Example, NarWeights, StepCtx};
use super::{DecodeConfig, DecoderKind, Dropout, InputMode, LossBreakdown, Seq2SeqModel, Source, TrainConfig, TransformerConfig};
use crate::alignmetrics::bleu;
use crate::corpus::{FeatureSeq, Lang, ParallelCorpus, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Graph, NoamSchedule, ParamStore};

/// Owned training sample; see [`Example`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Source,
    pub primary: Option<Vec<TokenId>>,
    pub auxiliary: Option<Vec<TokenId>>,
}

impl Sample {
    pub fn new(input: Source, primary: Vec<TokenId>) -> Self {
        Self { input, primary: Some(primary), auxiliary: None }
    }

    pub fn example(&self) -> Example<'_> {
        Example { input: &self.input, primary: self.primary.as_deref(), auxiliary: self.auxiliary.as_deref() }
    }
}

/// Which loss a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross entropy of the primary target only, no auxiliary machinery.
    Plain,
    /// AR joint objective with the given source-language weight.
    Joint { lambda_src: f64 },
    /// CMLM objective with AR and length auxiliaries.
    Nar { lambda_ar: f64, lambda_lp: f64, lambda_src: f64, smart: bool },
}

impl Objective {
    /// The objective a config implies for a model: NAR if it has the CMLM decoder.
    pub fn for_model(model: &Seq2SeqModel, cfg: &TrainConfig) -> Self {
        if model.has_nar() {
            Objective::Nar { lambda_ar: cfg.lambda_ar, lambda_lp: cfg.lambda_lp, lambda_src: cfg.lambda_src, smart: cfg.smart }
        } else {
            Objective::Joint { lambda_src: cfg.lambda_src }
        }
    }
}

/// Cross entropy of the primary targets alone.
pub fn st_loss(model: &Seq2SeqModel, g: &mut Graph, batch: &[Example], ctx: &StepCtx) -> Result<(crate::tensor::Var, LossBreakdown)> {
    let items: Vec<(usize, &[TokenId])> = batch.iter().enumerate().filter_map(|(i, e)| e.primary.map(|t| (i, t))).collect();
    if items.is_empty() {
        return Err(Error::Config("plain objective needs primary targets".into()));
    }
    if let Some((_, t)) = items.iter().find(|(_, t)| t.len() > model.cfg.max_len || t.is_empty()) {
        return Err(Error::Length { len: t.len(), max: model.cfg.max_len });
    }
    let inputs: Vec<&Source> = batch.iter().map(|e| e.input).collect();
    let enc = model.encode(g, &inputs, &mut Dropout::train(ctx.dropout, ctx.seed, ctx.step, 0))?;
    let mut drop = Dropout::train(ctx.dropout, ctx.seed, ctx.step, 1);
    let loss = ar_cross_entropy(model, g, &enc, &items, model.cfg.target_lang, ctx.smoothing, &mut drop)?;
    let v = g.value(loss).item();
    Ok((loss, LossBreakdown { total: v, st: v, ..Default::default() }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMetric {
    /// Corpus BLEU of decoded primary targets.
    Bleu,
    /// Teacher-forced token accuracy of the AR decoder.
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub dev_metric: Option<f64>,
    pub last_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub step_losses: Vec<LossBreakdown>,
    /// Epochs whose snapshots were averaged into the final parameters.
    pub averaged_epochs: Vec<usize>,
}

pub struct TrainOptions {
    pub objective: Objective,
    pub metric: ValidationMetric,
    /// Decoding used for BLEU validation (greedy AR, or mask-predict for NAR models).
    pub dev_decode: DecodeConfig,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: u64,
}

impl TrainOptions {
    pub fn new(objective: Objective, metric: ValidationMetric) -> Self {
        Self { objective, metric, dev_decode: DecodeConfig { iterations: 4, length_beam: 3, ..Default::default() }, max_steps: 0 }
    }
}

fn add_into(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.total += l.total;
    acc.st += l.st;
    acc.src += l.src;
    acc.cmlm += l.cmlm;
    acc.ar += l.ar;
    acc.lp += l.lp;
}

fn scale_by(l: &mut LossBreakdown, f: f64) {
    for v in [&mut l.total, &mut l.st, &mut l.src, &mut l.cmlm, &mut l.ar, &mut l.lp] {
        *v *= f;
    }
}

/// Teacher-forced AR token accuracy on the primary targets (EOS included).
pub fn token_accuracy(model: &Seq2SeqModel, data: &[Sample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in data.chunks(64) {
        let items: Vec<(usize, &[TokenId])> = chunk.iter().enumerate().filter_map(|(i, s)| s.primary.as_deref().map(|t| (i, t))).collect();
        if items.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let inputs: Vec<&Source> = chunk.iter().map(|s| &s.input).collect();
        let enc = model.encode(&mut g, &inputs, &mut Dropout::off())?;
        let sp = model.cfg.specials;
        let seqs: Vec<Vec<TokenId>> = items.iter().map(|(_, t)| std::iter::once(sp.bos).chain(t.iter().copied()).collect()).collect();
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let enc_of: Vec<usize> = items.iter().map(|(i, _)| *i).collect();
        let lang = model.cfg.target_lang;
        let logits = model.decode(&mut g, DecoderKind::Ar, &enc, &enc_of, &refs, &vec![lang; items.len()], &mut Dropout::off())?;
        let t = g.value(logits);
        let mut row = 0;
        for (_, tgt) in &items {
            for &want in tgt.iter().chain(std::iter::once(&sp.eos)) {
                let r = t.row(row);
                let arg = r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
                hit += usize::from(arg == want as usize);
                total += 1;
                row += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Corpus BLEU of decoded primary outputs against the primary references.
pub fn dev_bleu(model: &Seq2SeqModel, data: &[Sample], decode: &DecodeConfig) -> Result<f64> {
    let scored: Vec<&Sample> = data.iter().filter(|s| s.primary.is_some()).collect();
    if scored.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<&Source> = scored.iter().map(|s| &s.input).collect();
    let lang = model.cfg.target_lang;
    let hyps = if model.has_nar() {
        model.mask_predict(&inputs, lang, decode)?
    } else {
        model.greedy_decode(&inputs, lang, decode.max_len)?
    };
    let hyps: Vec<Vec<TokenId>> = hyps.iter().map(|h| h.content().to_vec()).collect();
    let refs: Vec<Vec<TokenId>> = scored.iter().map(|s| s.primary.clone().expect("filtered")).collect();
    bleu(&hyps, &refs)
}

fn evaluate(model: &Seq2SeqModel, dev: &[Sample], opts: &TrainOptions) -> Result<Option<f64>> {
    if dev.is_empty() {
        return Ok(None);
    }
    Ok(Some(match opts.metric {
        ValidationMetric::Bleu => dev_bleu(model, dev, &opts.dev_decode)?,
        ValidationMetric::Accuracy => token_accuracy(model, dev)?,
    }))
}

/// One optimization run: Adam with a Noam schedule, label smoothing, dropout,
/// gradient clipping, per-epoch validation, and averaging of the best `keep_best`
/// epoch snapshots into the returned parameters.
pub fn train(model: &mut Seq2SeqModel, data: &[Sample], dev: &[Sample], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let noam = NoamSchedule::new(cfg.lr_factor, cfg.warmup, model.cfg.d_model)?;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut report = TrainReport::default();
    let mut best: Vec<(f64, usize, ParamStore)> = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step: u64 = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].example()).collect();
            let ctx = StepCtx { dropout: model.cfg.dropout, smoothing: cfg.label_smoothing, seed: cfg.seed, step };
            let mut g = Graph::new();
            let (loss, br) = match opts.objective {
                Objective::Plain => st_loss(model, &mut g, &batch, &ctx)?,
                Objective::Joint { lambda_src } => ar_joint_loss(model, &mut g, &batch, lambda_src, &ctx)?,
                Objective::Nar { lambda_ar, lambda_lp, lambda_src, smart } => {
                    nar_joint_loss(model, &mut g, &batch, NarWeights { ar: lambda_ar, lp: lambda_lp, src: lambda_src }, smart, &ctx)?
                }
            };
            let mut grads = g.backward(loss)?;
            drop(g);
            if cfg.clip_norm > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            step += 1;
            lr = noam.lr(step)?;
            adam.step(&mut model.params, &grads, lr)?;
            add_into(&mut sum, &br);
            report.step_losses.push(br);
            batches += 1;
            if opts.max_steps > 0 && step >= opts.max_steps {
                scale_by(&mut sum, 1.0 / batches as f64);
                let dev_metric = evaluate(model, dev, opts)?;
                report.epochs.push(EpochLog { epoch, mean_loss: sum, dev_metric, last_lr: lr });
                keep(&mut best, dev_metric, epoch, &model.params, cfg.keep_best);
                break 'epochs;
            }
        }
        scale_by(&mut sum, 1.0 / batches.max(1) as f64);
        let dev_metric = evaluate(model, dev, opts)?;
        log::debug!("epoch {epoch}: loss {:.4} dev {:?}", sum.total, dev_metric);
        report.epochs.push(EpochLog { epoch, mean_loss: sum, dev_metric, last_lr: lr });
        keep(&mut best, dev_metric, epoch, &model.params, cfg.keep_best);
    }
    let stores: Vec<&ParamStore> = best.iter().map(|(_, _, p)| p).collect();
    model.params = ParamStore::average(&stores)?;
    report.averaged_epochs = best.iter().map(|(_, e, _)| *e).collect();
    report.averaged_epochs.sort_unstable();
    Ok(report)
}

/// Keeps the `k` best snapshots; without a metric the most recent ones win, and
/// ties go to the later epoch.
fn keep(best: &mut Vec<(f64, usize, ParamStore)>, metric: Option<f64>, epoch: usize, params: &ParamStore, k: usize) {
    best.push((metric.unwrap_or(epoch as f64), epoch, params.clone()));
    best.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    best.truncate(k);
}

/// Which way a text model translates a bitext.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MtDirection {
    /// Source to target.
    Forward,
    /// Target to source; identical to a forward model on the swapped bitext.
    Backward,
}

/// Text samples `(src -> primary tgt)` of a bitext.
pub fn mt_samples(corpus: &ParallelCorpus) -> Vec<Sample> {
    corpus.pairs().iter().map(|p| Sample::new(Source::Tokens(p.src.clone()), p.tgt.clone())).collect()
}

/// Trains a text translation model, validating by greedy BLEU on `dev`.
pub fn train_mt(
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    direction: MtDirection,
    mut cfg: TransformerConfig,
    tc: &TrainConfig,
) -> Result<(Seq2SeqModel, TrainReport)> {
    let orient = |c: &ParallelCorpus| match direction {
        MtDirection::Forward => c.clone(),
        MtDirection::Backward => c.swapped(),
    };
    let data = orient(corpus);
    if cfg.input != InputMode::Text {
        return Err(Error::Config("MT models take text input".into()));
    }
    cfg.target_lang = data.tgt_lang;
    let mut model = Seq2SeqModel::init(cfg, tc.seed)?;
    let dev = dev.map(|d| mt_samples(&orient(d))).unwrap_or_default();
    let opts = TrainOptions::new(Objective::Plain, ValidationMetric::Bleu);
    let report = train(&mut model, &mt_samples(&data), &dev, tc, &opts)?;
    Ok((model, report))
}

/// Trains a feature-input model to emit transcriptions, validating by token accuracy.
pub fn pretrain_asr(
    data: &[(FeatureSeq, Vec<TokenId>)],
    dev: &[(FeatureSeq, Vec<TokenId>)],
    mut cfg: TransformerConfig,
    tc: &TrainConfig,
) -> Result<(Seq2SeqModel, TrainReport)> {
    if !matches!(cfg.input, InputMode::Features { .. }) {
        return Err(Error::Config("ASR pre-training needs feature input".into()));
    }
    cfg.target_lang = Lang::Src;
    cfg.nar = false;
    let to_samples =
        |d: &[(FeatureSeq, Vec<TokenId>)]| d.iter().map(|(f, t)| Sample::new(Source::Features(f.clone()), t.clone())).collect::<Vec<_>>();
    let mut model = Seq2SeqModel::init(cfg, tc.seed)?;
    let opts = TrainOptions::new(Objective::Plain, ValidationMetric::Accuracy);
    let report = train(&mut model, &to_samples(data), &to_samples(dev), tc, &opts)?;
    Ok((model, report))
}
