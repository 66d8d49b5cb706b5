//! Inference: beam search over any step scorer, greedy decoding, and mask-predict
//! with AR rescoring.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::loss::argmax_content;
use super::{DecodeConfig, DecoderKind, Dropout, Encoded, Seq2SeqModel, Source};
use crate::corpus::{Lang, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Segment, Tensor};

/// A generated sequence. `tokens` ends with EOS unless `truncated`; `score` is the
/// sum of `token_scores`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub token_scores: Vec<f64>,
    pub truncated: bool,
}

impl Hypothesis {
    /// Score divided by the number of scored tokens (EOS included).
    pub fn normalized(&self) -> f64 {
        if self.token_scores.is_empty() {
            0.0
        } else {
            self.score / self.token_scores.len() as f64
        }
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        if self.truncated {
            &self.tokens
        } else {
            &self.tokens[..self.tokens.len().saturating_sub(1)]
        }
    }
}

/// One line of a decode JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub utt_id: String,
    pub hyp: String,
    pub score: f64,
    pub variant: String,
    pub decoder: String,
}

/// Next-token log-probabilities for a set of `(input index, prefix)` queries; each
/// prefix starts with BOS.
pub trait StepScorer {
    fn next_log_probs(&mut self, queries: &[(usize, &[TokenId])]) -> Result<Vec<Vec<f64>>>;
}

/// Generation constraints shared by beam and greedy search.
#[derive(Clone, Copy)]
pub struct SearchSpace<'a> {
    pub bos: TokenId,
    pub eos: TokenId,
    /// Tokens that may be emitted besides EOS.
    pub allowed: &'a dyn Fn(TokenId) -> bool,
    /// Generated tokens, EOS included. A hypothesis that reaches it without EOS
    /// is returned as truncated.
    pub max_len: usize,
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    score: f64,
    token_scores: Vec<f64>,
}

impl Beam {
    fn normalized(&self) -> f64 {
        self.score / self.token_scores.len().max(1) as f64
    }

    fn hypothesis(self, truncated: bool) -> Hypothesis {
        Hypothesis { tokens: self.tokens[1..].to_vec(), score: self.score, token_scores: self.token_scores, truncated }
    }
}

fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.normalized().total_cmp(&a.normalized()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search for `n_inputs` inputs at once. Among the top `beam`
/// candidates of a step, EOS-terminated ones are retired and the rest stay live, so
/// the beam shrinks as hypotheses finish. Once `beam` hypotheses have finished, live
/// beams that cannot overtake the best of them are dropped.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, n_inputs: usize, space: SearchSpace, beam: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    let start = Beam { tokens: vec![space.bos], score: 0.0, token_scores: Vec::new() };
    let mut live: Vec<Vec<Beam>> = vec![vec![start]; n_inputs];
    let mut finished: Vec<Vec<Beam>> = vec![Vec::new(); n_inputs];
    for _ in 0..space.max_len {
        let queries: Vec<(usize, &[TokenId])> =
            live.iter().enumerate().flat_map(|(i, bs)| bs.iter().map(move |b| (i, b.tokens.as_slice()))).collect();
        if queries.is_empty() {
            break;
        }
        let scores = scorer.next_log_probs(&queries)?;
        let mut k = 0;
        let mut next_live = Vec::with_capacity(n_inputs);
        for (i, bs) in live.iter().enumerate() {
            let mut cands = Vec::new();
            for b in bs {
                for (tok, &lp) in scores[k].iter().enumerate() {
                    let tok = tok as TokenId;
                    if tok != space.eos && !(space.allowed)(tok) {
                        continue;
                    }
                    let mut nb = b.clone();
                    nb.tokens.push(tok);
                    nb.score += lp;
                    nb.token_scores.push(lp);
                    cands.push(nb);
                }
                k += 1;
            }
            cands.sort_by(rank);
            let mut keep = Vec::new();
            for c in cands.into_iter().take(beam) {
                if *c.tokens.last().expect("nonempty") == space.eos {
                    finished[i].push(c);
                } else {
                    keep.push(c);
                }
            }
            // a live beam can still win only if appending zero-cost tokens up to the
            // length cap would lift its normalized score above the best finished one
            if finished[i].len() >= beam {
                let best = finished[i].iter().map(Beam::normalized).fold(f64::NEG_INFINITY, f64::max);
                keep.retain(|b| b.score / space.max_len as f64 > best);
            }
            next_live.push(keep);
        }
        live = next_live;
    }
    if beam > 1 {
        // length normalization lets pruning discard the greedy path; keeping it as a
        // candidate guarantees beam search never scores below greedy decoding
        for (i, g) in greedy(scorer, n_inputs, space)?.into_iter().enumerate() {
            if !g.truncated {
                let mut tokens = vec![space.bos];
                tokens.extend(g.tokens);
                finished[i].push(Beam { tokens, score: g.score, token_scores: g.token_scores });
            }
        }
    }
    let outs = finished
        .into_iter()
        .zip(live)
        .map(|(mut fin, mut lv)| {
            if fin.is_empty() {
                lv.sort_by(rank);
                lv.into_iter().next().map(|b| b.hypothesis(true))
            } else {
                fin.sort_by(rank);
                fin.into_iter().next().map(|b| b.hypothesis(false))
            }
        })
        .collect::<Option<Vec<_>>>();
    outs.ok_or_else(|| Error::Config("no hypothesis survived; is the space of allowed tokens empty?".into()))
}

/// Argmax decoding, one token at a time.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, n_inputs: usize, space: SearchSpace) -> Result<Vec<Hypothesis>> {
    let mut hyps: Vec<Beam> = vec![Beam { tokens: vec![space.bos], score: 0.0, token_scores: Vec::new() }; n_inputs];
    let mut done = vec![false; n_inputs];
    for _ in 0..space.max_len {
        let open: Vec<usize> = (0..n_inputs).filter(|&i| !done[i]).collect();
        if open.is_empty() {
            break;
        }
        let queries: Vec<(usize, &[TokenId])> = open.iter().map(|&i| (i, hyps[i].tokens.as_slice())).collect();
        let scores = scorer.next_log_probs(&queries)?;
        for (&i, lps) in open.iter().zip(scores) {
            let mut best: Option<(TokenId, f64)> = None;
            for (tok, &lp) in lps.iter().enumerate() {
                let tok = tok as TokenId;
                let ok = tok == space.eos || (space.allowed)(tok);
                if ok && best.is_none_or(|(_, b)| lp > b) {
                    best = Some((tok, lp));
                }
            }
            let (tok, lp) = best.ok_or_else(|| Error::Config("no token allowed".into()))?;
            let h = &mut hyps[i];
            h.tokens.push(tok);
            h.score += lp;
            h.token_scores.push(lp);
            done[i] = tok == space.eos;
        }
    }
    Ok(hyps.into_iter().zip(done).map(|(b, d)| b.hypothesis(!d)).collect())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Encoder states computed once, reused by every decoding step.
struct Memory {
    states: Tensor,
    segs: Vec<Segment>,
}

impl Memory {
    fn new(model: &Seq2SeqModel, inputs: &[&Source]) -> Result<Self> {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, inputs, &mut Dropout::off())?;
        Ok(Self { states: g.value(enc.states).clone(), segs: enc.segs })
    }

    fn load(&self, g: &mut Graph) -> Result<Encoded> {
        Ok(Encoded { states: g.constant(self.states.clone())?, segs: self.segs.clone() })
    }
}

/// The model's AR decoder as a step scorer.
pub struct ArScorer<'m> {
    model: &'m Seq2SeqModel,
    memory: Memory,
    lang: Lang,
}

impl<'m> ArScorer<'m> {
    pub fn new(model: &'m Seq2SeqModel, inputs: &[&Source], lang: Lang) -> Result<Self> {
        Ok(Self { model, memory: Memory::new(model, inputs)?, lang })
    }
}

impl StepScorer for ArScorer<'_> {
    fn next_log_probs(&mut self, queries: &[(usize, &[TokenId])]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let enc = self.memory.load(&mut g)?;
        let enc_of: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let seqs: Vec<&[TokenId]> = queries.iter().map(|q| q.1).collect();
        let logits = self.model.decode(&mut g, DecoderKind::Ar, &enc, &enc_of, &seqs, &vec![self.lang; queries.len()], &mut Dropout::off())?;
        let t = g.value(logits);
        let mut row = 0;
        Ok(seqs
            .iter()
            .map(|s| {
                row += s.len();
                log_softmax(t.row(row - 1))
            })
            .collect())
    }
}

const DECODE_CHUNK: usize = 64;

/// Per-candidate record of one mask-predict run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPredictTrace {
    /// Candidate lengths in length-head rank order.
    pub lengths: Vec<usize>,
    /// For each candidate, the number of positions re-masked after each iteration.
    pub remask: Vec<Vec<usize>>,
    /// AR rescoring score (mean token log-prob) per candidate.
    pub ar_scores: Vec<f64>,
    /// Index of the selected candidate.
    pub chosen: usize,
}

/// Positions re-masked after iteration `t` of `T` for a length-`n` candidate.
pub fn remask_count(n: usize, t: usize, iterations: usize) -> usize {
    n * (iterations - t) / iterations
}

/// Top-`l` classes by probability, ties toward the smaller class.
pub fn top_lengths(probs: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(l);
    idx
}

impl Seq2SeqModel {
    /// Truncated outputs of the model searches keep at most `cap` tokens.
    fn clip(mut hyps: Vec<Hypothesis>, cap: usize) -> Vec<Hypothesis> {
        for h in hyps.iter_mut().filter(|h| h.truncated) {
            while h.tokens.len() > cap {
                h.tokens.pop();
                h.score -= h.token_scores.pop().unwrap_or(0.0);
            }
        }
        hyps
    }

    fn space<'a>(&self, allowed: &'a dyn Fn(TokenId) -> bool, max_len: usize) -> SearchSpace<'a> {
        SearchSpace { bos: self.cfg.specials.bos, eos: self.cfg.specials.eos, allowed, max_len: max_len.min(self.cfg.max_len) + 1 }
    }

    pub fn beam_decode(&self, inputs: &[&Source], lang: Lang, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        cfg.validate()?;
        let reserved = self.cfg.num_reserved;
        let allowed = move |t: TokenId| t as usize >= reserved;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(DECODE_CHUNK) {
            let mut s = ArScorer::new(self, chunk, lang)?;
            out.extend(beam_search(&mut s, chunk.len(), self.space(&allowed, cfg.max_len), cfg.beam)?);
        }
        Ok(Self::clip(out, cfg.max_len.min(self.cfg.max_len)))
    }

    pub fn greedy_decode(&self, inputs: &[&Source], lang: Lang, max_len: usize) -> Result<Vec<Hypothesis>> {
        let reserved = self.cfg.num_reserved;
        let allowed = move |t: TokenId| t as usize >= reserved;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(DECODE_CHUNK) {
            let mut s = ArScorer::new(self, chunk, lang)?;
            out.extend(greedy(&mut s, chunk.len(), self.space(&allowed, max_len))?);
        }
        Ok(Self::clip(out, max_len.min(self.cfg.max_len)))
    }

    /// Teacher-forced AR log-probs of `seqs[i] + EOS` given encoder segment `enc_of[i]`.
    fn ar_token_scores(&self, memory: &Memory, enc_of: &[usize], seqs: &[Vec<TokenId>], lang: Lang) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let enc = memory.load(&mut g)?;
        let bos = self.cfg.specials.bos;
        let inputs: Vec<Vec<TokenId>> = seqs.iter().map(|s| std::iter::once(bos).chain(s.iter().copied()).collect()).collect();
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.decode(&mut g, DecoderKind::Ar, &enc, enc_of, &refs, &vec![lang; seqs.len()], &mut Dropout::off())?;
        let t = g.value(logits);
        let eos = self.cfg.specials.eos;
        let mut row = 0;
        Ok(seqs
            .iter()
            .map(|s| {
                s.iter()
                    .chain(std::iter::once(&eos))
                    .map(|&tok| {
                        let lp = log_softmax(t.row(row))[tok as usize];
                        row += 1;
                        lp
                    })
                    .collect()
            })
            .collect())
    }

    pub fn mask_predict(&self, inputs: &[&Source], lang: Lang, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        Ok(self.mask_predict_traced(inputs, lang, cfg)?.into_iter().map(|(h, _)| h).collect())
    }

    /// Mask-predict: `l` length candidates from the length head; `T` rounds of
    /// parallel prediction with `floor(N·(T−t)/T)` lowest-confidence re-masks; the
    /// candidate with the best mean AR log-prob wins.
    pub fn mask_predict_traced(&self, inputs: &[&Source], lang: Lang, cfg: &DecodeConfig) -> Result<Vec<(Hypothesis, MaskPredictTrace)>> {
        cfg.validate()?;
        let max_len = cfg.max_len.min(self.cfg.max_len);
        if cfg.length_beam > max_len {
            return Err(Error::Config(format!("length beam {} exceeds max length {max_len}", cfg.length_beam)));
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(DECODE_CHUNK) {
            out.extend(self.mask_predict_chunk(chunk, lang, cfg, max_len)?);
        }
        Ok(out)
    }

    fn mask_predict_chunk(&self, inputs: &[&Source], lang: Lang, cfg: &DecodeConfig, max_len: usize) -> Result<Vec<(Hypothesis, MaskPredictTrace)>> {
        let memory = Memory::new(self, inputs)?;
        let mask = self.cfg.specials.mask;
        let n = inputs.len();
        let mut g = Graph::new();
        let enc = memory.load(&mut g)?;
        let enc_of: Vec<usize> = (0..n).collect();
        let ll = self.length_logits(&mut g, &enc, &enc_of, &vec![lang; n])?;
        let ll = g.value(ll);

        let mut lengths = Vec::with_capacity(n);
        let mut cand_enc = Vec::new();
        let mut tokens: Vec<Vec<TokenId>> = Vec::new();
        for i in 0..n {
            let probs = log_softmax(&ll.row(i)[..max_len]);
            let ls: Vec<usize> = top_lengths(&probs, cfg.length_beam).into_iter().map(|c| c + 1).collect();
            for &len in &ls {
                cand_enc.push(i);
                tokens.push(vec![mask; len]);
            }
            lengths.push(ls);
        }
        let mut conf: Vec<Vec<f64>> = tokens.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut remask: Vec<Vec<usize>> = vec![Vec::with_capacity(cfg.iterations); tokens.len()];
        for t in 1..=cfg.iterations {
            let mut g = Graph::new();
            let enc = memory.load(&mut g)?;
            let refs: Vec<&[TokenId]> = tokens.iter().map(Vec::as_slice).collect();
            let logits = self.decode(&mut g, DecoderKind::Nar, &enc, &cand_enc, &refs, &vec![lang; tokens.len()], &mut Dropout::off())?;
            let lt = g.value(logits);
            let mut row = 0;
            for (c, seq) in tokens.iter_mut().enumerate() {
                for (p, tok) in seq.iter_mut().enumerate() {
                    if *tok == mask {
                        let (best, prob) = argmax_content(self, lt, row);
                        *tok = best;
                        conf[c][p] = prob;
                    }
                    row += 1;
                }
                let k = remask_count(seq.len(), t, cfg.iterations);
                let mut order: Vec<usize> = (0..seq.len()).collect();
                order.sort_by(|&a, &b| conf[c][a].total_cmp(&conf[c][b]).then(a.cmp(&b)));
                for &p in order.iter().take(k) {
                    seq[p] = mask;
                }
                remask[c].push(k);
            }
            if tokens.iter().all(|s| !s.contains(&mask)) {
                // the schedule is non-increasing, so every later count is zero as well
                for r in remask.iter_mut() {
                    r.extend((t + 1..=cfg.iterations).map(|_| 0));
                }
                break;
            }
        }
        let scores = self.ar_token_scores(&memory, &cand_enc, &tokens, lang)?;

        let mut out = Vec::with_capacity(n);
        let mut c = 0;
        for ls in lengths {
            let span = c..c + ls.len();
            c = span.end;
            let ar_scores: Vec<f64> = scores[span.clone()].iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
            let mut chosen = 0;
            for (j, &s) in ar_scores.iter().enumerate() {
                let better = s > ar_scores[chosen] || (s == ar_scores[chosen] && ls[j] < ls[chosen]);
                if better {
                    chosen = j;
                }
            }
            let pick = span.start + chosen;
            let mut toks = tokens[pick].clone();
            toks.push(self.cfg.specials.eos);
            let token_scores = scores[pick].clone();
            let hyp = Hypothesis { tokens: toks, score: token_scores.iter().sum(), token_scores, truncated: false };
            let trace = MaskPredictTrace { lengths: ls, remask: remask[span].to_vec(), ar_scores, chosen };
            out.push((hyp, trace));
        }
        Ok(out)
    }
}
