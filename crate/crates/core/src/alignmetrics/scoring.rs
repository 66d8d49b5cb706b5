//! Corpus BLEU-4 (multi-bleu conventions, no smoothing) and TER with greedy block shifts.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 100]`: clipped n-gram precisions pooled over the corpus,
/// geometric mean, brevity penalty `exp(1 - r/c)` when `c ≤ r`.
pub fn bleu<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

fn levenshtein<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const MAX_SHIFT_SIZE: usize = 10;
const MAX_SHIFT_DIST: usize = 50;

fn contains_block<T: Eq>(hay: &[T], block: &[T]) -> bool {
    hay.windows(block.len()).any(|w| w == block)
}

/// Edits for one sentence: shifts (cost 1 each) plus the edit distance after shifting.
/// The shift that lowers the edit distance the most is applied until none helps.
pub fn ter_edits<T: Eq + Clone>(hyp: &[T], reference: &[T]) -> usize {
    let mut cur = hyp.to_vec();
    let mut shifts = 0;
    loop {
        let base = levenshtein(&cur, reference);
        let mut best: Option<(usize, Vec<T>)> = None;
        for start in 0..cur.len() {
            for len in 1..=MAX_SHIFT_SIZE.min(cur.len() - start) {
                let block = &cur[start..start + len];
                if !contains_block(reference, block) {
                    break;
                }
                let rest: Vec<T> = cur[..start].iter().chain(&cur[start + len..]).cloned().collect();
                for dest in 0..=rest.len() {
                    if dest == start || dest.abs_diff(start) > MAX_SHIFT_DIST {
                        continue;
                    }
                    let cand: Vec<T> =
                        rest[..dest].iter().chain(block.iter()).chain(&rest[dest..]).cloned().collect();
                    let d = levenshtein(&cand, reference);
                    if d < base && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, cand));
                    }
                }
            }
        }
        match best {
            Some((_, cand)) => {
                cur = cand;
                shifts += 1;
            }
            None => return shifts + base,
        }
    }
}

/// Corpus TER in percent: total edits over total reference length.
pub fn ter<T: Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!("{} hypotheses vs {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(Error::Domain("TER needs nonempty references".into()));
    }
    let edits: usize = hyps.iter().zip(refs).map(|(h, r)| ter_edits(h, r)).sum();
    let words: usize = refs.iter().map(Vec::len).sum();
    Ok(100.0 * edits as f64 / words as f64)
}
