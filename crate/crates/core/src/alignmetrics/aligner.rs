//! Reparameterized IBM Model 2 aligner (fast_align family) trained with EM.
//!
//! For a target word at 1-based position `j` of `m`, source position `i` of `n`:
//!
//! ```text
//! p(a_j = NULL) = p0
//! p(a_j = i)    = (1 - p0) · h(i) / Σ_i' h(i'),   h(i) = exp(-λ · |i/n - j/m|)
//! p(f_j | a_j)  = t(f_j | e_{a_j})                 (NULL has its own row)
//! ```
//!
//! With the diagonal term disabled `h ≡ 1`, which is IBM Model 1 with a null word.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, TokenId};
use crate::error::{Error, Result};

/// Direction of conditioning. `Forward` models target words given source words;
/// `Backward` models source words given target words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignDirection {
    Forward,
    Backward,
}

impl AlignDirection {
    pub fn arrow(self) -> &'static str {
        match self {
            AlignDirection::Forward => "→",
            AlignDirection::Backward => "←",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignerOptions {
    pub iterations: usize,
    pub use_diagonal: bool,
    pub diagonal_tension: f64,
    pub p0: f64,
}

impl Default for AlignerOptions {
    fn default() -> Self {
        Self { iterations: 5, use_diagonal: true, diagonal_tension: 4.0, p0: 0.08 }
    }
}

impl AlignerOptions {
    pub fn model1(iterations: usize, p0: f64) -> Self {
        Self { iterations, use_diagonal: false, diagonal_tension: 0.0, p0 }
    }
}

const NULL_WORD: TokenId = TokenId::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    /// `t(f | e)` keyed by `(e, f)`; `e == NULL_WORD` is the null row.
    table: BTreeMap<(TokenId, TokenId), f64>,
    pub diagonal_tension: f64,
    pub use_diagonal: bool,
    pub p0: f64,
    pub direction: AlignDirection,
}

/// One sentence pair with, for every position of the emitted side, the index of
/// the conditioning-side word it aligns to (`None` = NULL).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedPair {
    pub given: Vec<TokenId>,
    pub emitted: Vec<TokenId>,
    pub links: Vec<Option<usize>>,
    pub direction: AlignDirection,
}

fn orient(corpus: &ParallelCorpus, direction: AlignDirection) -> Vec<(&[TokenId], &[TokenId])> {
    corpus
        .pairs()
        .iter()
        .map(|p| match direction {
            AlignDirection::Forward => (p.src.as_slice(), p.tgt.as_slice()),
            AlignDirection::Backward => (p.tgt.as_slice(), p.src.as_slice()),
        })
        .collect()
}

impl AlignmentModel {
    pub fn t(&self, f: TokenId, e: TokenId) -> f64 {
        self.table.get(&(e, f)).copied().unwrap_or(0.0)
    }

    pub fn t_null(&self, f: TokenId) -> f64 {
        self.t(f, NULL_WORD)
    }

    /// Sum of `t(· | e)`; 1 for every conditioning word seen in training.
    pub fn row_sum(&self, e: TokenId) -> f64 {
        self.table.iter().filter(|((ee, _), _)| *ee == e).map(|(_, v)| v).sum()
    }

    fn diag(&self, i: usize, n: usize, j: usize, m: usize) -> f64 {
        if !self.use_diagonal {
            return 1.0;
        }
        let d = ((i + 1) as f64 / n as f64 - (j + 1) as f64 / m as f64).abs();
        (-self.diagonal_tension * d).exp()
    }

    /// Unnormalized alignment scores for emitted position `j`: `(null, per-source)`.
    fn scores(&self, given: &[TokenId], emitted: &[TokenId], j: usize, out: &mut Vec<f64>) -> f64 {
        let (n, m) = (given.len(), emitted.len());
        let f = emitted[j];
        out.clear();
        let mut z = 0.0;
        for i in 0..n {
            let h = self.diag(i, n, j, m);
            z += h;
            out.push(h);
        }
        for (i, s) in out.iter_mut().enumerate() {
            *s = (1.0 - self.p0) * (*s / z) * self.t(f, given[i]);
        }
        self.p0 * self.t_null(f)
    }

    /// Corpus log-likelihood under the current parameters.
    pub fn log_likelihood(&self, corpus: &ParallelCorpus) -> f64 {
        let mut buf = Vec::new();
        let mut ll = 0.0;
        for (given, emitted) in orient(corpus, self.direction) {
            for j in 0..emitted.len() {
                let null = self.scores(given, emitted, j, &mut buf);
                ll += (null + buf.iter().sum::<f64>()).ln();
            }
        }
        ll
    }
}

/// Runs `opts.iterations` EM iterations from a flat lexical table. Returns the model and
/// the log-likelihood evaluated at the start of every iteration followed by the final one.
pub fn em_train_aligner(
    corpus: &ParallelCorpus,
    direction: AlignDirection,
    opts: &AlignerOptions,
) -> Result<(AlignmentModel, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot train an aligner on an empty corpus".into()));
    }
    if opts.iterations < 1 {
        return Err(Error::Config("aligner needs at least one EM iteration".into()));
    }
    if !(0.0..1.0).contains(&opts.p0) || opts.diagonal_tension < 0.0 {
        return Err(Error::Config("aligner needs 0 <= p0 < 1 and tension >= 0".into()));
    }
    let pairs = orient(corpus, direction);
    let mut emitted_types: Vec<TokenId> = pairs.iter().flat_map(|(_, f)| f.iter().copied()).collect();
    emitted_types.sort_unstable();
    emitted_types.dedup();
    let flat = 1.0 / emitted_types.len() as f64;

    let mut table = BTreeMap::new();
    for (given, emitted) in &pairs {
        for &f in emitted.iter() {
            for &e in given.iter() {
                table.insert((e, f), flat);
            }
            if opts.p0 > 0.0 {
                table.insert((NULL_WORD, f), flat);
            }
        }
    }
    let mut model = AlignmentModel {
        table,
        diagonal_tension: opts.diagonal_tension,
        use_diagonal: opts.use_diagonal,
        p0: opts.p0,
        direction,
    };

    let mut history = Vec::with_capacity(opts.iterations + 1);
    let mut buf = Vec::new();
    for _ in 0..opts.iterations {
        let mut counts: BTreeMap<(TokenId, TokenId), f64> = BTreeMap::new();
        let mut ll = 0.0;
        for (given, emitted) in &pairs {
            for j in 0..emitted.len() {
                let f = emitted[j];
                let null = model.scores(given, emitted, j, &mut buf);
                let total = null + buf.iter().sum::<f64>();
                ll += total.ln();
                if null > 0.0 {
                    *counts.entry((NULL_WORD, f)).or_default() += null / total;
                }
                for (i, &s) in buf.iter().enumerate() {
                    if s > 0.0 {
                        *counts.entry((given[i], f)).or_default() += s / total;
                    }
                }
            }
        }
        history.push(ll);
        let mut row_totals: BTreeMap<TokenId, f64> = BTreeMap::new();
        for (&(e, _), &c) in &counts {
            *row_totals.entry(e).or_default() += c;
        }
        model.table = counts.into_iter().map(|((e, f), c)| ((e, f), c / row_totals[&e])).collect();
    }
    history.push(model.log_likelihood(corpus));
    Ok((model, history))
}

/// Per emitted word, the best-scoring conditioning position. Ties prefer the position
/// closest to the diagonal, then the lower index; NULL wins only when strictly better.
pub fn viterbi_align(model: &AlignmentModel, given: &[TokenId], emitted: &[TokenId]) -> Result<AlignedPair> {
    if given.is_empty() || emitted.is_empty() {
        return Err(Error::Config("cannot align an empty sentence".into()));
    }
    let (n, m) = (given.len(), emitted.len());
    let mut buf = Vec::new();
    let links = (0..m)
        .map(|j| {
            let null = model.scores(given, emitted, j, &mut buf);
            let mut best: Option<(usize, f64, f64)> = None;
            for (i, &s) in buf.iter().enumerate() {
                let dist = ((i + 1) as f64 / n as f64 - (j + 1) as f64 / m as f64).abs();
                let better = match best {
                    None => true,
                    Some((_, bs, bd)) => s > bs || (s == bs && dist < bd),
                };
                if better {
                    best = Some((i, s, dist));
                }
            }
            match best {
                Some((i, s, _)) if s >= null && s > 0.0 => Some(i),
                Some((i, s, _)) if null <= 0.0 && s <= 0.0 => Some(i),
                _ => None,
            }
        })
        .collect();
    Ok(AlignedPair { given: given.to_vec(), emitted: emitted.to_vec(), links, direction: model.direction })
}

pub fn align_corpus(model: &AlignmentModel, corpus: &ParallelCorpus) -> Result<Vec<AlignedPair>> {
    orient(corpus, model.direction).into_iter().map(|(g, e)| viterbi_align(model, g, e)).collect()
}

/// Pharaoh lines `i-j` (conditioning index, emitted index), both 0-based; NULL links omitted.
pub fn to_pharaoh(aligned: &[AlignedPair]) -> String {
    let mut out = String::new();
    for a in aligned {
        let mut first = true;
        for (j, link) in a.links.iter().enumerate() {
            if let Some(i) = link {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{i}-{j}");
            }
        }
        out.push('\n');
    }
    out
}
