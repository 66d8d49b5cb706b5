use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AlignDirection, AlignedPair};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Relative-frequency estimate of `p(out | in)` from Viterbi-aligned word pairs.
/// NULL-aligned words are not counted.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CondDistTable {
    counts: BTreeMap<TokenId, BTreeMap<TokenId, u64>>,
}

impl CondDistTable {
    pub fn from_alignments(aligned: &[AlignedPair]) -> Self {
        let mut counts: BTreeMap<TokenId, BTreeMap<TokenId, u64>> = BTreeMap::new();
        for a in aligned {
            for (j, link) in a.links.iter().enumerate() {
                if let Some(i) = *link {
                    *counts.entry(a.given[i]).or_default().entry(a.emitted[j]).or_default() += 1;
                }
            }
        }
        Self { counts }
    }

    pub fn conditioning_words(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.counts.keys().copied()
    }

    pub fn num_rows(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, given: TokenId, out: TokenId) -> u64 {
        self.counts.get(&given).and_then(|r| r.get(&out)).copied().unwrap_or(0)
    }

    /// Normalized row `p(· | given)`, or `None` if `given` was never observed.
    pub fn row(&self, given: TokenId) -> Option<BTreeMap<TokenId, f64>> {
        let r = self.counts.get(&given)?;
        let total: u64 = r.values().sum();
        Some(r.iter().map(|(&k, &c)| (k, c as f64 / total as f64)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub direction: AlignDirection,
    pub value: f64,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_word: BTreeMap<TokenId, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub direction: AlignDirection,
    pub value: f64,
    pub vocab_size: usize,
    /// Conditioning words of the real corpus with no row in the distilled corpus.
    pub missing_rows: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_word: BTreeMap<TokenId, f64>,
}

fn check_direction(aligned: &[AlignedPair], direction: AlignDirection) -> Result<()> {
    if aligned.is_empty() {
        return Err(Error::Config("aligned corpus is empty".into()));
    }
    if let Some(a) = aligned.iter().find(|a| a.direction != direction) {
        return Err(Error::Config(format!(
            "alignments are {:?} but {:?} was requested",
            a.direction, direction
        )));
    }
    Ok(())
}

/// Mean conditional entropy (nats) over the observed conditioning vocabulary.
pub fn conditional_entropy(aligned: &[AlignedPair], direction: AlignDirection) -> Result<EntropyReport> {
    check_direction(aligned, direction)?;
    let table = CondDistTable::from_alignments(aligned);
    let per_word: BTreeMap<TokenId, f64> = table
        .conditioning_words()
        .map(|w| {
            let row = table.row(w).expect("observed row");
            let h: f64 = row.values().map(|&p| -p * p.ln()).sum();
            (w, h.max(0.0))
        })
        .collect();
    let vocab_size = per_word.len();
    let value = if vocab_size == 0 { 0.0 } else { per_word.values().sum::<f64>() / vocab_size as f64 };
    Ok(EntropyReport { direction, value, vocab_size, per_word })
}

/// Mean over the real corpus's conditioning words of `KL(p_r || p_d)`, where `p_d` is
/// floored at `eps` over the union support and renormalized. A conditioning word the
/// distilled corpus never produced is scored against an all-`eps` row.
pub fn faithfulness(
    real: &[AlignedPair],
    distilled: &[AlignedPair],
    direction: AlignDirection,
    eps: f64,
) -> Result<FaithfulnessReport> {
    check_direction(real, direction)?;
    check_direction(distilled, direction)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("smoothing floor {eps} outside (0, 1)")));
    }
    let pr = CondDistTable::from_alignments(real);
    let pd = CondDistTable::from_alignments(distilled);
    let mut missing_rows = 0;
    let mut per_word = BTreeMap::new();
    for w in pr.conditioning_words() {
        let r = pr.row(w).expect("observed row");
        let kl = match pd.row(w) {
            Some(d) => {
                let mut support: Vec<TokenId> = r.keys().chain(d.keys()).copied().collect();
                support.sort_unstable();
                support.dedup();
                let z: f64 = support.iter().map(|k| d.get(k).copied().unwrap_or(0.0).max(eps)).sum();
                r.iter().map(|(k, &p)| p * (p / (d.get(k).copied().unwrap_or(0.0).max(eps) / z)).ln()).sum::<f64>()
            }
            None => {
                missing_rows += 1;
                r.values().map(|&p| p * (p / eps).ln()).sum::<f64>()
            }
        };
        per_word.insert(w, kl.max(0.0));
    }
    let vocab_size = per_word.len();
    let value = if vocab_size == 0 { 0.0 } else { per_word.values().sum::<f64>() / vocab_size as f64 };
    Ok(FaithfulnessReport { direction, value, vocab_size, missing_rows, per_word })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(given: &[TokenId], emitted: &[TokenId], links: &[Option<usize>]) -> AlignedPair {
        AlignedPair {
            given: given.to_vec(),
            emitted: emitted.to_vec(),
            links: links.to_vec(),
            direction: AlignDirection::Forward,
        }
    }

    #[test]
    fn deterministic_rows_have_zero_entropy() {
        let a = vec![pair(&[1, 2], &[10, 11], &[Some(0), Some(1)]), pair(&[1], &[10], &[Some(0)])];
        let r = conditional_entropy(&a, AlignDirection::Forward).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.vocab_size, 2);
    }

    #[test]
    fn even_split_is_ln2() {
        let a = vec![pair(&[1], &[10], &[Some(0)]), pair(&[1], &[11], &[Some(0)])];
        let r = conditional_entropy(&a, AlignDirection::Forward).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn null_links_are_not_counted() {
        let a = vec![pair(&[1], &[10, 11], &[Some(0), None])];
        let t = CondDistTable::from_alignments(&a);
        assert_eq!(t.count(1, 11), 0);
        assert_eq!(conditional_entropy(&a, AlignDirection::Forward).unwrap().value, 0.0);
    }

    #[test]
    fn direction_mismatch_is_rejected() {
        let a = vec![pair(&[1], &[10], &[Some(0)])];
        assert!(matches!(conditional_entropy(&a, AlignDirection::Backward), Err(Error::Config(_))));
        assert!(matches!(faithfulness(&a, &a, AlignDirection::Backward, 1e-6), Err(Error::Config(_))));
    }

    #[test]
    fn self_faithfulness_is_zero() {
        let a = vec![pair(&[1, 2], &[10, 11], &[Some(0), Some(1)]), pair(&[1], &[12], &[Some(0)])];
        let f = faithfulness(&a, &a, AlignDirection::Forward, 1e-6).unwrap();
        assert_eq!(f.value, 0.0);
        assert_eq!(f.missing_rows, 0);
    }

    #[test]
    fn kl_against_near_deterministic_row() {
        // p_r = (1/2, 1/2); p_d = (1 - 1e-6, 1e-6) built from 999999:1 counts
        let eps = 1e-6;
        let real = vec![pair(&[1], &[10], &[Some(0)]), pair(&[1], &[11], &[Some(0)])];
        let mut distilled = vec![pair(&[1], &[11], &[Some(0)])];
        distilled.push(pair(&vec![1; 999_999], &vec![10; 999_999], &(0..999_999).map(Some).collect::<Vec<_>>()));
        let f = faithfulness(&real, &distilled, AlignDirection::Forward, eps).unwrap();
        let oracle = 0.5 * (0.5 / (1.0 - eps)).ln() + 0.5 * (0.5 / eps).ln();
        assert!((oracle - 6.214).abs() < 1e-3);
        assert!((f.value - oracle).abs() < 1e-9, "{} vs {oracle}", f.value);
    }

    #[test]
    fn missing_rows_are_counted() {
        let real = vec![pair(&[1, 2], &[10, 11], &[Some(0), Some(1)])];
        let distilled = vec![pair(&[1], &[10], &[Some(0)])];
        let f = faithfulness(&real, &distilled, AlignDirection::Forward, 1e-6).unwrap();
        assert_eq!(f.missing_rows, 1);
        assert!((f.per_word[&2] - (1e6f64).ln()).abs() < 1e-9);
        assert_eq!(f.per_word[&1], 0.0);
    }
}
