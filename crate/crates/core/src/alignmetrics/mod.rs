//! Word alignment, alignment-based corpus statistics, and translation metrics.

mod aligner;
mod entropy;
mod scoring;

pub use aligner::{align_corpus, em_train_aligner, to_pharaoh, viterbi_align, AlignDirection, AlignedPair, AlignerOptions, AlignmentModel};
pub use entropy::{conditional_entropy, faithfulness, CondDistTable, EntropyReport, FaithfulnessReport};
pub use scoring::{bleu, ter, ter_edits};

use crate::corpus::ParallelCorpus;
use crate::error::Result;

/// Default floor applied to distilled distributions before the KL.
pub const FAITHFULNESS_EPS: f64 = 1e-6;

/// Trains a dedicated aligner for `direction` on `corpus` and returns its Viterbi alignments.
pub fn align_dataset(corpus: &ParallelCorpus, direction: AlignDirection, opts: &AlignerOptions) -> Result<Vec<AlignedPair>> {
    let (model, _) = em_train_aligner(corpus, direction, opts)?;
    align_corpus(&model, corpus)
}

/// Conditional entropy of `corpus` in `direction`, with its own aligner.
pub fn corpus_entropy(corpus: &ParallelCorpus, direction: AlignDirection, opts: &AlignerOptions) -> Result<EntropyReport> {
    conditional_entropy(&align_dataset(corpus, direction, opts)?, direction)
}

/// Faithfulness of `distilled` to `real` in `direction`; each corpus gets its own aligner.
pub fn corpus_faithfulness(
    real: &ParallelCorpus,
    distilled: &ParallelCorpus,
    direction: AlignDirection,
    opts: &AlignerOptions,
) -> Result<FaithfulnessReport> {
    let r = align_dataset(real, direction, opts)?;
    let d = align_dataset(distilled, direction, opts)?;
    faithfulness(&r, &d, direction, FAITHFULNESS_EPS)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::{synth_toy_bitext, ToyGenConfig};

    #[test]
    fn direction_duality() {
        let toy = synth_toy_bitext(&ToyGenConfig { size: 150, ..Default::default() }).unwrap();
        let opts = AlignerOptions::default();
        let back = corpus_entropy(&toy.corpus, AlignDirection::Backward, &opts).unwrap();
        let swapped = corpus_entropy(&toy.corpus.swapped(), AlignDirection::Forward, &opts).unwrap();
        assert_eq!(back.value, swapped.value);
        assert_eq!(back.per_word, swapped.per_word);
    }

    #[test]
    fn more_synonyms_raise_forward_entropy() {
        let opts = AlignerOptions::default();
        let c = |k| {
            let cfg = ToyGenConfig { size: 400, synonyms: k, reorder_prob: 0.0, ..Default::default() };
            corpus_entropy(&synth_toy_bitext(&cfg).unwrap().corpus, AlignDirection::Forward, &opts).unwrap().value
        };
        assert!(c(1) < c(3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn em_is_monotone_and_rows_normalized(seed in 0u64..1000, diag in any::<bool>(), p0 in 0.0f64..0.5) {
            let cfg = ToyGenConfig { size: 30, seed, src_vocab: 6, tgt_vocab: 8, synonyms: 2, ..Default::default() };
            let toy = synth_toy_bitext(&cfg).unwrap();
            let opts = AlignerOptions { iterations: 6, use_diagonal: diag, p0, ..Default::default() };
            let (model, ll) = em_train_aligner(&toy.corpus, AlignDirection::Forward, &opts).unwrap();
            for w in ll.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10, "{:?}", ll);
            }
            for &e in &toy.source_words {
                prop_assert!((model.row_sum(e) - 1.0).abs() < 1e-9);
            }
            let aligned = align_corpus(&model, &toy.corpus).unwrap();
            for (a, p) in aligned.iter().zip(toy.corpus.pairs()) {
                prop_assert_eq!(a.links.len(), p.tgt.len());
                prop_assert!(a.links.iter().flatten().all(|&i| i < p.src.len()));
            }
            let h = conditional_entropy(&aligned, AlignDirection::Forward).unwrap();
            prop_assert!(h.value >= 0.0);
            let f = faithfulness(&aligned, &aligned, AlignDirection::Forward, FAITHFULNESS_EPS).unwrap();
            prop_assert_eq!(f.value, 0.0);
        }
    }
}
