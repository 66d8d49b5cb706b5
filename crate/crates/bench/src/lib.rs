//! Benchmark fixtures shared by the criterion targets.

use seqkd_core::corpus::{synth_toy_bitext, Lang, ToyBitext, ToyGenConfig};
use seqkd_core::model::{InputMode, Seq2SeqModel, Source};
use seqkd_core::pipeline::ModelSection;

/// Toy bitext of `size` pairs with the default generator settings.
pub fn bitext(size: usize) -> ToyBitext {
    synth_toy_bitext(&ToyGenConfig { size, ..Default::default() }).expect("toy bitext")
}

/// Untrained text-input model over the bitext vocabulary.
pub fn text_model(b: &ToyBitext, nar: bool) -> Seq2SeqModel {
    let cfg = ModelSection::default().build(&b.vocab, InputMode::Text, Lang::Tgt).with_nar(nar);
    Seq2SeqModel::init(cfg, 1).expect("model init")
}

/// Source sides of the first `n` pairs.
pub fn sources(b: &ToyBitext, n: usize) -> Vec<Source> {
    b.corpus.pairs().iter().take(n).map(|p| Source::Tokens(p.src.clone())).collect()
}
