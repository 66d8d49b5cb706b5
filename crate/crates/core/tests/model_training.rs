use seqkd_core::corpus::{synth_toy_bitext, Lang, SpeechConfig, SpeechSynth, StDataset, ToyGenConfig, TokenId};
use seqkd_core::model::{
    pretrain_asr, train, train_mt, InputMode, MtDirection, Objective, Sample, Seq2SeqModel, Source, TrainConfig, TrainOptions,
    TransformerConfig, ValidationMetric,
};

fn greedy_token_accuracy(model: &Seq2SeqModel, inputs: &[Source], refs: &[Vec<TokenId>], lang: Lang) -> f64 {
    let refs_in: Vec<&Source> = inputs.iter().collect();
    let hyps = model.greedy_decode(&refs_in, lang, model.cfg.max_len).unwrap();
    let (mut hit, mut total) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = h.content();
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    hit as f64 / total as f64
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, warmup: 100, lr_factor: 0.5, keep_best: 1, seed, ..Default::default() }
}

#[test]
fn deterministic_mt_reaches_near_perfect_accuracy() {
    let toy = synth_toy_bitext(&ToyGenConfig { synonyms: 1, reorder_prob: 0.0, size: 300, seed: 1, ..Default::default() }).unwrap();
    let cfg = TransformerConfig::toy(&toy.vocab, InputMode::Text, Lang::Tgt);
    let (m, report) = train_mt(&toy.corpus, None, MtDirection::Forward, cfg, &quick(60, 1)).unwrap();
    assert_eq!(report.epochs.len(), 60);
    let inputs: Vec<Source> = toy.corpus.pairs().iter().map(|p| Source::Tokens(p.src.clone())).collect();
    let refs: Vec<Vec<TokenId>> = toy.corpus.pairs().iter().map(|p| p.tgt.clone()).collect();
    let acc = greedy_token_accuracy(&m, &inputs, &refs, Lang::Tgt);
    assert!(acc >= 0.99, "greedy token accuracy {acc}");
}

#[test]
fn backward_model_is_forward_model_on_swapped_bitext() {
    let toy = synth_toy_bitext(&ToyGenConfig { size: 40, seed: 2, ..Default::default() }).unwrap();
    let cfg = TransformerConfig::toy(&toy.vocab, InputMode::Text, Lang::Tgt);
    let (bwd, rb) = train_mt(&toy.corpus, None, MtDirection::Backward, cfg.clone(), &quick(2, 3)).unwrap();
    let (fwd, rf) = train_mt(&toy.corpus.swapped(), None, MtDirection::Forward, cfg, &quick(2, 3)).unwrap();
    assert_eq!(bwd.cfg.target_lang, Lang::Src);
    assert_eq!(bwd, fwd);
    assert_eq!(rb, rf);
}

fn speech_data(size: usize, seed: u64) -> (seqkd_core::corpus::ToyBitext, StDataset) {
    let toy = synth_toy_bitext(&ToyGenConfig { size, seed, ..Default::default() }).unwrap();
    let synth = SpeechSynth::new(toy.vocab.len(), SpeechConfig { repeat_min: 3, repeat_max: 5, ..Default::default() }, seed).unwrap();
    let ds = StDataset::from_bitext(&toy.corpus, &synth, seed).unwrap();
    (toy, ds)
}

#[test]
fn asr_overfits_a_single_utterance() {
    let (toy, ds) = speech_data(1, 4);
    let cfg = TransformerConfig::toy(&toy.vocab, InputMode::Features { feat_dim: 16 }, Lang::Src);
    let data: Vec<_> = ds.asr_view(|_| true).into_iter().map(|(f, t)| (f.clone(), t)).collect();
    let tc = TrainConfig { epochs: 150, batch_size: 1, warmup: 30, lr_factor: 0.5, keep_best: 1, ..Default::default() };
    let (m, _) = pretrain_asr(&data, &data, cfg, &tc).unwrap();
    let out = m.greedy_decode(&[&Source::Features(data[0].0.clone())], Lang::Src, 12).unwrap();
    assert_eq!(out[0].content(), data[0].1.as_slice());
}

#[test]
fn asr_loss_decreases_over_first_epochs() {
    for seed in 0..3 {
        let (toy, ds) = speech_data(200, 10 + seed);
        let cfg = TransformerConfig::toy(&toy.vocab, InputMode::Features { feat_dim: 16 }, Lang::Src);
        let data: Vec<_> = ds.asr_view(|_| true).into_iter().map(|(f, t)| (f.clone(), t)).collect();
        let (_, r) = pretrain_asr(&data, &data[..20], cfg, &quick(3, seed)).unwrap();
        let l: Vec<f64> = r.epochs.iter().map(|e| e.mean_loss.total).collect();
        assert!(l[1] < l[0] && l[2] < l[1], "seed {seed}: {l:?}");
        assert!(r.epochs.iter().all(|e| e.dev_metric.is_some_and(|a| (0.0..=1.0).contains(&a))));
    }
}

#[test]
fn language_embedding_selects_output_vocabulary() {
    let (toy, ds) = speech_data(300, 5);
    let cfg = TransformerConfig::toy(&toy.vocab, InputMode::Features { feat_dim: 16 }, Lang::Tgt);
    let mut m = Seq2SeqModel::init(cfg, 5).unwrap();
    let data: Vec<Sample> = ds
        .items
        .iter()
        .map(|it| Sample { input: Source::Features(it.speech.clone()), primary: Some(it.tgt.clone()), auxiliary: Some(it.src.clone()) })
        .collect();
    let opts = TrainOptions::new(Objective::Joint { lambda_src: 1.0 }, ValidationMetric::Bleu);
    train(&mut m, &data, &[], &quick(25, 5), &opts).unwrap();
    let inputs: Vec<&Source> = data.iter().map(|s| &s.input).collect();
    for lang in Lang::ALL {
        let hyps = m.greedy_decode(&inputs, lang, 12).unwrap();
        let pure = hyps.iter().filter(|h| h.content().iter().all(|&t| toy.vocab.lang_of(t) == Some(lang))).count();
        let rate = pure as f64 / hyps.len() as f64;
        assert!(rate >= 0.95, "{lang:?}: {rate}");
    }
}
