//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqkd_core::alignmetrics::{
    bleu, conditional_entropy, em_train_aligner, faithfulness, ter, AlignDirection, AlignedPair, AlignerOptions,
};
use seqkd_core::corpus::{
    synth_toy_bitext, FeatureSeq, Lang, ParallelCorpus, SentencePair, SpeechConfig, SpeechSynth, StDataset, TokenId, ToyGenConfig,
    Variant, Vocabulary,
};
use seqkd_core::model::{
    ar_joint_loss, nar_joint_loss, train, DecodeConfig, Example, InputMode, NarWeights, Objective, Sample, Seq2SeqModel, Source, StepCtx,
    TrainConfig, TrainOptions, TransformerConfig, ValidationMetric,
};
use seqkd_core::pipeline::{run_experiment, ExperimentConfig, ExperimentReport, RowId};
use seqkd_core::tensor::{gradient_check, weighted_sum, AttnLayout, Graph, ParamStore, Segment, Tensor, TensorError, Var};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, format!("took {elapsed:.1?}, limit {limit:.0?}"))
}

// gradient fidelity

const H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Graph, &ParamStore) -> seqkd_core::tensor::Result<Var>>;

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn layer_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng, &mut ParamStore) -> Builder)> {
    vec![
        ("linear", |rng, s| {
            let (x, w, b, r) = (s.add("x", rand_matrix(rng, 4, 3)), s.add("w", rand_matrix(rng, 3, 5)), s.add("b", rand_vector(rng, 5)), rand_matrix(rng, 4, 5));
            Box::new(move |g, s| {
                let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
                let y = g.matmul(x, w)?;
                let y = g.add_row(y, b)?;
                weighted_sum(g, y, r.clone())
            })
        }),
        ("layer_norm", |rng, s| {
            let (x, gm, bt, r) = (s.add("x", rand_matrix(rng, 3, 6)), s.add("g", rand_vector(rng, 6)), s.add("b", rand_vector(rng, 6)), rand_matrix(rng, 3, 6));
            Box::new(move |g, s| {
                let (x, gm, bt) = (g.param(s, x), g.param(s, gm), g.param(s, bt));
                let y = g.layer_norm(x, gm, bt, 1e-5)?;
                weighted_sum(g, y, r.clone())
            })
        }),
        ("softmax+cross_entropy", |rng, s| {
            let (x, r) = (s.add("x", rand_matrix(rng, 3, 5)), rand_matrix(rng, 3, 5));
            Box::new(move |g, s| {
                let xv = g.param(s, x);
                let p = g.softmax_rows(xv)?;
                let a = weighted_sum(g, p, r.clone())?;
                let ce = g.cross_entropy(xv, &[Some(1), None, Some(4)], 0.1)?;
                g.add(a, ce)
            })
        }),
        ("self_attention", |rng, s| attention_case(rng, s, false)),
        ("causal_attention", |rng, s| attention_case(rng, s, true)),
        ("cross_attention", |rng, s| {
            let (q, kv, r) = (s.add("q", rand_matrix(rng, 3, 4)), s.add("kv", rand_matrix(rng, 4, 4)), rand_matrix(rng, 3, 4));
            let layout = Rc::new(AttnLayout::cross_attention(&Segment::stack([1, 2]), &Segment::stack([3, 1]), 2));
            Box::new(move |g, s| {
                let (q, kv) = (g.param(s, q), g.param(s, kv));
                let y = g.attention(q, kv, kv, layout.clone())?;
                weighted_sum(g, y, r.clone())
            })
        }),
        ("convolution+relu", |rng, s| {
            let (x, w, r) = (s.add("x", rand_matrix(rng, 8, 2)), s.add("w", rand_matrix(rng, 6, 3)), rand_matrix(rng, 5, 3));
            let segs = Segment::stack([5, 3]);
            Box::new(move |g, s| {
                let (x, w) = (g.param(s, x), g.param(s, w));
                let (win, _) = g.conv_windows(x, &segs)?;
                let y = g.matmul(win, w)?;
                let y = g.relu(y)?;
                weighted_sum(g, y, r.clone())
            })
        }),
        ("embedding+language+pool", |rng, s| {
            let (t, l, r) = (s.add("embed", rand_matrix(rng, 6, 4)), s.add("lang", rand_matrix(rng, 2, 4)), rand_matrix(rng, 5, 4));
            Box::new(move |g, s| {
                let (t, l) = (g.param(s, t), g.param(s, l));
                let e = g.gather(t, &[0, 3, 3, 5, 1])?;
                let e = g.scale(e, 2.0)?;
                let le = g.gather(l, &[0, 0, 1, 1, 1])?;
                let y = g.add(e, le)?;
                let pooled = g.mean_pool(y, &Segment::stack([2, 3]))?;
                let a = weighted_sum(g, y, r.clone())?;
                let b = g.sum(pooled)?;
                g.add(a, b)
            })
        }),
    ]
}

fn attention_case(rng: &mut ChaCha8Rng, s: &mut ParamStore, causal: bool) -> Builder {
    let (q, k, v, r) = (s.add("q", rand_matrix(rng, 5, 4)), s.add("k", rand_matrix(rng, 5, 4)), s.add("v", rand_matrix(rng, 5, 4)), rand_matrix(rng, 5, 4));
    let layout = Rc::new(AttnLayout::self_attention(&Segment::stack([2, 3]), 2, causal));
    Box::new(move |g, s| {
        let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
        let y = g.attention(q, k, v, layout.clone())?;
        weighted_sum(g, y, r.clone())
    })
}

fn toy_vocab() -> Vocabulary {
    synth_toy_bitext(&ToyGenConfig { size: 50, ..Default::default() }).unwrap().vocab
}

fn feats(frames: usize, dim: usize, seed: u64) -> FeatureSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureSeq::new(frames, dim, (0..frames * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Worst error of the combined NAR and AR training losses of a 4-wide model.
fn whole_model_error(v: &Vocabulary, seed: u64) -> f64 {
    let cfg = TransformerConfig {
        d_model: 4,
        d_ff: 4,
        heads: 2,
        max_len: 6,
        dropout: 0.0,
        ..TransformerConfig::toy(v, InputMode::Features { feat_dim: 3 }, Lang::Tgt)
    }
    .with_nar(true);
    let mut m = Seq2SeqModel::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for id in m.params.ids().collect::<Vec<_>>() {
        for x in m.params.get_mut(id).data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let (src, tgt) = (v.ids_of(Lang::Src), v.ids_of(Lang::Tgt));
    let x1 = Source::Features(feats(6, 3, seed));
    let x2 = Source::Features(feats(3, 3, seed + 100));
    let (p1, a1, p2) = (vec![tgt[0], tgt[2], tgt[1]], vec![src[1], src[0]], vec![tgt[3]]);
    let batch = [
        Example { input: &x1, primary: Some(&p1), auxiliary: Some(&a1) },
        Example { input: &x2, primary: Some(&p2), auxiliary: None },
    ];
    let ctx = StepCtx { dropout: 0.0, smoothing: 0.1, seed, step: 0 };
    let cfg = m.cfg.clone();
    gradient_check(&m.params, H, |g, store| {
        let model = Seq2SeqModel::from_params(cfg.clone(), store.clone()).map_err(|e| TensorError::Shape(e.to_string()))?;
        let (nar, _) = nar_joint_loss(&model, g, &batch, NarWeights { ar: 0.3, lp: 0.1, src: 0.3 }, false, &ctx).unwrap();
        let (ar, _) = ar_joint_loss(&model, g, &batch, 0.3, &ctx).unwrap();
        g.add(nar, ar)
    })
    .unwrap()
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checks = 0;
    for (name, case) in layer_cases() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let build = case(&mut rng, &mut store);
            let err = gradient_check(&store, H, build).map_err(|e| e.to_string())?;
            checks += 1;
            if err > worst.0 {
                worst = (err, format!("{name} seed {seed}"));
            }
        }
    }
    let v = toy_vocab();
    for seed in 0..5u64 {
        let err = whole_model_error(&v, seed);
        checks += 1;
        if err > worst.0 {
            worst = (err, format!("whole model seed {seed}"));
        }
    }
    ensure(worst.0 < GRAD_TOL, format!("max relative error {:.2e} at {}", worst.0, worst.1))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{checks} checks, max relative error {:.2e} ({}), {:.1?}", worst.0, worst.1, start.elapsed()))
}

// EM correctness

fn corpus(pairs: &[(&[TokenId], &[TokenId])]) -> ParallelCorpus {
    ParallelCorpus::new(pairs.iter().map(|(s, t)| SentencePair { src: s.to_vec(), tgt: t.to_vec() }).collect(), Lang::Src, Lang::Tgt).unwrap()
}

fn em_correctness() -> Check {
    let start = Instant::now();
    let mut monotone = 0;
    for seed in 0..5u64 {
        let toy = synth_toy_bitext(&ToyGenConfig { size: 100, seed, ..Default::default() }).unwrap();
        for opts in [AlignerOptions::model1(10, 0.0), AlignerOptions::model1(10, 0.1), AlignerOptions { iterations: 10, ..Default::default() }] {
            for dir in [AlignDirection::Forward, AlignDirection::Backward] {
                let (_, ll) = em_train_aligner(&toy.corpus, dir, &opts).map_err(|e| e.to_string())?;
                if let Some(w) = ll.windows(2).find(|w| w[1] < w[0] - 1e-10) {
                    return Err(format!("log-likelihood decreased {} -> {} (seed {seed}, {opts:?}, {dir:?})", w[0], w[1]));
                }
                monotone += 1;
            }
        }
    }
    let (a, b, x, y) = (10, 11, 20, 21);
    let hand = corpus(&[(&[a, b], &[x, y]), (&[a], &[x])]);
    let (m, _) = em_train_aligner(&hand, AlignDirection::Forward, &AlignerOptions::model1(5, 0.0)).map_err(|e| e.to_string())?;
    let (txa, tyb) = (m.t(x, a), m.t(y, b));
    let summary = format!("t(x|a) = {txa:.4}, t(y|b) = {tyb:.4} after 5 iterations; {monotone} monotone runs");
    ensure(txa > 0.9 && tyb > 0.9, format!("{summary}; both must exceed 0.9"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(summary)
}

// metric oracles

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn pair(given: &[TokenId], emitted: &[TokenId], links: &[Option<usize>]) -> AlignedPair {
    AlignedPair { given: given.to_vec(), emitted: emitted.to_vec(), links: links.to_vec(), direction: AlignDirection::Forward }
}

fn metric_oracles() -> Check {
    let b = bleu(&[words("a b c d")], &[words("a b c d e")]).map_err(|e| e.to_string())?;
    let expect_b = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
    ensure((b - 77.88).abs() <= 0.01 && (b - expect_b).abs() < 1e-9, format!("BLEU(a b c d | a b c d e) = {b}"))?;
    let id = bleu(&[words("a b c d e")], &[words("a b c d e")]).map_err(|e| e.to_string())?;
    ensure(id == 100.0, format!("identity BLEU = {id}"))?;
    let t = ter(&[words("b a")], &[words("a b")]).map_err(|e| e.to_string())?;
    ensure(t == 50.0, format!("TER(b a | a b) = {t}"))?;
    let split = vec![pair(&[1], &[10], &[Some(0)]), pair(&[1], &[11], &[Some(0)])];
    let h = conditional_entropy(&split, AlignDirection::Forward).map_err(|e| e.to_string())?.value;
    ensure((h - std::f64::consts::LN_2).abs() <= 1e-6, format!("50/50 entropy = {h}"))?;
    let corpus = vec![pair(&[1, 2], &[10, 11], &[Some(0), Some(1)]), pair(&[1], &[12], &[Some(0)]), pair(&[2], &[11], &[Some(0)])];
    let f_self = faithfulness(&corpus, &corpus, AlignDirection::Forward, 1e-6).map_err(|e| e.to_string())?.value;
    ensure(f_self == 0.0, format!("self faithfulness = {f_self}"))?;
    let eps = 1e-6;
    let mut distilled = vec![pair(&[1], &[11], &[Some(0)])];
    distilled.push(pair(&vec![1; 999_999], &vec![10; 999_999], &(0..999_999).map(Some).collect::<Vec<_>>()));
    let kl = faithfulness(&split, &distilled, AlignDirection::Forward, eps).map_err(|e| e.to_string())?.value;
    ensure((kl - 6.214).abs() <= 0.01, format!("KL example = {kl}"))?;
    Ok(format!("BLEU {b:.4}, identity {id}, TER {t}, H {h:.9}, F(self) {f_self}, KL {kl:.4}"))
}

// experiment-level trends, one shared run

fn trend_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data: ToyGenConfig { synonyms: 3, reorder_prob: 0.1, size: 2000, ..ExperimentConfig::default().data },
        rows: vec![RowId::A1, RowId::B1],
        ablation: false,
        seeds: vec![1, 2, 3],
        out_dir: out.to_path_buf(),
        ..Default::default()
    }
}

struct Trends {
    report: ExperimentReport,
    elapsed: Duration,
}

fn entropy_reduction(t: &Trends) -> Check {
    let mut lines = Vec::new();
    let mut fwd_ok = 0;
    let mut bwd_ok = 0;
    for s in &t.report.seed_reports {
        let a = s.analysis.as_ref().ok_or(format!("seed {} has no analysis: {:?}", s.seed, s.error))?;
        let (real, fwd, bwd) = (a.entropy_of(&Variant::Real), a.entropy_of(&Variant::Fwd), a.entropy_of(&Variant::Bwd));
        let (real, fwd, bwd) = (real.ok_or("no real row")?, fwd.ok_or("no fwd row")?, bwd.ok_or("no bwd row")?);
        let rf = 1.0 - fwd.forward / real.forward;
        let rb = 1.0 - bwd.backward / real.backward;
        fwd_ok += usize::from(rf >= 0.05);
        bwd_ok += usize::from(rb >= 0.05);
        lines.push(format!(
            "seed {}: C(->) {:.3}->{:.3} ({:.0}%), C(<-) {:.3}->{:.3} ({:.0}%)",
            s.seed,
            real.forward,
            fwd.forward,
            100.0 * rf,
            real.backward,
            bwd.backward,
            100.0 * rb
        ));
    }
    let summary = lines.join("; ");
    ensure(fwd_ok >= 2 && bwd_ok >= 2, format!("{summary}; need >=5% on >=2 of 3 seeds"))?;
    within(t.elapsed, Duration::from_secs(600)).map_err(|e| format!("{summary}; {e}"))?;
    Ok(summary)
}

fn backward_cross_effect(t: &Trends) -> Check {
    let mut ok = 0;
    let mut lines = Vec::new();
    for s in &t.report.seed_reports {
        let a = s.analysis.as_ref().ok_or("missing analysis")?;
        let real = a.entropy_of(&Variant::Real).ok_or("no real row")?.forward;
        let bwd = a.entropy_of(&Variant::Bwd).ok_or("no bwd row")?.forward;
        ok += usize::from(bwd < real);
        lines.push(format!("seed {}: C(->bwd) {bwd:.3} vs C(->real) {real:.3}", s.seed));
    }
    let summary = lines.join("; ");
    ensure(ok >= 2, format!("{summary}; need >=2 of 3 seeds"))?;
    Ok(summary)
}

fn faithfulness_structure(t: &Trends) -> Check {
    let mut lines = Vec::new();
    for s in &t.report.seed_reports {
        let a = s.analysis.as_ref().ok_or("missing analysis")?;
        ensure(a.faithfulness_of(&Variant::Real).is_none(), "real corpus has a faithfulness row")?;
        for v in [Variant::Fwd, Variant::Bwd, Variant::Bidir] {
            let r = a.faithfulness_of(&v).ok_or(format!("no faithfulness row for {v}"))?;
            ensure(r.forward > 0.0 && r.backward > 0.0, format!("seed {}: F({v}) not positive: {r:?}", s.seed))?;
        }
        let between = a.bidir_between.ok_or("bidir ordering not evaluated")?;
        let flagged = a.warnings.iter().any(|w| w.contains("F(->bidir)"));
        ensure(between || flagged, format!("seed {}: bidir ordering violated without a warning", s.seed))?;
        let f = |v| a.faithfulness_of(&v).map(|r| r.forward).unwrap_or(f64::NAN);
        lines.push(format!(
            "seed {}: F(->) fwd {:.3} bwd {:.3} bidir {:.3} {}",
            s.seed,
            f(Variant::Fwd),
            f(Variant::Bwd),
            f(Variant::Bidir),
            if between { "between" } else { "flagged" }
        ));
    }
    Ok(lines.join("; "))
}

fn seqkd_bleu_trend(t: &Trends) -> Check {
    let a1 = t.report.row(RowId::A1).ok_or("A1 missing")?;
    let b1 = t.report.row(RowId::B1).ok_or("B1 missing")?;
    for r in [a1, b1] {
        if let Some(f) = r.per_seed.iter().find(|s| s.error.is_some()) {
            return Err(format!("{} seed {} failed: {:?}", r.row, f.seed, f.error));
        }
        ensure(r.per_seed.len() == 3, format!("{} has {} seeds", r.row, r.per_seed.len()))?;
    }
    let per = |r: &seqkd_core::pipeline::RowReport| r.per_seed.iter().map(|s| format!("{:.2}", s.scores["bleu"])).collect::<Vec<_>>().join("/");
    let (ma, mb) = (a1.mean["bleu"], b1.mean["bleu"]);
    let summary = format!("A1 {ma:.2} ± {:.2} [{}], B1 {mb:.2} ± {:.2} [{}], gap {:+.2}", a1.std["bleu"], per(a1), b1.std["bleu"], per(b1), mb - ma);
    ensure(mb - ma >= 0.5, format!("{summary}; need >= +0.5"))?;
    within(t.elapsed, Duration::from_secs(1200)).map_err(|e| format!("{summary}; {e}"))?;
    Ok(format!("{summary}, {:.0?} for the whole run", t.elapsed))
}

// joint-loss reduction

fn joint_loss_reduction() -> Check {
    let toy = synth_toy_bitext(&ToyGenConfig { size: 160, seed: 4, ..Default::default() }).unwrap();
    let synth = SpeechSynth::new(toy.vocab.len(), SpeechConfig::default(), 4).unwrap();
    let ds = StDataset::from_bitext(&toy.corpus, &synth, 4).unwrap();
    let samples: Vec<Sample> = ds
        .items
        .iter()
        .map(|it| Sample { input: Source::Features(it.speech.clone()), primary: Some(it.tgt.clone()), auxiliary: Some(it.src.clone()) })
        .collect();
    let feat_dim = synth.cfg.feat_dim;
    let mcfg = TransformerConfig::toy(&toy.vocab, InputMode::Features { feat_dim }, Lang::Tgt);
    let tc = TrainConfig { epochs: 20, batch_size: 8, lambda_src: 0.0, seed: 9, keep_best: 1, ..Default::default() };
    let run = |objective| {
        let mut m = Seq2SeqModel::init(mcfg.clone(), 3).unwrap();
        let opts = TrainOptions { max_steps: 100, ..TrainOptions::new(objective, ValidationMetric::Accuracy) };
        let rep = train(&mut m, &samples, &[], &tc, &opts).unwrap();
        (m, rep)
    };
    let (plain_m, plain) = run(Objective::Plain);
    let (joint_m, joint) = run(Objective::Joint { lambda_src: 0.0 });
    ensure(plain.step_losses.len() == 100 && joint.step_losses.len() == 100, format!("{} and {} steps", plain.step_losses.len(), joint.step_losses.len()))?;
    for (i, (p, j)) in plain.step_losses.iter().zip(&joint.step_losses).enumerate() {
        ensure(p.total.to_bits() == j.total.to_bits(), format!("step {i}: plain {} vs joint {}", p.total, j.total))?;
        ensure(j.total.to_bits() == j.st.to_bits(), format!("step {i}: joint total {} vs its st term {}", j.total, j.st))?;
    }
    ensure(plain_m.params == joint_m.params, "final parameters differ")?;
    Ok(format!("100 steps bit-identical, loss {:.4} -> {:.4}", plain.step_losses[0].total, plain.step_losses[99].total))
}

// mask-predict contract

fn mask_predict_contract() -> Check {
    let v = toy_vocab();
    let cfg = TransformerConfig { dropout: 0.0, ..TransformerConfig::toy(&v, InputMode::Features { feat_dim: 6 }, Lang::Tgt) }.with_nar(true);
    let m = Seq2SeqModel::init(cfg, 21).unwrap();
    let inputs: Vec<Source> = (0..6).map(|i| Source::Features(feats(4 + 3 * i, 6, 50 + i as u64))).collect();
    let refs: Vec<&Source> = inputs.iter().collect();
    let mut runs = 0;
    for t in [1usize, 4, 10] {
        let dc = DecodeConfig { iterations: t, length_beam: 9, max_len: 12, beam: 1 };
        for (i, (h, tr)) in m.mask_predict_traced(&refs, Lang::Tgt, &dc).map_err(|e| e.to_string())?.into_iter().enumerate() {
            ensure(!h.tokens.contains(&m.cfg.specials.mask), format!("T={t} input {i}: output contains MASK"))?;
            ensure(tr.lengths.len() == 9, format!("T={t}: {} length candidates", tr.lengths.len()))?;
            ensure(h.content().len() == tr.lengths[tr.chosen], format!("T={t} input {i}: length {} vs chosen {}", h.content().len(), tr.lengths[tr.chosen]))?;
            for (n, counts) in tr.lengths.iter().zip(&tr.remask) {
                let want: Vec<usize> = (1..=t).map(|k| ((*n * (t - k)) as f64 / t as f64).floor() as usize).collect();
                ensure(counts == &want, format!("T={t} N={n}: re-mask {counts:?} vs {want:?}"))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} instrumented decodes over T in {{1,4,10}}, l=9"))
}

// determinism

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = |sub: &str| ExperimentConfig {
        data: ToyGenConfig { size: 300, ..ExperimentConfig::default().data },
        mt_train: TrainConfig { epochs: 4, ..ExperimentConfig::default().mt_train },
        asr_train: TrainConfig { epochs: 2, ..ExperimentConfig::default().asr_train },
        st_train: TrainConfig { epochs: 3, ..ExperimentConfig::default().st_train },
        rows: vec![RowId::A1, RowId::B1, RowId::C1, RowId::NarFwd],
        ablation: false,
        seeds: vec![5],
        out_dir: dir.path().join(sub),
        ..Default::default()
    };
    let mut bytes = Vec::new();
    for sub in ["a", "b"] {
        let c = cfg(sub);
        let report = run_experiment(&c).map_err(|e| e.to_string())?;
        let path = c.out_dir.join("report.json");
        seqkd_core::pipeline::emit_report(&report, seqkd_core::pipeline::ReportFormat::Json, &path).map_err(|e| e.to_string())?;
        ensure(report.warnings.is_empty(), format!("warnings: {:?}", report.warnings))?;
        bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(bytes[0] == bytes[1], "reports differ between identical runs")?;
    Ok(format!("two runs, {} identical bytes", bytes[0].len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, r: std::thread::Result<Check>| {
        let line = match r {
            Ok(Ok(msg)) => format!("PASS  {name}: {msg}"),
            Ok(Err(msg)) => {
                failed += 1;
                format!("FAIL  {name}: {msg}")
            }
            Err(p) => {
                failed += 1;
                let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
                format!("FAIL  {name}: panicked: {msg}")
            }
        };
        println!("{line}");
    };
    report("gradient fidelity", catch_unwind(gradient_fidelity));
    report("EM correctness", catch_unwind(em_correctness));
    report("metric oracles", catch_unwind(metric_oracles));

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let trends = catch_unwind(|| run_experiment(&trend_config(dir.path())).map(|report| Trends { report, elapsed: start.elapsed() }));
    match trends {
        Ok(Ok(t)) => {
            report("entropy reduction", catch_unwind(AssertUnwindSafe(|| entropy_reduction(&t))));
            report("backward cross-effect", catch_unwind(AssertUnwindSafe(|| backward_cross_effect(&t))));
            report("faithfulness structure", catch_unwind(AssertUnwindSafe(|| faithfulness_structure(&t))));
            report("SeqKD BLEU trend", catch_unwind(AssertUnwindSafe(|| seqkd_bleu_trend(&t))));
        }
        other => {
            let msg = match other {
                Ok(Err(e)) => e.to_string(),
                _ => "experiment panicked".to_string(),
            };
            for name in ["entropy reduction", "backward cross-effect", "faithfulness structure", "SeqKD BLEU trend"] {
                report(name, Ok(Err(msg.clone())));
            }
        }
    }

    report("joint-loss reduction", catch_unwind(joint_loss_reduction));
    report("mask-predict contract", catch_unwind(mask_predict_contract));
    report("determinism", catch_unwind(determinism));
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
