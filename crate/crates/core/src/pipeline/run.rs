use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, RowId, RowRecipe};
use super::report::{AnalysisTable, EntropyRow, ExperimentReport, FaithfulnessRow, RowReport, RowSeedResult, SeedReport};
use crate::alignmetrics::{align_dataset, bleu, conditional_entropy, faithfulness, AlignDirection, AlignedPair, AlignerOptions, FAITHFULNESS_EPS};
use crate::corpus::{
    load_st_dataset, save_st_dataset, synth_toy_bitext, Lang, SpeechSynth, StDataset, TokenId, ToyGenConfig, Variant, Vocabulary,
};
use crate::distill::{backward_seqkd, concat_2ref, forward_seqkd, make_bidir, quality_report, BeamGenerator, DistillManifest};
use crate::error::{Error, Result};
use crate::model::{
    mt_samples, pretrain_asr, train, train_mt, DecodeConfig, InputMode, MtDirection, Objective, Sample, Seq2SeqModel, Source,
    TrainConfig, TrainOptions, TrainReport, Transfer, ValidationMetric,
};

const TAG_DATA: u64 = 0x6461_7461;
const TAG_SPEECH: u64 = 0x7370_6368;
const TAG_MT_FWD: u64 = 0x6d74_6677;
const TAG_MT_BWD: u64 = 0x6d74_6277;
const TAG_ASR: u64 = 0x0061_7372;
const TAG_ST: u64 = 0x7374_0000;

/// SplitMix64 of `seed ^ tag`: independent streams per stage from one run seed.
pub fn stage_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// 80/10/10 assignment from the first eight bytes of SHA-256 of the utterance id.
pub fn split_of(utt_id: &str) -> Split {
    let h = Sha256::digest(utt_id.as_bytes());
    let v = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
    match v % 10 {
        0..=7 => Split::Train,
        8 => Split::Dev,
        _ => Split::Test,
    }
}

#[derive(Clone, Debug)]
pub struct SplitData {
    pub vocab: Vocabulary,
    pub case_marker: Option<TokenId>,
    pub train: StDataset,
    pub dev: StDataset,
    pub test: StDataset,
}

#[derive(Clone, Debug)]
pub struct MtModels {
    pub fwd: Seq2SeqModel,
    pub bwd: Seq2SeqModel,
}

/// Distilled training sets keyed by variant, with their manifests.
#[derive(Clone, Debug, Default)]
pub struct Distilled {
    pub sets: HashMap<Variant, StDataset>,
    pub manifests: HashMap<Variant, DistillManifest>,
}

/// What a row was trained on, read back from the datasets themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowManifest {
    pub row: RowId,
    pub recipe: RowRecipe,
    /// Training items per parent variant.
    pub items_by_variant: BTreeMap<String, usize>,
    /// Generator fingerprints of the distilled sets used.
    pub generators: Vec<String>,
    pub encoder_init: String,
    pub decoder_init: Option<String>,
    pub averaged_epochs: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DataMeta {
    case_marker: Option<TokenId>,
}

/// Artifact layout of one seed under the output directory.
#[derive(Clone, Debug)]
pub struct SeedRun<'c> {
    pub cfg: &'c ExperimentConfig,
    pub seed: u64,
    pub dir: PathBuf,
}

fn variant_file(v: &Variant) -> String {
    v.to_string().replace([':', '+'], "_")
}

impl<'c> SeedRun<'c> {
    pub fn new(cfg: &'c ExperimentConfig, seed: u64) -> Self {
        Self { cfg, seed, dir: cfg.out_dir.join(format!("seed-{seed}")) }
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn row_dir(&self, row: RowId) -> PathBuf {
        self.dir.join("rows").join(row.name())
    }

    fn train_cfg(&self, base: &TrainConfig, tag: u64) -> TrainConfig {
        TrainConfig { seed: stage_seed(self.seed ^ base.seed, tag), ..base.clone() }
    }

    pub fn data_config(&self) -> ToyGenConfig {
        ToyGenConfig { seed: stage_seed(self.seed ^ self.cfg.data.seed, TAG_DATA), ..self.cfg.data.clone() }
    }

    /// Toy bitext with pseudo-speech, split by utterance-id hash.
    pub fn gen_data(&self) -> Result<SplitData> {
        let toy = synth_toy_bitext(&self.data_config())?;
        let synth = SpeechSynth::new(toy.vocab.len(), self.cfg.speech.clone(), stage_seed(self.seed, TAG_SPEECH))?
            .with_silent(toy.case_marker);
        let full = StDataset::from_bitext(&toy.corpus, &synth, stage_seed(self.seed, TAG_SPEECH ^ 1))?;
        let part = |s| full.filter(|id| split_of(id) == s);
        let data = SplitData { vocab: toy.vocab, case_marker: toy.case_marker, train: part(Split::Train), dev: part(Split::Dev), test: part(Split::Test) };
        fs::write(self.path("data/vocab.json")?, serde_json::to_vec(&data.vocab)?)?;
        fs::write(self.path("data/meta.json")?, serde_json::to_vec(&DataMeta { case_marker: data.case_marker })?)?;
        for (name, ds) in [("train", &data.train), ("dev", &data.dev), ("test", &data.test)] {
            save_st_dataset(&self.path(&format!("data/{name}.jsonl"))?, ds, &data.vocab)?;
        }
        Ok(data)
    }

    pub fn load_data(&self) -> Result<SplitData> {
        let vocab: Vocabulary = serde_json::from_slice(&fs::read(self.dir.join("data/vocab.json"))?)?;
        let meta: DataMeta = serde_json::from_slice(&fs::read(self.dir.join("data/meta.json"))?)?;
        let load = |name: &str| load_st_dataset(&self.dir.join(format!("data/{name}.jsonl")), &vocab);
        Ok(SplitData { train: load("train")?, dev: load("dev")?, test: load("test")?, vocab, case_marker: meta.case_marker })
    }

    /// Forward and backward text models on the training bitext, validated on dev.
    pub fn train_mt(&self, data: &SplitData) -> Result<(MtModels, [TrainReport; 2])> {
        let mcfg = self.cfg.model.build(&data.vocab, InputMode::Text, Lang::Tgt);
        let (train_c, dev_c) = (data.train.mt_view()?, data.dev.mt_view()?);
        let (fwd, rf) = train_mt(&train_c, Some(&dev_c), MtDirection::Forward, mcfg.clone(), &self.train_cfg(&self.cfg.mt_train, TAG_MT_FWD))?;
        let (bwd, rb) = train_mt(&train_c, Some(&dev_c), MtDirection::Backward, mcfg, &self.train_cfg(&self.cfg.mt_train, TAG_MT_BWD))?;
        fwd.save(&self.path("mt/fwd.ckpt")?)?;
        bwd.save(&self.path("mt/bwd.ckpt")?)?;
        fs::write(self.path("mt/reports.json")?, serde_json::to_vec_pretty(&[&rf, &rb])?)?;
        Ok((MtModels { fwd, bwd }, [rf, rb]))
    }

    pub fn load_mt(&self) -> Result<MtModels> {
        Ok(MtModels { fwd: Seq2SeqModel::load(&self.dir.join("mt/fwd.ckpt"))?, bwd: Seq2SeqModel::load(&self.dir.join("mt/bwd.ckpt"))? })
    }

    /// Beam-search BLEU of both text models on the test split.
    pub fn mt_test_bleu(&self, mt: &MtModels, data: &SplitData) -> Result<(f64, f64)> {
        let decode = DecodeConfig { beam: self.cfg.distill.beam, max_len: self.cfg.distill.max_len, ..self.cfg.decode.clone() };
        let test = data.test.mt_view()?;
        let score = |m: &Seq2SeqModel, samples: Vec<Sample>| -> Result<f64> {
            let inputs: Vec<&Source> = samples.iter().map(|s| &s.input).collect();
            let hyps = m.beam_decode(&inputs, m.cfg.target_lang, &decode)?;
            let hyps: Vec<Vec<TokenId>> = hyps.iter().map(|h| h.content().to_vec()).collect();
            let refs: Vec<Vec<TokenId>> = samples.iter().map(|s| s.primary.clone().expect("bitext target")).collect();
            bleu(&hyps, &refs)
        };
        Ok((score(&mt.fwd, mt_samples(&test))?, score(&mt.bwd, mt_samples(&test.swapped()))?))
    }

    /// Forward, backward and bidirectional distillation of the training split.
    pub fn distill(&self, data: &SplitData, mt: &MtModels) -> Result<Distilled> {
        let dc = &self.cfg.distill;
        let eos = data.vocab.specials().eos;
        let gf = BeamGenerator { model: &mt.fwd, beam: dc.beam, max_len: dc.max_len };
        let gb = BeamGenerator { model: &mt.bwd, beam: dc.beam, max_len: dc.max_len };
        let (ff, fb) = (mt.fwd.checksum()?, mt.bwd.checksum()?);
        let mut out = Distilled::default();
        let fwd = dc.wants(&Variant::Fwd).then(|| forward_seqkd(&gf, &data.train, eos)).transpose()?;
        let bwd = dc.wants(&Variant::Bwd).then(|| backward_seqkd(&gb, &data.train, eos)).transpose()?;
        if let Some(f) = &fwd {
            out.insert(f.clone(), vec![ff.clone()], dc);
        }
        if let Some(b) = &bwd {
            out.insert(b.clone(), vec![fb.clone()], dc);
        }
        if let (Some(f), Some(b), true) = (&fwd, &bwd, dc.wants(&Variant::Bidir)) {
            out.insert(make_bidir(f, b)?, vec![ff, fb], dc);
        }
        for (v, ds) in &out.sets {
            save_st_dataset(&self.path(&format!("distill/{}.jsonl", variant_file(v)))?, ds, &data.vocab)?;
            fs::write(self.path(&format!("distill/{}.manifest.json", variant_file(v)))?, serde_json::to_vec_pretty(&out.manifests[v])?)?;
        }
        Ok(out)
    }

    pub fn load_distilled(&self, data: &SplitData) -> Result<Distilled> {
        let mut out = Distilled::default();
        for v in [Variant::Fwd, Variant::Bwd, Variant::Bidir] {
            let p = self.dir.join(format!("distill/{}.jsonl", variant_file(&v)));
            if !p.exists() {
                continue;
            }
            let mut ds = load_st_dataset(&p, &data.vocab)?;
            ds.variant = v.clone();
            let m: DistillManifest = serde_json::from_slice(&fs::read(self.dir.join(format!("distill/{}.manifest.json", variant_file(&v))))?)?;
            out.sets.insert(v.clone(), ds);
            out.manifests.insert(v, m);
        }
        Ok(out)
    }

    /// Speech encoder pre-trained on transcriptions without the casing marker.
    pub fn pretrain_asr(&self, data: &SplitData) -> Result<(Seq2SeqModel, TrainReport)> {
        let feat_dim = self.cfg.speech.feat_dim;
        let mcfg = self.cfg.model.build(&data.vocab, InputMode::Features { feat_dim }, Lang::Src);
        let marker = data.case_marker;
        let view = |ds: &StDataset| ds.asr_view(|t| Some(t) != marker).into_iter().map(|(f, t)| (f.clone(), t)).collect::<Vec<_>>();
        let (asr, rep) = pretrain_asr(&view(&data.train), &view(&data.dev), mcfg, &self.train_cfg(&self.cfg.asr_train, TAG_ASR))?;
        asr.save(&self.path("asr/asr.ckpt")?)?;
        Ok((asr, rep))
    }

    pub fn load_asr(&self) -> Result<Seq2SeqModel> {
        Seq2SeqModel::load(&self.dir.join("asr/asr.ckpt"))
    }

    /// Training set of a row: one dataset as is, several ones concatenated with parent tags.
    pub fn row_dataset(&self, recipe: &RowRecipe, data: &SplitData, distilled: &Distilled) -> Result<StDataset> {
        let get = |v: &Variant| -> Result<StDataset> {
            match v {
                Variant::Real => Ok(data.train.clone()),
                _ => distilled.sets.get(v).cloned().ok_or_else(|| Error::Config(format!("row {} needs the {v} dataset", recipe.row))),
            }
        };
        let mut ds = get(&recipe.datasets[0])?;
        for v in &recipe.datasets[1..] {
            ds = concat_2ref(&ds, &get(v)?)?;
        }
        Ok(ds)
    }

    /// Speech translation model for one row, encoder from the ASR model.
    pub fn train_row(
        &self,
        row: RowId,
        data: &SplitData,
        distilled: &Distilled,
        asr: &Seq2SeqModel,
        mt: Option<&MtModels>,
    ) -> Result<(Seq2SeqModel, TrainReport, RowManifest)> {
        let sc = &self.cfg.st_train;
        let recipe = RowRecipe::of(row, sc.lambda_src);
        let ds = self.row_dataset(&recipe, data, distilled)?;
        let joint = recipe.lambda_src > 0.0;
        let samples: Vec<Sample> = ds
            .items
            .iter()
            .map(|it| Sample { input: Source::Features(it.speech.clone()), primary: Some(it.tgt.clone()), auxiliary: joint.then(|| it.src.clone()) })
            .collect();
        let dev: Vec<Sample> =
            data.dev.items.iter().map(|it| Sample::new(Source::Features(it.speech.clone()), it.tgt.clone())).collect();
        let feat_dim = self.cfg.speech.feat_dim;
        let mcfg = self.cfg.model.build(&data.vocab, InputMode::Features { feat_dim }, Lang::Tgt).with_nar(recipe.nar);
        let tc = TrainConfig { lambda_src: recipe.lambda_src, ..self.train_cfg(sc, TAG_ST ^ row as u64) };
        let mut model = Seq2SeqModel::init(mcfg, tc.seed)?;
        model.init_from(asr, Transfer::Encoder)?;
        let decoder_init = if recipe.mt_init {
            let mt = mt.ok_or_else(|| Error::Config(format!("row {row} needs the forward MT model")))?;
            model.init_from(&mt.fwd, Transfer::Decoder)?;
            Some(mt.fwd.checksum()?)
        } else {
            None
        };
        let mut opts = TrainOptions::new(Objective::for_model(&model, &tc), ValidationMetric::Bleu);
        opts.dev_decode.max_len = self.cfg.decode.max_len;
        let report = train(&mut model, &samples, &dev, &tc, &opts)?;

        let mut items_by_variant = BTreeMap::new();
        for it in &ds.items {
            *items_by_variant.entry(it.parent.clone().unwrap_or_else(|| ds.variant.clone()).to_string()).or_insert(0) += 1;
        }
        let mut generators: Vec<String> =
            recipe.datasets.iter().filter_map(|v| distilled.manifests.get(v)).flat_map(|m| m.generators.clone()).collect();
        generators.dedup();
        let manifest = RowManifest {
            row,
            recipe,
            items_by_variant,
            generators,
            encoder_init: asr.checksum()?,
            decoder_init,
            averaged_epochs: report.averaged_epochs.clone(),
        };
        let dir = self.row_dir(row);
        fs::create_dir_all(&dir)?;
        model.save(&dir.join("model.ckpt"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("train.json"), serde_json::to_vec(&report)?)?;
        Ok((model, report, manifest))
    }

    pub fn load_row(&self, row: RowId) -> Result<(Seq2SeqModel, RowManifest)> {
        let dir = self.row_dir(row);
        let m = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        Ok((Seq2SeqModel::load(&dir.join("model.ckpt"))?, m))
    }

    /// Test-split outputs: beam search for AR rows, mask-predict per iteration count for NAR rows.
    pub fn decode_row(&self, row: RowId, model: &Seq2SeqModel, test: &StDataset, vocab: &Vocabulary) -> Result<BTreeMap<String, Vec<Vec<TokenId>>>> {
        let inputs: Vec<Source> = test.items.iter().map(|it| Source::Features(it.speech.clone())).collect();
        let refs: Vec<&Source> = inputs.iter().collect();
        let mut out = BTreeMap::new();
        let content = |hs: Vec<crate::model::Hypothesis>| hs.iter().map(|h| h.content().to_vec()).collect::<Vec<_>>();
        if model.has_nar() {
            for &t in &self.cfg.nar_iterations {
                let dc = DecodeConfig { iterations: t, ..self.cfg.decode.clone() };
                out.insert(format!("T={t}"), content(model.mask_predict(&refs, Lang::Tgt, &dc)?));
            }
        } else {
            out.insert("bleu".to_string(), content(model.beam_decode(&refs, Lang::Tgt, &self.cfg.decode)?));
        }
        let dir = self.row_dir(row);
        fs::create_dir_all(&dir)?;
        for (k, hyps) in &out {
            let text: String = test.items.iter().zip(hyps).map(|(it, h)| format!("{}\t{}\n", it.utt_id, vocab.render(h))).collect();
            fs::write(dir.join(hyp_file(k)), text)?;
        }
        Ok(out)
    }

    /// Score keys a row's decodes are stored under.
    pub fn score_keys(&self, row: RowId) -> Vec<String> {
        if row.is_nar() {
            self.cfg.nar_iterations.iter().map(|t| format!("T={t}")).collect()
        } else {
            vec!["bleu".to_string()]
        }
    }

    /// Hypotheses written by [`SeedRun::decode_row`], checked against the test utterance order.
    pub fn load_hyps(&self, row: RowId, test: &StDataset, vocab: &Vocabulary) -> Result<BTreeMap<String, Vec<Vec<TokenId>>>> {
        let dir = self.row_dir(row);
        let mut out = BTreeMap::new();
        for k in self.score_keys(row) {
            let path = dir.join(hyp_file(&k));
            let text = fs::read_to_string(&path)?;
            let lines: Vec<&str> = text.lines().collect();
            if lines.len() != test.items.len() {
                return Err(Error::Config(format!("{}: {} lines for {} test items", path.display(), lines.len(), test.items.len())));
            }
            let hyps = lines
                .iter()
                .zip(&test.items)
                .map(|(l, it)| {
                    let (id, body) = l.split_once('\t').unwrap_or((l, ""));
                    if id != it.utt_id {
                        return Err(Error::Config(format!("{}: expected {}, found {id}", path.display(), it.utt_id)));
                    }
                    vocab.encode(&body.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(k, hyps);
        }
        Ok(out)
    }

    /// BLEU per decode, also written to the row's `scores.json`.
    pub fn score_row(&self, row: RowId, hyps: &BTreeMap<String, Vec<Vec<TokenId>>>, test: &StDataset) -> Result<BTreeMap<String, f64>> {
        let scores = score_hyps(hyps, test)?;
        let dir = self.row_dir(row);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("scores.json"), serde_json::to_vec_pretty(&scores)?)?;
        Ok(scores)
    }
}

fn hyp_file(key: &str) -> String {
    format!("hyp.{}.txt", key.replace('=', ""))
}

impl Distilled {
    fn insert(&mut self, ds: StDataset, generators: Vec<String>, cfg: &crate::distill::DistillConfig) {
        self.manifests.insert(ds.variant.clone(), DistillManifest::for_dataset(&ds, generators, cfg));
        self.sets.insert(ds.variant.clone(), ds);
    }
}

/// Corpus BLEU of every decoded set against the test references.
pub fn score_hyps(hyps: &BTreeMap<String, Vec<Vec<TokenId>>>, test: &StDataset) -> Result<BTreeMap<String, f64>> {
    let refs: Vec<Vec<TokenId>> = test.items.iter().map(|it| it.tgt.clone()).collect();
    hyps.iter().map(|(k, h)| Ok((k.clone(), bleu(h, &refs)?))).collect()
}

/// Conditional entropy in both directions for each variant present, and
/// faithfulness to the real corpus for each distilled one.
pub fn run_analysis(datasets: &HashMap<Variant, StDataset>, opts: &AlignerOptions) -> Result<AnalysisTable> {
    let real = datasets.get(&Variant::Real).ok_or_else(|| Error::Config("analysis needs the real dataset".into()))?;
    let dirs = [AlignDirection::Forward, AlignDirection::Backward];
    let align = |ds: &StDataset| -> Result<[Vec<AlignedPair>; 2]> {
        let c = ds.mt_view()?;
        Ok([align_dataset(&c, dirs[0], opts)?, align_dataset(&c, dirs[1], opts)?])
    };
    let real_al = align(real)?;
    let mut table = AnalysisTable::default();
    for v in [Variant::Real, Variant::Fwd, Variant::Bwd, Variant::Bidir] {
        let Some(ds) = datasets.get(&v) else {
            table.warnings.push(format!("variant {v} missing; row omitted"));
            continue;
        };
        if v != Variant::Real {
            let al = align(ds)?;
            let e = [conditional_entropy(&al[0], dirs[0])?, conditional_entropy(&al[1], dirs[1])?];
            let f = [faithfulness(&real_al[0], &al[0], dirs[0], FAITHFULNESS_EPS)?, faithfulness(&real_al[1], &al[1], dirs[1], FAITHFULNESS_EPS)?];
            table.entropy.push(EntropyRow { variant: v.clone(), forward: e[0].value, backward: e[1].value });
            table.faithfulness.push(FaithfulnessRow {
                variant: v,
                forward: f[0].value,
                backward: f[1].value,
                missing_rows: [f[0].missing_rows, f[1].missing_rows],
            });
        } else {
            let e = [conditional_entropy(&real_al[0], dirs[0])?, conditional_entropy(&real_al[1], dirs[1])?];
            table.entropy.push(EntropyRow { variant: v, forward: e[0].value, backward: e[1].value });
        }
    }
    let f = |v: Variant| table.faithfulness.iter().find(|r| r.variant == v).map(|r| r.forward);
    if let (Some(fw), Some(bw), Some(bi)) = (f(Variant::Fwd), f(Variant::Bwd), f(Variant::Bidir)) {
        let between = fw.min(bw) <= bi && bi <= fw.max(bw);
        table.bidir_between = Some(between);
        if !between {
            table.warnings.push(format!("F(->bidir) = {bi:.4} is outside [F(->fwd), F(->bwd)] = [{fw:.4}, {bw:.4}]"));
        }
    }
    Ok(table)
}

fn describe(e: &Error) -> String {
    e.to_string()
}

/// Every stage for one seed; row failures are recorded and the remaining rows still run.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, rows: &[RowId]) -> (SeedReport, Vec<(RowId, RowSeedResult)>) {
    let run = SeedRun::new(cfg, seed);
    let mut rep = SeedReport { seed, ..Default::default() };
    let prep = (|| -> Result<(SplitData, MtModels, Distilled, Seq2SeqModel)> {
        let data = run.gen_data()?;
        let (mt, _) = run.train_mt(&data)?;
        rep.mt_test_bleu = Some(run.mt_test_bleu(&mt, &data)?);
        let distilled = run.distill(&data, &mt)?;
        for (v, side) in [(Variant::Fwd, Lang::Tgt), (Variant::Bwd, Lang::Src)] {
            if let Some(ds) = distilled.sets.get(&v) {
                rep.quality.push((v.clone(), quality_report(&data.train, ds, side)?));
            }
        }
        let mut sets = distilled.sets.clone();
        sets.insert(Variant::Real, data.train.clone());
        rep.analysis = Some(run_analysis(&sets, &cfg.align)?);
        let (asr, _) = run.pretrain_asr(&data)?;
        Ok((data, mt, distilled, asr))
    })();
    let (data, mt, distilled, asr) = match prep {
        Ok(p) => p,
        Err(e) => {
            rep.error = Some(describe(&e));
            let failed = rows.iter().map(|&r| (r, RowSeedResult::failed(seed, format!("seed preparation failed: {e}")))).collect();
            return (rep, failed);
        }
    };
    let results = rows
        .iter()
        .map(|&row| {
            let res = (|| -> Result<RowSeedResult> {
                let (model, _, manifest) = run.train_row(row, &data, &distilled, &asr, Some(&mt))?;
                let hyps = run.decode_row(row, &model, &data.test, &data.vocab)?;
                let scores = run.score_row(row, &hyps, &data.test)?;
                Ok(RowSeedResult { seed, scores, error: None, manifest: Some(manifest) })
            })();
            let res = res.unwrap_or_else(|e| {
                log::warn!("row {row} seed {seed}: {e}");
                RowSeedResult::failed(seed, describe(&e))
            });
            (row, res)
        })
        .collect();
    (rep, results)
}

/// The whole matrix: every seed, every selected row, then aggregation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let rows = cfg.all_rows();
    let mut per_row: BTreeMap<RowId, Vec<RowSeedResult>> = BTreeMap::new();
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("seed {seed}");
        let (rep, res) = run_seed(cfg, seed, &rows);
        seeds.push(rep);
        for (row, r) in res {
            per_row.entry(row).or_default().push(r);
        }
    }
    let rows = rows.iter().map(|&r| RowReport::aggregate(r, cfg.st_train.lambda_src, per_row.remove(&r).unwrap_or_default())).collect();
    Ok(ExperimentReport::new(cfg.fingerprint()?, cfg.seeds.clone(), rows, seeds))
}

pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("report.json"), out.join("report.md"))
}
