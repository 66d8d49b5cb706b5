//! Pre-norm Transformer encoder with an autoregressive decoder, an optional CMLM
//! decoder and a length head. The two decoders share the token embedding, the
//! language embeddings and the output projection.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{InputMode, TransformerConfig};
use crate::corpus::{FeatureSeq, Lang, TokenId};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, AttnLayout, Graph, ParamId, ParamStore, Segment, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Model input: token ids (text mode) or frames (feature mode).
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Tokens(Vec<TokenId>),
    Features(FeatureSeq),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Tokens(t) => t.len(),
            Source::Features(f) => f.num_frames(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded inverted dropout. `off()` is the evaluation mode.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    /// Independent stream per `(seed, step, branch)`.
    pub fn train(p: f64, seed: u64, step: u64, branch: u64) -> Self {
        if p <= 0.0 {
            return Self::off();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step.wrapping_mul(32).wrapping_add(branch));
        Self { p, rng: Some(rng) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => Ok(g.dropout(x, self.p, rng)?),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<DecLayer>,
    ln: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    lang: ParamId,
    conv: Option<[Linear; 2]>,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    ar: Decoder,
    nar: Option<Decoder>,
    out: Linear,
    length: Option<Linear>,
}

enum Kind {
    Weight,
    Bias,
    Gain,
}

/// Either creates parameters (init) or resolves them in an existing store (load).
struct Builder<'a> {
    store: &'a mut ParamStore,
    init: Option<(ChaCha8Rng, Normal<f64>)>,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: &[usize], kind: Kind) -> Result<ParamId> {
        match &mut self.init {
            Some((rng, normal)) => {
                let n: usize = shape.iter().product();
                let data = match kind {
                    Kind::Weight => (0..n).map(|_| normal.sample(rng)).collect(),
                    Kind::Bias => vec![0.0; n],
                    Kind::Gain => vec![1.0; n],
                };
                Ok(self.store.add(name, Tensor::new(shape.to_vec(), data)?))
            }
            None => {
                let id = self.store.id(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
                if self.store.get(id).shape() != shape {
                    return Err(Error::Shape(format!(
                        "{name}: checkpoint shape {:?}, config expects {shape:?}",
                        self.store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<Linear> {
        Ok(Linear { w: self.param(format!("{name}.w"), &[i, o], Kind::Weight)?, b: self.param(format!("{name}.b"), &[o], Kind::Bias)? })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm { g: self.param(format!("{name}.g"), &[d], Kind::Gain)?, b: self.param(format!("{name}.b"), &[d], Kind::Bias)? })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<Attn> {
        Ok(Attn {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn decoder(&mut self, prefix: &str, cfg: &TransformerConfig) -> Result<Decoder> {
        let d = cfg.d_model;
        let layers = (0..cfg.dec_layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                Ok(DecLayer {
                    ln1: self.norm(&format!("{p}.ln1"), d)?,
                    self_attn: self.attn(&format!("{p}.self"), d)?,
                    ln2: self.norm(&format!("{p}.ln2"), d)?,
                    cross: self.attn(&format!("{p}.cross"), d)?,
                    ln3: self.norm(&format!("{p}.ln3"), d)?,
                    ff1: self.linear(&format!("{p}.ff1"), d, cfg.d_ff)?,
                    ff2: self.linear(&format!("{p}.ff2"), cfg.d_ff, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder { layers, ln: self.norm(&format!("{prefix}.ln"), d)? })
    }

    fn layout(&mut self, cfg: &TransformerConfig) -> Result<Layout> {
        let d = cfg.d_model;
        let embed = self.param("embed".into(), &[cfg.vocab_size, d], Kind::Weight)?;
        let lang = self.param("lang".into(), &[Lang::ALL.len(), d], Kind::Weight)?;
        let conv = match cfg.input {
            InputMode::Text => None,
            InputMode::Features { feat_dim } => Some([self.linear("conv1", 3 * feat_dim, d)?, self.linear("conv2", 3 * d, d)?]),
        };
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Ok(EncLayer {
                    ln1: self.norm(&format!("{p}.ln1"), d)?,
                    attn: self.attn(&format!("{p}.attn"), d)?,
                    ln2: self.norm(&format!("{p}.ln2"), d)?,
                    ff1: self.linear(&format!("{p}.ff1"), d, cfg.d_ff)?,
                    ff2: self.linear(&format!("{p}.ff2"), cfg.d_ff, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = self.norm("enc.ln", d)?;
        let ar = self.decoder("ar", cfg)?;
        let nar = if cfg.nar { Some(self.decoder("nar", cfg)?) } else { None };
        let out = self.linear("out", d, cfg.vocab_size)?;
        let length = if cfg.nar { Some(self.linear("len", d, cfg.max_len)?) } else { None };
        Ok(Layout { embed, lang, conv, enc, enc_ln, ar, nar, out, length })
    }
}

/// Encoder output for a batch: stacked states and one segment per input.
pub struct Encoded {
    pub states: Var,
    pub segs: Vec<Segment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Ar,
    Nar,
}

/// Which parameters `init_from` copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transfer {
    /// Convolution front end and encoder stack.
    Encoder,
    /// AR decoder plus the shared embedding, language embeddings and output projection.
    Decoder,
}

impl Transfer {
    fn covers(self, name: &str) -> bool {
        match self {
            Transfer::Encoder => name.starts_with("enc.") || name.starts_with("conv"),
            Transfer::Decoder => name.starts_with("ar.") || name.starts_with("out.") || name == "embed" || name == "lang",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub cfg: TransformerConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl PartialEq for Seq2SeqModel {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

/// Sinusoidal position code for `pos`, added into `row`.
fn add_position(row: &mut [f64], pos: usize) {
    let d = row.len();
    for (i, v) in row.iter_mut().enumerate() {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        *v += if i % 2 == 0 { a.sin() } else { a.cos() };
    }
}

fn positions(segs: &[Segment], d: usize) -> Result<Tensor> {
    let rows: usize = segs.iter().map(|s| s.len).sum();
    let mut data = vec![0.0; rows * d];
    for s in segs {
        for p in 0..s.len {
            add_position(&mut data[(s.offset + p) * d..(s.offset + p + 1) * d], p);
        }
    }
    Ok(Tensor::matrix(rows, d, data)?)
}

/// Output length of the convolution front end: two stride-2 halvings.
pub fn downsampled_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

impl Seq2SeqModel {
    /// Weights `N(0, 0.02)`, biases 0, layer-norm gains 1.
    pub fn init(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let layout = Builder { store: &mut params, init: Some((ChaCha8Rng::seed_from_u64(seed), normal)) }.layout(&cfg)?;
        Ok(Self { cfg, params, layout })
    }

    pub fn from_params(cfg: TransformerConfig, mut params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let layout = Builder { store: &mut params, init: None }.layout(&cfg)?;
        let expected = Self::init(cfg.clone(), 0)?.params.len();
        if params.len() != expected {
            return Err(Error::Config(format!("checkpoint has {} parameters, config expects {expected}", params.len())));
        }
        Ok(Self { cfg, params, layout })
    }

    pub fn has_nar(&self) -> bool {
        self.layout.nar.is_some()
    }

    fn config_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the binary checkpoint at `path` and the config as `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), &self.params)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(Self::config_path(path))?), &self.cfg)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TransformerConfig = serde_json::from_reader(BufReader::new(File::open(Self::config_path(path))?))?;
        let params = read_checkpoint(BufReader::new(File::open(path)?))?;
        Self::from_params(cfg, params)
    }

    /// Copies the parameters selected by `part` from `other`; names and shapes must match.
    pub fn init_from(&mut self, other: &Seq2SeqModel, part: Transfer) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<ParamId> = self.params.ids().filter(|&id| part.covers(self.params.name(id))).collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let src = other.params.id(&name).ok_or_else(|| Error::Config(format!("source model lacks {name}")))?;
            let value = other.params.get(src);
            if value.shape() != self.params.get(id).shape() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", value.shape(), self.params.get(id).shape())));
            }
            *self.params.get_mut(id) = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// SHA-256 over the checkpoint bytes; identifies a generator in manifests.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.params)?;
        Ok(hex::encode(Sha256::digest(&buf)))
    }

    fn lin(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let gamma = g.param(&self.params, n.g);
        let beta = g.param(&self.params, n.b);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    fn mha(&self, g: &mut Graph, xq: Var, xkv: Var, a: Attn, layout: Rc<AttnLayout>) -> Result<Var> {
        let q = self.lin(g, xq, a.q)?;
        let k = self.lin(g, xkv, a.k)?;
        let v = self.lin(g, xkv, a.v)?;
        let att = g.attention(q, k, v, layout)?;
        self.lin(g, att, a.o)
    }

    fn ffn(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear, drop: &mut Dropout) -> Result<Var> {
        let h = self.lin(g, x, ff1)?;
        let h = g.relu(h)?;
        let h = drop.apply(g, h)?;
        self.lin(g, h, ff2)
    }

    fn residual(&self, g: &mut Graph, x: Var, y: Var, drop: &mut Dropout) -> Result<Var> {
        let y = drop.apply(g, y)?;
        Ok(g.add(x, y)?)
    }

    fn embed_tokens(&self, g: &mut Graph, ids: &[usize], segs: &[Segment]) -> Result<Var> {
        let table = g.param(&self.params, self.layout.embed);
        let e = g.gather(table, ids)?;
        let e = g.scale(e, (self.cfg.d_model as f64).sqrt())?;
        let pe = g.constant(positions(segs, self.cfg.d_model)?)?;
        Ok(g.add(e, pe)?)
    }

    fn check_token(&self, t: TokenId) -> Result<usize> {
        if (t as usize) < self.cfg.vocab_size {
            Ok(t as usize)
        } else {
            Err(Error::UnknownToken(format!("id {t} outside vocabulary of {}", self.cfg.vocab_size)))
        }
    }

    pub fn encode(&self, g: &mut Graph, inputs: &[&Source], drop: &mut Dropout) -> Result<Encoded> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = inputs.iter().position(|s| s.is_empty()) {
            return Err(Error::Shape(format!("input {i} is empty")));
        }
        let d = self.cfg.d_model;
        let (mut x, segs) = match (self.cfg.input, &self.layout.conv) {
            (InputMode::Text, _) => {
                let mut ids = Vec::new();
                for s in inputs {
                    let Source::Tokens(t) = s else {
                        return Err(Error::Config("text-mode model given frame features".into()));
                    };
                    for &tok in t {
                        ids.push(self.check_token(tok)?);
                    }
                }
                let segs = Segment::stack(inputs.iter().map(|s| s.len()));
                (self.embed_tokens(g, &ids, &segs)?, segs)
            }
            (InputMode::Features { feat_dim }, Some([c1, c2])) => {
                let mut data = Vec::new();
                for s in inputs {
                    let Source::Features(f) = s else {
                        return Err(Error::Config("feature-mode model given token ids".into()));
                    };
                    if f.feat_dim() != feat_dim {
                        return Err(Error::Shape(format!("features have dim {}, model expects {feat_dim}", f.feat_dim())));
                    }
                    data.extend(f.data().iter().map(|&v| v as f64));
                }
                let in_segs = Segment::stack(inputs.iter().map(|s| s.len()));
                let rows = data.len() / feat_dim;
                let feats = g.constant(Tensor::matrix(rows, feat_dim, data)?)?;
                let (w1, s1) = g.conv_windows(feats, &in_segs)?;
                let h = self.lin(g, w1, *c1)?;
                let h = g.relu(h)?;
                let (w2, s2) = g.conv_windows(h, &s1)?;
                let h = self.lin(g, w2, *c2)?;
                let h = g.relu(h)?;
                let pe = g.constant(positions(&s2, d)?)?;
                (g.add(h, pe)?, s2)
            }
            _ => unreachable!("feature mode always builds the convolution front end"),
        };
        x = drop.apply(g, x)?;
        let layout = Rc::new(AttnLayout::self_attention(&segs, self.cfg.heads, false));
        for l in &self.layout.enc {
            let h = self.norm(g, x, l.ln1)?;
            let h = self.mha(g, h, h, l.attn, layout.clone())?;
            x = self.residual(g, x, h, drop)?;
            let h = self.norm(g, x, l.ln2)?;
            let h = self.ffn(g, h, l.ff1, l.ff2, drop)?;
            x = self.residual(g, x, h, drop)?;
        }
        let states = self.norm(g, x, self.layout.enc_ln)?;
        Ok(Encoded { states, segs })
    }

    /// Logits `[Σ len × V]` for decoder inputs `seqs`, each conditioned on encoder
    /// segment `enc_of[i]` and steered by the embedding of `langs[i]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        kind: DecoderKind,
        enc: &Encoded,
        enc_of: &[usize],
        seqs: &[&[TokenId]],
        langs: &[Lang],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if seqs.len() != enc_of.len() || seqs.len() != langs.len() {
            return Err(Error::Shape("decoder batch fields differ in length".into()));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("empty decoder input".into()));
        }
        let dec = match kind {
            DecoderKind::Ar => &self.layout.ar,
            DecoderKind::Nar => self.layout.nar.as_ref().ok_or_else(|| Error::Config("model has no NAR decoder".into()))?,
        };
        let segs = Segment::stack(seqs.iter().map(|s| s.len()));
        let key_segs = enc_of
            .iter()
            .map(|&e| enc.segs.get(e).copied().ok_or_else(|| Error::Shape(format!("encoder segment {e} missing"))))
            .collect::<Result<Vec<_>>>()?;
        let mut ids = Vec::new();
        let mut lang_rows = Vec::new();
        for (s, lang) in seqs.iter().zip(langs) {
            for &t in s.iter() {
                ids.push(self.check_token(t)?);
                lang_rows.push(lang.index());
            }
        }
        let x = self.embed_tokens(g, &ids, &segs)?;
        let lang_table = g.param(&self.params, self.layout.lang);
        let le = g.gather(lang_table, &lang_rows)?;
        let mut x = g.add(x, le)?;
        x = drop.apply(g, x)?;
        let self_layout = Rc::new(AttnLayout::self_attention(&segs, self.cfg.heads, kind == DecoderKind::Ar));
        let cross_layout = Rc::new(AttnLayout::cross_attention(&segs, &key_segs, self.cfg.heads));
        for l in &dec.layers {
            let h = self.norm(g, x, l.ln1)?;
            let h = self.mha(g, h, h, l.self_attn, self_layout.clone())?;
            x = self.residual(g, x, h, drop)?;
            let h = self.norm(g, x, l.ln2)?;
            let h = self.mha(g, h, enc.states, l.cross, cross_layout.clone())?;
            x = self.residual(g, x, h, drop)?;
            let h = self.norm(g, x, l.ln3)?;
            let h = self.ffn(g, h, l.ff1, l.ff2, drop)?;
            x = self.residual(g, x, h, drop)?;
        }
        let h = self.norm(g, x, dec.ln)?;
        self.lin(g, h, self.layout.out)
    }

    /// Length-class logits `[B × max_len]` (class `c` is length `c + 1`) from the
    /// mean-pooled encoder states plus the language embedding.
    pub fn length_logits(&self, g: &mut Graph, enc: &Encoded, enc_of: &[usize], langs: &[Lang]) -> Result<Var> {
        let head = self.layout.length.ok_or_else(|| Error::Config("model has no length head".into()))?;
        let segs = enc_of
            .iter()
            .map(|&e| enc.segs.get(e).copied().ok_or_else(|| Error::Shape(format!("encoder segment {e} missing"))))
            .collect::<Result<Vec<_>>>()?;
        let pooled = g.mean_pool(enc.states, &segs)?;
        let lang_table = g.param(&self.params, self.layout.lang);
        let le = g.gather(lang_table, &langs.iter().map(|l| l.index()).collect::<Vec<_>>())?;
        let h = g.add(pooled, le)?;
        self.lin(g, h, head)
    }

    /// Token ids that may appear in generated output (EOS excluded).
    pub fn is_content(&self, id: usize) -> bool {
        id >= self.cfg.num_reserved
    }
}

/// Element-wise mean of the parameters of models with identical configs.
pub fn average_checkpoints(models: &[&Seq2SeqModel]) -> Result<Seq2SeqModel> {
    let first = models.first().ok_or(Error::EmptyInput)?;
    if models.iter().any(|m| m.cfg != first.cfg) {
        return Err(Error::Shape("cannot average models with different configs".into()));
    }
    let stores: Vec<&ParamStore> = models.iter().map(|m| &m.params).collect();
    let params = ParamStore::average(&stores)?;
    Ok(Seq2SeqModel { cfg: first.cfg.clone(), params, layout: first.layout.clone() })
}
