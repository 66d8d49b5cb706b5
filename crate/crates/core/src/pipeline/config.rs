use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignmetrics::AlignerOptions;
use crate::corpus::{Lang, SpeechConfig, ToyGenConfig, Variant, Vocabulary};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::{DecodeConfig, InputMode, TrainConfig, TransformerConfig};

/// Experiment rows. `A*` use only real data, `B*` forward-distilled data, `C*`
/// both directions; `Nar*` are non-autoregressive models; `Abl*` are the
/// two-reference concatenation ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowId {
    A1,
    A2,
    A3,
    A4,
    B1,
    B2,
    B3,
    B4,
    C1,
    C2,
    NarFwd,
    NarFwdJointAsr,
    NarBidir,
    AblStFwd,
    AblStBidir,
    AblBwdBidir,
    AblFwdBwd,
}

impl RowId {
    pub const MAIN: [RowId; 13] = [
        RowId::A1,
        RowId::A2,
        RowId::A3,
        RowId::A4,
        RowId::B1,
        RowId::B2,
        RowId::B3,
        RowId::B4,
        RowId::C1,
        RowId::C2,
        RowId::NarFwd,
        RowId::NarFwdJointAsr,
        RowId::NarBidir,
    ];
    pub const ABLATION: [RowId; 4] = [RowId::AblStFwd, RowId::AblStBidir, RowId::AblBwdBidir, RowId::AblFwdBwd];

    pub fn name(self) -> &'static str {
        match self {
            RowId::A1 => "A1",
            RowId::A2 => "A2",
            RowId::A3 => "A3",
            RowId::A4 => "A4",
            RowId::B1 => "B1",
            RowId::B2 => "B2",
            RowId::B3 => "B3",
            RowId::B4 => "B4",
            RowId::C1 => "C1",
            RowId::C2 => "C2",
            RowId::NarFwd => "NAR-fwd",
            RowId::NarFwdJointAsr => "NAR-fwd-jointASR",
            RowId::NarBidir => "NAR-bidir",
            RowId::AblStFwd => "ABL-st+fwd",
            RowId::AblStBidir => "ABL-st+bidir",
            RowId::AblBwdBidir => "ABL-bwd+bidir",
            RowId::AblFwdBwd => "ABL-fwd+bwd",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            RowId::A1 => "Baseline",
            RowId::A2 => "+ MT pre-training",
            RowId::A3 => "+ Joint ASR",
            RowId::A4 => "+ Bwd SeqKD",
            RowId::B1 => "A1 + Fwd SeqKD",
            RowId::B2 => "+ MT pre-training",
            RowId::B3 => "+ Joint ASR",
            RowId::B4 => "+ Original (2ref)",
            RowId::C1 => "A1 + Bidir SeqKD",
            RowId::C2 => "+ Original (2ref)",
            RowId::NarFwd => "Fwd SeqKD",
            RowId::NarFwdJointAsr => "+ Joint ASR",
            RowId::NarBidir => "Bidir SeqKD",
            RowId::AblStFwd => "D_st + D_fwd (joint ASR)",
            RowId::AblStBidir => "D_st + D_bidir",
            RowId::AblBwdBidir => "D_bwd + D_bidir",
            RowId::AblFwdBwd => "D_fwd + D_bwd",
        }
    }

    pub fn is_nar(self) -> bool {
        matches!(self, RowId::NarFwd | RowId::NarFwdJointAsr | RowId::NarBidir)
    }
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RowId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RowId::MAIN
            .iter()
            .chain(&RowId::ABLATION)
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown row `{s}`")))
    }
}

impl Serialize for RowId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RowId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated row list; `all` expands to the main rows, `ablation`
/// to the ablation rows.
pub fn parse_rows(list: &str) -> Result<Vec<RowId>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.to_ascii_lowercase().as_str() {
            "all" => out.extend(RowId::MAIN),
            "ablation" => out.extend(RowId::ABLATION),
            _ => out.push(part.parse()?),
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty row list".into()));
    }
    out.dedup();
    Ok(out)
}

/// How one row builds its training set and model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowRecipe {
    pub row: RowId,
    /// Datasets concatenated for training, in order.
    pub datasets: Vec<Variant>,
    /// Weight of the auxiliary transcription loss; its target is each item's source side.
    pub lambda_src: f64,
    /// Initialize the decoder from the forward MT model.
    pub mt_init: bool,
    pub nar: bool,
}

impl RowRecipe {
    pub fn of(row: RowId, lambda_src: f64) -> Self {
        use Variant::*;
        let (datasets, joint, mt_init) = match row {
            RowId::A1 => (vec![Real], false, false),
            RowId::A2 => (vec![Real], false, true),
            RowId::A3 => (vec![Real], true, false),
            RowId::A4 => (vec![Bwd], true, false),
            RowId::B1 => (vec![Fwd], false, false),
            RowId::B2 => (vec![Fwd], false, true),
            RowId::B3 => (vec![Fwd], true, false),
            RowId::B4 => (vec![Real, Fwd], false, false),
            RowId::C1 => (vec![Bidir], true, false),
            RowId::C2 => (vec![Fwd, Bwd], true, false),
            RowId::NarFwd => (vec![Fwd], false, false),
            RowId::NarFwdJointAsr => (vec![Fwd], true, false),
            RowId::NarBidir => (vec![Bidir], true, false),
            RowId::AblStFwd => (vec![Real, Fwd], true, false),
            RowId::AblStBidir => (vec![Real, Bidir], true, false),
            RowId::AblBwdBidir => (vec![Bwd, Bidir], true, false),
            RowId::AblFwdBwd => (vec![Fwd, Bwd], true, false),
        };
        Self { row, datasets, lambda_src: if joint { lambda_src } else { 0.0 }, mt_init, nar: row.is_nar() }
    }

    pub fn uses_distilled(&self) -> bool {
        self.datasets.iter().any(|v| *v != Variant::Real)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Desk,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Layer sizes: toy (1/1 layers, d=32), desk (2/2, d=64) or full (12/6, d=256).
    pub preset: Preset,
    pub dropout: f64,
    /// Output length cap in tokens and number of length classes.
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: Preset::Toy, dropout: 0.1, max_len: 12 }
    }
}

impl ModelSection {
    pub fn build(&self, vocab: &Vocabulary, input: InputMode, target: Lang) -> TransformerConfig {
        let base = match self.preset {
            Preset::Toy => TransformerConfig::toy(vocab, input, target),
            Preset::Desk => TransformerConfig::desk(vocab, input, target),
            Preset::Full => TransformerConfig::full(vocab, input, target),
        };
        TransformerConfig { dropout: self.dropout, max_len: self.max_len, ..base }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: ToyGenConfig,
    pub speech: SpeechConfig,
    pub model: ModelSection,
    /// Forward and backward text models.
    pub mt_train: TrainConfig,
    /// Encoder pre-training on transcriptions.
    pub asr_train: TrainConfig,
    /// Speech translation rows; `lambda_src` is the joint-row weight.
    pub st_train: TrainConfig,
    /// Test decoding; NAR rows run mask-predict once per entry of `nar_iterations`.
    pub decode: DecodeConfig,
    pub nar_iterations: Vec<usize>,
    pub distill: DistillConfig,
    pub align: AlignerOptions,
    pub rows: Vec<RowId>,
    /// Also run the four concatenation ablation rows.
    pub ablation: bool,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mt_train =
            TrainConfig { epochs: 40, batch_size: 32, warmup: 200, lr_factor: 1.0, keep_best: 5, lambda_src: 0.0, ..Default::default() };
        Self {
            data: ToyGenConfig { synonym_skew: 1.0, ..Default::default() },
            speech: SpeechConfig { repeat_min: 3, repeat_max: 5, ..Default::default() },
            model: ModelSection::default(),
            mt_train: mt_train.clone(),
            asr_train: TrainConfig { epochs: 15, ..mt_train.clone() },
            st_train: TrainConfig { epochs: 30, lambda_src: 0.3, ..mt_train },
            decode: DecodeConfig { beam: 4, iterations: 10, length_beam: 9, max_len: 12 },
            nar_iterations: vec![4, 10],
            distill: DistillConfig { beam: 4, max_len: 12, ..Default::default() },
            align: AlignerOptions::default(),
            rows: RowId::MAIN.to_vec(),
            ablation: true,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.mt_train.validate()?;
        self.asr_train.validate()?;
        self.st_train.validate()?;
        self.decode.validate()?;
        self.distill.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.rows.is_empty() && !self.ablation {
            return Err(Error::Config("no rows selected".into()));
        }
        if self.nar_iterations.contains(&0) {
            return Err(Error::Config("mask-predict iterations must be >= 1".into()));
        }
        if self.rows.iter().any(|r| r.is_nar()) && (self.nar_iterations.is_empty() || self.decode.length_beam > self.model.max_len) {
            return Err(Error::Config("NAR rows need iterations and a length beam within max_len".into()));
        }
        if self.data.max_len + usize::from(self.data.case_marker) > self.model.max_len {
            return Err(Error::Config(format!("sentences up to {} tokens exceed model max_len {}", self.data.max_len, self.model.max_len)));
        }
        Ok(())
    }

    /// Rows to run: selected main rows, then the ablation rows if enabled.
    pub fn all_rows(&self) -> Vec<RowId> {
        let mut rows = self.rows.clone();
        if self.ablation {
            rows.extend(RowId::ABLATION.iter().filter(|r| !self.rows.contains(r)));
        }
        rows
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipes_follow_the_row_definitions() {
        let r = |row| RowRecipe::of(row, 0.3);
        assert_eq!((r(RowId::A1).datasets, r(RowId::A1).lambda_src, r(RowId::A1).mt_init), (vec![Variant::Real], 0.0, false));
        assert!(r(RowId::A2).mt_init);
        assert_eq!(r(RowId::A3).lambda_src, 0.3);
        assert_eq!((r(RowId::A4).datasets, r(RowId::A4).lambda_src), (vec![Variant::Bwd], 0.3));
        assert_eq!(r(RowId::C2).datasets, vec![Variant::Fwd, Variant::Bwd]);
        assert_eq!(r(RowId::B4).datasets, vec![Variant::Real, Variant::Fwd]);
        for row in [RowId::A1, RowId::A2, RowId::A3] {
            assert!(!r(row).uses_distilled());
        }
        for row in [RowId::B1, RowId::B2, RowId::B3, RowId::B4] {
            assert!(r(row).datasets.contains(&Variant::Fwd));
            assert!(!r(row).datasets.iter().any(|v| matches!(v, Variant::Bwd | Variant::Bidir)));
        }
        for row in [RowId::C1, RowId::C2] {
            let d = r(row).datasets;
            assert!(d.contains(&Variant::Bidir) || (d.contains(&Variant::Fwd) && d.contains(&Variant::Bwd)));
        }
        assert!(RowId::MAIN.iter().filter(|r| r.is_nar()).all(|&row| r(row).nar));
    }

    #[test]
    fn row_names_round_trip() {
        for r in RowId::MAIN.iter().chain(&RowId::ABLATION) {
            assert_eq!(r.name().parse::<RowId>().unwrap(), *r);
        }
        assert_eq!(parse_rows("A1, b1").unwrap(), vec![RowId::A1, RowId::B1]);
        assert_eq!(parse_rows("ablation").unwrap(), RowId::ABLATION.to_vec());
        assert_eq!(parse_rows("all").unwrap().len(), 13);
        assert!(parse_rows("Z9").is_err());
        assert!(parse_rows(" , ").is_err());
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let c = ExperimentConfig::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), c);
        let partial = ExperimentConfig::from_toml_str("seeds = [7]\nrows = [\"A1\", \"B1\"]\n[data]\nsize = 100\n").unwrap();
        assert_eq!((partial.seeds.clone(), partial.data.size, partial.data.synonyms), (vec![7], 100, 3));
        assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml_str("rows = [\"Q\"]").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\nmax_len = 20").is_err());
        let mut moved = c.clone();
        moved.out_dir = "elsewhere".into();
        assert_eq!(moved.fingerprint().unwrap(), c.fingerprint().unwrap());
        let mut other = c.clone();
        other.seeds = vec![9];
        assert_ne!(other.fingerprint().unwrap(), c.fingerprint().unwrap());
    }

    #[test]
    fn shipped_config_documents_the_defaults() {
        let shipped = ExperimentConfig::from_toml_str(include_str!("../../../../configs/default.toml")).unwrap();
        assert_eq!(shipped, ExperimentConfig::default());
    }

    #[test]
    fn ablation_rows_are_exactly_four() {
        let c = ExperimentConfig { rows: vec![RowId::A1], ..Default::default() };
        let rows = c.all_rows();
        assert_eq!(rows, vec![RowId::A1, RowId::AblStFwd, RowId::AblStBidir, RowId::AblBwdBidir, RowId::AblFwdBwd]);
        let sets: Vec<Vec<Variant>> = RowId::ABLATION.iter().map(|&r| RowRecipe::of(r, 0.3).datasets).collect();
        use Variant::*;
        assert_eq!(sets, vec![vec![Real, Fwd], vec![Real, Bidir], vec![Bwd, Bidir], vec![Fwd, Bwd]]);
    }
}
