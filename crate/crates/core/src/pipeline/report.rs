use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{RowId, RowRecipe};
use super::run::RowManifest;
use crate::corpus::Variant;
use crate::distill::QualityReport;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub variant: Variant,
    /// Target given source.
    pub forward: f64,
    /// Source given target.
    pub backward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRow {
    pub variant: Variant,
    pub forward: f64,
    pub backward: f64,
    /// Conditioning words without a distilled row, per direction.
    pub missing_rows: [usize; 2],
}

/// Conditional entropy per variant and faithfulness per distilled variant; the
/// real corpus has no faithfulness row since it is zero by definition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisTable {
    pub entropy: Vec<EntropyRow>,
    pub faithfulness: Vec<FaithfulnessRow>,
    /// Whether F(->bidir) lies between F(->fwd) and F(->bwd); `None` if a variant is missing.
    pub bidir_between: Option<bool>,
    pub warnings: Vec<String>,
}

impl AnalysisTable {
    pub fn entropy_of(&self, v: &Variant) -> Option<&EntropyRow> {
        self.entropy.iter().find(|r| &r.variant == v)
    }

    pub fn faithfulness_of(&self, v: &Variant) -> Option<&FaithfulnessRow> {
        self.faithfulness.iter().find(|r| &r.variant == v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSeedResult {
    pub seed: u64,
    /// Test BLEU per decoding setting (`bleu` for AR rows, `T=<n>` for NAR rows).
    pub scores: BTreeMap<String, f64>,
    pub error: Option<String>,
    pub manifest: Option<RowManifest>,
}

impl RowSeedResult {
    pub fn failed(seed: u64, error: String) -> Self {
        Self { seed, scores: BTreeMap::new(), error: Some(error), manifest: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub row: RowId,
    pub description: String,
    pub recipe: RowRecipe,
    pub per_seed: Vec<RowSeedResult>,
    /// Mean and sample standard deviation over the seeds that succeeded.
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RowReport {
    pub fn aggregate(row: RowId, lambda_src: f64, per_seed: Vec<RowSeedResult>) -> Self {
        let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in per_seed.iter().filter(|r| r.error.is_none()) {
            for (k, v) in &r.scores {
                cols.entry(k.clone()).or_default().push(*v);
            }
        }
        let (mut mean, mut std) = (BTreeMap::new(), BTreeMap::new());
        for (k, xs) in cols {
            let (m, s) = mean_std(&xs);
            mean.insert(k.clone(), m);
            std.insert(k, s);
        }
        Self { row, description: row.description().into(), recipe: RowRecipe::of(row, lambda_src), per_seed, mean, std }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Beam-search test BLEU of the forward and backward text models.
    pub mt_test_bleu: Option<(f64, f64)>,
    /// Distilled translations against the originals (fwd) and paraphrases against
    /// the original transcriptions (bwd).
    pub quality: Vec<(Variant, QualityReport)>,
    pub analysis: Option<AnalysisTable>,
    pub error: Option<String>,
}

/// Full matrix result. Wall-clock times are kept out so equal configs give equal bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowReport>,
    pub seed_reports: Vec<SeedReport>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn new(config_fingerprint: String, seeds: Vec<u64>, rows: Vec<RowReport>, seed_reports: Vec<SeedReport>) -> Self {
        let mut warnings = Vec::new();
        for s in &seed_reports {
            if let Some(e) = &s.error {
                warnings.push(format!("seed {}: {e}", s.seed));
            }
            for w in s.analysis.iter().flat_map(|a| &a.warnings) {
                warnings.push(format!("seed {}: {w}", s.seed));
            }
        }
        for r in &rows {
            for f in r.per_seed.iter().filter(|f| f.error.is_some()) {
                warnings.push(format!("row {} seed {}: {}", r.row, f.seed, f.error.as_deref().unwrap_or_default()));
            }
        }
        Self { config_fingerprint, seeds, rows, seed_reports, warnings }
    }

    pub fn row(&self, id: RowId) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.row == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Experiment report\n\nconfig `{}`, seeds {:?}\n", &self.config_fingerprint[..12.min(self.config_fingerprint.len())], self.seeds);
        let base = self.row(RowId::A1).and_then(|r| r.mean.get("bleu")).copied();
        let ar: Vec<&RowReport> = self.rows.iter().filter(|r| !r.recipe.nar && !is_ablation(r.row)).collect();
        if !ar.is_empty() {
            md.push_str("## Autoregressive rows\n\n| ID | Model | Data | lambda_src | BLEU (mean ± std) | Δ vs A1 |\n|---|---|---|---|---|---|\n");
            for r in ar {
                md.push_str(&ar_line(r, base));
            }
            md.push('\n');
        }
        let nar: Vec<&RowReport> = self.rows.iter().filter(|r| r.recipe.nar).collect();
        if !nar.is_empty() {
            let mut keys: Vec<String> = nar.iter().flat_map(|r| r.mean.keys().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            keys.sort_by_key(|k| (k.len(), k.clone()));
            md.push_str("## Non-autoregressive rows\n\n| Model | Data |");
            for k in &keys {
                let _ = write!(md, " BLEU {k} |");
            }
            md.push_str("\n|---|---|");
            md.push_str(&"---|".repeat(keys.len()));
            md.push('\n');
            for r in nar {
                let _ = write!(md, "| {} | {} |", r.description, data_label(&r.recipe));
                for k in &keys {
                    let _ = write!(md, " {} |", cell(r, k));
                }
                md.push('\n');
            }
            md.push('\n');
        }
        let abl: Vec<&RowReport> = self.rows.iter().filter(|r| is_ablation(r.row)).collect();
        if !abl.is_empty() {
            md.push_str("## Two-reference ablation\n\n| ID | Data | lambda_src | BLEU (mean ± std) | Δ vs A1 |\n|---|---|---|---|---|\n");
            for r in abl {
                let _ = writeln!(md, "| {} | {} | {} | {} | {} |", r.row, data_label(&r.recipe), r.recipe.lambda_src, cell(r, "bleu"), delta(r, base));
            }
            md.push('\n');
        }
        md.push_str(&self.analysis_markdown());
        if !self.warnings.is_empty() {
            md.push_str("## Warnings\n\n");
            for w in &self.warnings {
                let _ = writeln!(md, "- {w}");
            }
        }
        md
    }

    fn analysis_markdown(&self) -> String {
        let tables: Vec<&AnalysisTable> = self.seed_reports.iter().filter_map(|s| s.analysis.as_ref()).collect();
        if tables.is_empty() {
            return String::new();
        }
        let mut md = String::from("## Conditional entropy (mean over seeds)\n\n| Data | C(→) | C(←) |\n|---|---|---|\n");
        for v in [Variant::Real, Variant::Fwd, Variant::Bwd, Variant::Bidir] {
            let rows: Vec<&EntropyRow> = tables.iter().filter_map(|t| t.entropy_of(&v)).collect();
            if !rows.is_empty() {
                let f: Vec<f64> = rows.iter().map(|r| r.forward).collect();
                let b: Vec<f64> = rows.iter().map(|r| r.backward).collect();
                let _ = writeln!(md, "| {} | {} | {} |", variant_label(&v), pm(mean_std(&f)), pm(mean_std(&b)));
            }
        }
        md.push_str("\n## Faithfulness to the real corpus (mean over seeds)\n\n| Data | F(→) | F(←) |\n|---|---|---|\n");
        for v in [Variant::Fwd, Variant::Bwd, Variant::Bidir] {
            let rows: Vec<&FaithfulnessRow> = tables.iter().filter_map(|t| t.faithfulness_of(&v)).collect();
            if !rows.is_empty() {
                let f: Vec<f64> = rows.iter().map(|r| r.forward).collect();
                let b: Vec<f64> = rows.iter().map(|r| r.backward).collect();
                let _ = writeln!(md, "| {} | {} | {} |", variant_label(&v), pm(mean_std(&f)), pm(mean_std(&b)));
            }
        }
        let quality: Vec<&(Variant, QualityReport)> = self.seed_reports.iter().flat_map(|s| &s.quality).collect();
        if !quality.is_empty() {
            md.push_str("\n## Distilled text against the originals\n\n| Data | Side | BLEU | TER | Exact |\n|---|---|---|---|---|\n");
            for v in [Variant::Fwd, Variant::Bwd] {
                let q: Vec<&QualityReport> = quality.iter().filter(|(x, _)| *x == v).map(|(_, q)| q).collect();
                if let Some(first) = q.first() {
                    let col = |f: fn(&QualityReport) -> f64| pm(mean_std(&q.iter().map(|r| f(r)).collect::<Vec<_>>()));
                    let _ = writeln!(md, "| {} | {:?} | {} | {} | {} |", variant_label(&v), first.side, col(|r| r.bleu), col(|r| r.ter), col(|r| r.exact_match));
                }
            }
        }
        md.push('\n');
        md
    }
}

fn is_ablation(r: RowId) -> bool {
    RowId::ABLATION.contains(&r)
}

fn variant_label(v: &Variant) -> String {
    match v {
        Variant::Real => "D_real".into(),
        Variant::Fwd => "D_fwd".into(),
        Variant::Bwd => "D_bwd".into(),
        Variant::Bidir => "D_bidir".into(),
        Variant::Combined(p) => p.iter().map(variant_label).collect::<Vec<_>>().join(" + "),
    }
}

fn data_label(r: &RowRecipe) -> String {
    r.datasets.iter().map(variant_label).collect::<Vec<_>>().join(" + ")
}

fn pm((m, s): (f64, f64)) -> String {
    format!("{m:.4} ± {s:.4}")
}

fn cell(r: &RowReport, key: &str) -> String {
    match (r.mean.get(key), r.std.get(key)) {
        (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
        _ => "failed".into(),
    }
}

fn delta(r: &RowReport, base: Option<f64>) -> String {
    match (r.mean.get("bleu"), base) {
        (Some(m), Some(b)) => format!("{:+.2}", m - b),
        _ => "-".into(),
    }
}

fn ar_line(r: &RowReport, base: Option<f64>) -> String {
    format!("| {} | {} | {} | {} | {} | {} |\n", r.row, r.description, data_label(&r.recipe), r.recipe.lambda_src, cell(r, "bleu"), delta(r, base))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// Writes the report to `path` in the given format.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Markdown => report.to_markdown(),
    };
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(seed: u64, bleu: f64) -> RowSeedResult {
        RowSeedResult { seed, scores: [("bleu".to_string(), bleu)].into(), error: None, manifest: None }
    }

    fn sample() -> ExperimentReport {
        let rows = vec![
            RowReport::aggregate(RowId::A1, 0.3, vec![result(1, 10.0), result(2, 12.0), result(3, 14.0)]),
            RowReport::aggregate(RowId::B1, 0.3, vec![result(1, 11.5), RowSeedResult::failed(2, "boom".into()), result(3, 12.5)]),
            RowReport::aggregate(
                RowId::NarFwd,
                0.3,
                vec![RowSeedResult { seed: 1, scores: [("T=4".to_string(), 5.0), ("T=10".to_string(), 6.0)].into(), error: None, manifest: None }],
            ),
        ];
        let analysis = AnalysisTable {
            entropy: vec![EntropyRow { variant: Variant::Real, forward: 0.7, backward: 0.4 }],
            faithfulness: vec![FaithfulnessRow { variant: Variant::Fwd, forward: 0.1, backward: 0.2, missing_rows: [0, 1] }],
            bidir_between: None,
            warnings: vec!["variant bwd missing; row omitted".into()],
        };
        let seeds = vec![SeedReport { seed: 1, analysis: Some(analysis), mt_test_bleu: Some((80.0, 60.0)), ..Default::default() }];
        ExperimentReport::new("abc".into(), vec![1, 2, 3], rows, seeds)
    }

    #[test]
    fn aggregation_skips_failed_seeds() {
        let r = sample();
        let a1 = r.row(RowId::A1).unwrap();
        assert_eq!(a1.mean["bleu"], 12.0);
        assert_eq!(a1.std["bleu"], 2.0);
        let b1 = r.row(RowId::B1).unwrap();
        assert_eq!(b1.mean["bleu"], 12.0);
        assert_eq!(b1.per_seed.len(), 3);
        assert!(r.warnings.iter().any(|w| w.contains("row B1 seed 2: boom")));
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn json_round_trips() {
        let r = sample();
        assert_eq!(ExperimentReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn markdown_has_one_line_per_row_and_deltas() {
        let md = sample().to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| A1 ")).count(), 1);
        assert_eq!(md.lines().filter(|l| l.starts_with("| B1 ")).count(), 1);
        assert!(md.contains("| Fwd SeqKD | D_fwd | 5.00 ± 0.00 | 6.00 ± 0.00 |"));
        let b1 = md.lines().find(|l| l.starts_with("| B1 ")).unwrap();
        assert!(b1.ends_with("| +0.00 |"), "{b1}");
        let a1 = md.lines().find(|l| l.starts_with("| A1 ")).unwrap();
        assert!(a1.contains("12.00 ± 2.00") && a1.ends_with("| +0.00 |"));
        let faith = md.split("## Faithfulness").nth(1).unwrap().split("\n## ").next().unwrap();
        assert!(faith.contains("| D_fwd |") && !faith.contains("D_real"));
        assert!(md.contains("## Warnings"));
    }

    #[test]
    fn emit_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        emit_report(&r, ReportFormat::Json, &dir.path().join("r.json")).unwrap();
        emit_report(&r, ReportFormat::Markdown, &dir.path().join("r.md")).unwrap();
        let back = ExperimentReport::from_json(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(emit_report(&r, ReportFormat::Json, &dir.path().join("missing/r.json")).is_err());
    }
}
