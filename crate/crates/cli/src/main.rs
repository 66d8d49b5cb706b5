//! `seqkd`: run the experiment matrix end to end, or one stage at a time.
//!
//! Stage commands work on the per-seed directory `<out>/seed-<s>` and pick up
//! whatever earlier stages left there. Failures print a JSON error record on
//! stderr and exit nonzero.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use seqkd_core::corpus::Variant;
use seqkd_core::pipeline::{
    emit_report, parse_rows, report_paths, run_analysis, run_experiment, ExperimentConfig, ExperimentReport, ReportFormat, RowId,
    SeedRun,
};

#[derive(Parser)]
#[command(name = "seqkd", version, about = "Bidirectional SeqKD experiments on synthetic speech translation data")]
struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run one seed instead of every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated row names; `all` and `ablation` expand to groups.
    #[arg(long, global = true)]
    rows: Option<String>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy corpus, pseudo-speech and splits.
    GenData,
    /// Train the forward and backward MT teachers.
    TrainMt,
    /// Build the distilled datasets from the MT teachers.
    Distill,
    /// Train speech translation rows, pretraining the ASR encoder if needed.
    TrainSt,
    /// Decode the test split with trained rows.
    Decode,
    /// BLEU of decoded rows against the test references.
    Score,
    /// Conditional entropy and faithfulness of the real and distilled corpora.
    Analyze,
    /// Every stage for every seed and row, then the aggregated report.
    RunMatrix,
    /// Render a saved report.
    Report {
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Markdown,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.render().to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| match (c.downcast_ref::<seqkd_core::Error>(), c.downcast_ref::<std::io::Error>()) {
                    (Some(core), _) => Some(core.kind()),
                    (None, Some(_)) => Some("io"),
                    _ => None,
                })
                .unwrap_or("error");
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": kind, "message": format!("{e:#}"), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(list) = &cli.rows {
        let rows = parse_rows(list)?;
        cfg.ablation = false;
        cfg.rows = rows;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print(v: Value) {
    println!("{v}");
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::RunMatrix => return run_matrix(&cfg),
        Cmd::Report { format } => return report(&cfg, *format, cli.rows.is_some()),
        _ => {}
    }
    for &seed in &cfg.seeds {
        let run = SeedRun::new(&cfg, seed);
        let out = stage(&cli.cmd, &cfg, &run).with_context(|| format!("seed {seed}"))?;
        print(json!({ "seed": seed, "dir": run.dir, "result": out }));
    }
    Ok(())
}

fn stage(cmd: &Cmd, cfg: &ExperimentConfig, run: &SeedRun) -> Result<Value> {
    Ok(match cmd {
        Cmd::GenData => {
            let d = run.gen_data()?;
            json!({ "vocab": d.vocab.len(), "train": d.train.items.len(), "dev": d.dev.items.len(), "test": d.test.items.len() })
        }
        Cmd::TrainMt => {
            let data = run.load_data().context("no data; run gen-data first")?;
            let (mt, reports) = run.train_mt(&data)?;
            let (fwd, bwd) = run.mt_test_bleu(&mt, &data)?;
            json!({ "test_bleu": { "fwd": fwd, "bwd": bwd }, "averaged_epochs": [reports[0].averaged_epochs, reports[1].averaged_epochs] })
        }
        Cmd::Distill => {
            let data = run.load_data().context("no data; run gen-data first")?;
            let mt = run.load_mt().context("no MT models; run train-mt first")?;
            let d = run.distill(&data, &mt)?;
            let sizes: std::collections::BTreeMap<String, usize> = d.sets.iter().map(|(v, ds)| (v.to_string(), ds.items.len())).collect();
            json!({ "items": sizes })
        }
        Cmd::TrainSt => {
            let data = run.load_data().context("no data; run gen-data first")?;
            let distilled = run.load_distilled(&data).context("no distilled data; run distill first")?;
            let mt = run.load_mt().ok();
            let asr = match run.load_asr() {
                Ok(m) => m,
                Err(_) => run.pretrain_asr(&data)?.0,
            };
            let mut out = serde_json::Map::new();
            for row in cfg.all_rows() {
                let (_, report, manifest) =
                    run.train_row(row, &data, &distilled, &asr, mt.as_ref()).with_context(|| format!("row {row}"))?;
                out.insert(row.to_string(), json!({ "items": manifest.items_by_variant, "averaged_epochs": report.averaged_epochs }));
            }
            Value::Object(out)
        }
        Cmd::Decode => {
            let data = run.load_data().context("no data; run gen-data first")?;
            let mut out = serde_json::Map::new();
            for row in cfg.all_rows() {
                let (model, _) = run.load_row(row).with_context(|| format!("row {row} is not trained"))?;
                let hyps = run.decode_row(row, &model, &data.test, &data.vocab)?;
                out.insert(row.to_string(), json!(hyps.keys().collect::<Vec<_>>()));
            }
            Value::Object(out)
        }
        Cmd::Score => {
            let data = run.load_data().context("no data; run gen-data first")?;
            let mut out = serde_json::Map::new();
            for row in cfg.all_rows() {
                let hyps = run.load_hyps(row, &data.test, &data.vocab).with_context(|| format!("row {row} is not decoded"))?;
                out.insert(row.to_string(), json!(run.score_row(row, &hyps, &data.test)?));
            }
            Value::Object(out)
        }
        Cmd::Analyze => {
            let data = run.load_data().context("no data; run gen-data first")?;
            let mut sets = run.load_distilled(&data).map(|d| d.sets).unwrap_or_default();
            sets.insert(Variant::Real, data.train);
            let table = run_analysis(&sets, &cfg.align)?;
            let v = serde_json::to_value(&table)?;
            fs::write(run.dir.join("analysis.json"), serde_json::to_vec_pretty(&v)?)?;
            v
        }
        Cmd::RunMatrix | Cmd::Report { .. } => unreachable!("handled before the seed loop"),
    })
}

fn run_matrix(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let report = run_experiment(cfg)?;
    let (json_path, md_path) = report_paths(&cfg.out_dir);
    emit_report(&report, ReportFormat::Json, &json_path)?;
    emit_report(&report, ReportFormat::Markdown, &md_path)?;
    let secs = start.elapsed().as_secs_f64();
    fs::write(cfg.out_dir.join("timing.json"), serde_json::to_vec_pretty(&json!({ "runtime_seconds": secs }))?)?;
    let failed: Vec<String> =
        report.rows.iter().filter(|r| r.per_seed.iter().any(|s| s.error.is_some())).map(|r| r.row.to_string()).collect();
    print(json!({ "report": json_path, "markdown": md_path, "runtime_seconds": secs, "failed_rows": failed, "warnings": report.warnings.len() }));
    Ok(())
}

fn report(cfg: &ExperimentConfig, format: Format, check_rows: bool) -> Result<()> {
    let (json_path, md_path) = report_paths(&cfg.out_dir);
    let text = fs::read_to_string(&json_path).with_context(|| format!("reading {}; run run-matrix first", json_path.display()))?;
    let report = ExperimentReport::from_json(&text)?;
    let rows: Vec<RowId> = if check_rows { cfg.all_rows() } else { Vec::new() };
    if let Some(missing) = rows.iter().find(|r| report.row(**r).is_none()) {
        bail!("row {missing} is not in {}", json_path.display());
    }
    match format {
        Format::Json => println!("{}", report.to_json()?),
        Format::Markdown => {
            emit_report(&report, ReportFormat::Markdown, &md_path)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}
