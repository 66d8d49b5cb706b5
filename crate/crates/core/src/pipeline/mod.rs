//! Experiment matrix: toy data, text teachers, distilled datasets, speech
//! translation rows, corpus analysis and reports.

mod config;
mod report;
mod run;

pub use config::{parse_rows, ExperimentConfig, ModelSection, Preset, RowId, RowRecipe};
pub use report::{
    emit_report, mean_std, AnalysisTable, EntropyRow, ExperimentReport, FaithfulnessRow, ReportFormat, RowReport, RowSeedResult, SeedReport,
};
pub use run::{
    report_paths, run_analysis, run_experiment, run_seed, score_hyps, split_of, stage_seed, Distilled, MtModels, RowManifest, SeedRun, Split,
    SplitData,
};
