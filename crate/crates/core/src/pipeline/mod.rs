//! Command orchestration: resolved run configuration, metric streams and
//! the pipeline verbs driven by the `atm` binary.

pub mod commands;
pub mod config;
pub mod metrics;

pub use commands::{
    analyze_mask, probe, pretrain, run_pretrain, score, sweep, sweep_spread, synth_data, train_scorer, MaskAnalysis,
    MaskAnalysisRow, PretrainData, ProbeReport, SweepRow,
};
pub use config::{Command, RunConfig};
pub use metrics::{read_metrics, Header, MetricsRecord, MetricsWriter};
