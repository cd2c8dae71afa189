//! `atm`: corpus synthesis, scorer training, confidence-guided MSM
//! pretraining, sweeps, mask analysis and CTC probing.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atm_core::masking::StrategyKind;
use atm_core::msm::{ScaleMode, Variant};
use atm_core::par::Execution;
use atm_core::pipeline::{self, sweep_spread, RunConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "atm", version, about = "Confidence-guided masked speech pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Verb,

    /// JSON config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    scorer_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    strategy: Option<StrategyKind>,
    #[arg(long, global = true)]
    mask_fraction: Option<f64>,
    #[arg(long, global = true)]
    context: Option<usize>,
    #[arg(long, global = true)]
    scale_mode: Option<ScaleMode>,
    #[arg(long, global = true)]
    frame_participation: Option<f64>,
    /// Training steps of the verb being run.
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    record_wall_time: bool,
    /// Arbitrary override as `dotted.path=json`, e.g. `model.d=64`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate a labelled synthetic corpus (WAV files plus manifest).
    SynthData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        /// `clean` or `shifted`.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Train the CTC confidence scorer.
    TrainScorer {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Write the per-frame confidence cache for a corpus.
    Score,
    /// Masked speech model pretraining.
    Pretrain {
        #[arg(long)]
        resume: bool,
    },
    /// Pretraining runs over mask fractions and strategies.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<StrategyKind>>,
    },
    /// Mask-plan statistics per strategy, without training.
    AnalyzeMask {
        #[arg(long)]
        plans: Option<usize>,
    },
    /// Train a linear CTC head on frozen representations and report TER.
    Probe {
        #[arg(long)]
        train_manifest: Option<PathBuf>,
        #[arg(long = "eval-manifest")]
        eval_manifests: Vec<PathBuf>,
    },
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("--set {path}: `{part}` is not inside an object"))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("--set {path}: unknown field `{part}`");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .with_context(|| format!("--set {path}: unknown field `{part}`"))?;
    }
    Ok(())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if o.manifest.is_some() {
        cfg.manifest = o.manifest.clone();
    }
    if o.scorer_checkpoint.is_some() {
        cfg.scorer_checkpoint = o.scorer_checkpoint.clone();
    }
    if o.cache.is_some() {
        cfg.confidence_cache = o.cache.clone();
    }
    if o.checkpoint.is_some() {
        cfg.msm_checkpoint = o.checkpoint.clone();
    }
    if let Some(v) = o.variant {
        cfg.model.variant = v;
    }
    let p = &mut cfg.pretrain;
    p.strategy = o.strategy.unwrap_or(p.strategy);
    p.mask_fraction = o.mask_fraction.unwrap_or(p.mask_fraction);
    p.context = o.context.unwrap_or(p.context);
    p.scale_mode = o.scale_mode.unwrap_or(p.scale_mode);
    p.frame_participation = o.frame_participation.unwrap_or(p.frame_participation);
    cfg.record_wall_time |= o.record_wall_time;
    if let Some(steps) = o.steps {
        match cli.command {
            Verb::TrainScorer { .. } => cfg.scorer_training.steps = steps,
            Verb::Probe { .. } => cfg.probe.steps = steps,
            _ => cfg.pretrain.steps = steps,
        }
    }
    if let Some(b) = o.batch_size {
        match cli.command {
            Verb::TrainScorer { .. } => cfg.scorer_training.batch_size = b,
            Verb::Probe { .. } => cfg.probe.batch_size = b,
            _ => cfg.pretrain.batch_size = b,
        }
    }
    match &cli.command {
        Verb::SynthData { count, vocab, domain } => {
            cfg.corpus.count = count.unwrap_or(cfg.corpus.count);
            cfg.corpus.vocab = vocab.unwrap_or(cfg.corpus.vocab);
            match domain.as_deref() {
                None => {}
                Some("clean") => cfg.corpus.domain = atm_core::features::DomainConfig::clean(),
                Some("shifted") => cfg.corpus.domain = atm_core::features::DomainConfig::shifted(),
                Some(other) => bail!("config error: unknown domain `{other}` (clean|shifted)"),
            }
        }
        Verb::Sweep { fractions, strategies } => {
            if let Some(f) = fractions {
                cfg.sweep.fractions = f.clone();
            }
            if let Some(s) = strategies {
                cfg.sweep.strategies = s.clone();
            }
        }
        Verb::AnalyzeMask { plans } => cfg.analysis.plans = plans.unwrap_or(cfg.analysis.plans),
        Verb::Probe {
            train_manifest,
            eval_manifests,
        } => {
            if train_manifest.is_some() {
                cfg.probe.train_manifest = train_manifest.clone();
            }
            if !eval_manifests.is_empty() {
                cfg.probe.eval_manifests = eval_manifests.clone();
            }
        }
        _ => {}
    }
    if !o.set.is_empty() {
        let mut value = cfg.to_json();
        for entry in &o.set {
            let (path, raw) = entry
                .split_once('=')
                .with_context(|| format!("--set {entry}: expected PATH=VALUE"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        cfg = serde_json::from_value(value).context("config error: --set produced an invalid config")?;
    }
    Ok(cfg)
}

fn init_workers() -> Result<()> {
    if let Ok(raw) = std::env::var("ATM_NUM_WORKERS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("ATM_NUM_WORKERS={raw} is not a positive integer"))?;
        if n == 0 {
            bail!("ATM_NUM_WORKERS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    if cli.dump_config {
        println!("{}", cfg.to_pretty());
        return Ok(());
    }
    init_workers()?;
    let exec = Execution::Parallel;
    let out = &cli.out;
    match cli.command {
        Verb::SynthData { .. } => {
            let manifest = pipeline::synth_data(&cfg, out, exec)?;
            println!("{}", manifest.display());
        }
        Verb::TrainScorer { resume } => {
            let run = pipeline::train_scorer(&cfg, out, exec, resume)?;
            if let Some(last) = run.log.last() {
                println!("step {} ctc_loss {:.4}", last.step, last.ctc_loss);
            }
            println!("{}", run.checkpoint.display());
        }
        Verb::Score => {
            let records = pipeline::score(&cfg, out, exec)?;
            println!("scored {} utterances", records.len());
        }
        Verb::Pretrain { resume } => {
            let records = pipeline::pretrain(&cfg, out, exec, resume)?;
            if let Some(last) = records.last() {
                println!(
                    "step {} l_total {:.4} msm_accuracy {:.3} codebook_usage {:.1}%",
                    last.step, last.l_total, last.msm_accuracy, last.codebook_usage_pct
                );
            }
        }
        Verb::Sweep { .. } => {
            let rows = pipeline::sweep(&cfg, out, exec)?;
            for r in &rows {
                println!(
                    "{} p={} l_total {:.4} coverage {:.3}",
                    r.strategy, r.fraction, r.l_total, r.realized_coverage
                );
            }
            for (strategy, spread) in sweep_spread(&rows) {
                println!("{strategy}: l_total spread across fractions {spread:.4}");
            }
        }
        Verb::AnalyzeMask { .. } => {
            let analysis = pipeline::analyze_mask(&cfg, out, exec)?;
            for s in &analysis.strategies {
                println!(
                    "{}: mean masked confidence {:.4} over {} plans",
                    s.strategy, s.mean_masked_confidence, s.plans
                );
            }
            for t in &analysis.ordering {
                println!("{} > {}: p = {:.3e}", t.greater, t.lesser, t.result.p_value);
            }
        }
        Verb::Probe { .. } => {
            let report = pipeline::probe(&cfg, out, exec)?;
            for (domain, score) in &report.domains {
                println!("{domain}: TER {:.4} ({} tokens)", score.ter, score.tokens);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
