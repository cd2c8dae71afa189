//! The pipeline verbs. Each takes the resolved config and an output
//! directory and is deterministic given both.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::{Command, RunConfig};
use super::metrics::{Header, MetricsRecord, MetricsWriter};
use crate::error::{AtmError, Result};
use crate::features::wav::write_wav;
use crate::features::{load_manifest, synth_corpus_with, write_manifest, CorpusConfig, LogMel, ManifestRecord, Utterance};
use crate::masking::{mask_stats, plan_mask, MaskStrategy, StrategyKind};
use crate::msm::{msm_step, BatchItem, MsmModel, StepOptions};
use crate::nn::layers::Linear;
use crate::nn::{adam_step, reduce_gradients, Checkpoint, Graph, OptimizerState, ParamStore, Tensor};
use crate::par::{self, Execution};
use crate::rng::{keyed, Stream};
use crate::scorer::ctc::{edit_distance, greedy_decode};
use crate::scorer::{
    prepare_labeled, read_cache, score_frames, write_cache, CacheRecord, ConfidenceTrack, ScorerModel, ScorerStepLog,
    ScorerTrainConfig, ScorerTrainer,
};
use crate::stats::{paired_greater, summarize, TestResult};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCORER_CHECKPOINT: &str = "scorer.ckpt";
pub const SCORER_LOG: &str = "scorer_log.jsonl";
pub const CACHE_FILE: &str = "confidence.jsonl";
pub const MSM_CHECKPOINT: &str = "msm.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ANALYSIS_FILE: &str = "mask_analysis.jsonl";
pub const ANALYSIS_SUMMARY: &str = "mask_summary.json";
pub const PROBE_FILE: &str = "probe.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AtmError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AtmError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AtmError::io(path, e))
}

fn header(command: &str, cfg: &RunConfig) -> Header {
    Header {
        command: command.into(),
        config: cfg.to_json(),
    }
}

fn checkpoint_meta(cfg: &RunConfig, step: u64) -> serde_json::Value {
    serde_json::json!({ "config": cfg.to_json(), "step": step })
}

fn checkpoint_step(ck: &Checkpoint) -> Result<u64> {
    ck.meta
        .get("step")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| AtmError::Checkpoint("checkpoint has no step".into()))
}

fn featurize(utts: &[Utterance], frontend: &LogMel, exec: Execution) -> Result<Vec<Tensor>> {
    par::try_map_indexed(exec, utts, |_, u| Ok(frontend.featurize(u)?.frames))
}

/// Generated corpus written as WAV files plus a manifest.
pub fn synth_data(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<PathBuf> {
    cfg.validate(Command::SynthData)?;
    let corpus = CorpusConfig {
        seed: cfg.seed,
        ..cfg.corpus.clone()
    };
    let wav_dir = out.join("wav");
    create_dir(&wav_dir)?;
    let utts = synth_corpus_with(&corpus, exec)?;
    let records = par::try_map_indexed(exec, &utts, |_, u| {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(&out.join(&rel), &u.samples)?;
        Ok::<_, AtmError>(ManifestRecord {
            id: u.id.clone(),
            path: Some(rel),
            generate: None,
            labels: u.labels.clone(),
            domain: u.domain.clone(),
        })
    })?;
    let manifest = out.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;
    log::info!("wrote {} utterances to {}", records.len(), manifest.display());
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerRun {
    pub checkpoint: PathBuf,
    pub log: Vec<ScorerStepLog>,
}

/// Trains the CTC scorer. With `resume`, continues from `out/scorer.ckpt`.
pub fn train_scorer(cfg: &RunConfig, out: &Path, exec: Execution, resume: bool) -> Result<ScorerRun> {
    cfg.validate(Command::TrainScorer)?;
    create_dir(out)?;
    let utts = load_manifest(cfg.manifest_path()?)?;
    let data = prepare_labeled(&utts, &LogMel::new(cfg.features.clone()), exec)?;
    let train_cfg = ScorerTrainConfig {
        seed: cfg.seed,
        ..cfg.scorer_training.clone()
    };
    let ck_path = out.join(SCORER_CHECKPOINT);
    let log_path = out.join(SCORER_LOG);
    let mut trainer = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let model = ScorerModel::from_checkpoint(&ck)?;
        let step = checkpoint_step(&ck)?;
        let opt = ck.restore_optimizer(&model.store, train_cfg.adam, step)?;
        log::info!("resuming scorer training at step {}", step + 1);
        ScorerTrainer {
            model,
            opt,
            config: train_cfg,
        }
    } else {
        ScorerTrainer::new(ScorerModel::new(cfg.scorer.clone(), cfg.seed)?, train_cfg)
    };
    let hdr = header("train-scorer", cfg);
    let mut writer = if resume {
        MetricsWriter::resume(&log_path, &hdr, trainer.opt.step)?
    } else {
        MetricsWriter::create(&log_path, &hdr)?
    };
    let save = |t: &ScorerTrainer| {
        let mut ck = t.model.to_checkpoint(checkpoint_meta(cfg, t.opt.step));
        ck.push_optimizer(&t.opt, &t.model.store);
        ck.save(&ck_path)
    };
    let mut log = Vec::new();
    let every = cfg.pretrain.checkpoint_every;
    while trainer.opt.step < trainer.config.steps {
        let entry = trainer.step(&data, exec).map_err(|e| AtmError::at_step(trainer.opt.step + 1, e))?;
        writer.append(entry.step, &entry)?;
        if every > 0 && entry.step % every == 0 {
            save(&trainer)?;
        }
        log.push(entry);
    }
    save(&trainer)?;
    Ok(ScorerRun {
        checkpoint: ck_path,
        log,
    })
}

/// Confidence cache for every utterance in the manifest.
pub fn score(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<Vec<CacheRecord>> {
    cfg.validate(Command::Score)?;
    create_dir(out)?;
    let ck_path = cfg.scorer_checkpoint.as_deref().expect("validated");
    let model = ScorerModel::from_checkpoint(&Checkpoint::load(ck_path)?)?;
    let utts = load_manifest(cfg.manifest_path()?)?;
    let frontend = LogMel::new(cfg.features.clone());
    let records = par::try_map_indexed(exec, &utts, |_, u| {
        let feats = frontend.featurize(u)?;
        let (track, _) = score_frames(&model, &feats)?;
        Ok::<_, AtmError>(CacheRecord::new(u.id.clone(), &track))
    })?;
    write_cache(&out.join(CACHE_FILE), &records)?;
    Ok(records)
}

/// Featurised corpus with optional aligned confidence tracks.
pub struct PretrainData {
    pub ids: Vec<String>,
    pub feats: Vec<Tensor>,
    pub tracks: Option<Vec<ConfidenceTrack>>,
}

impl PretrainData {
    pub fn load(cfg: &RunConfig, strategies: &[StrategyKind], exec: Execution) -> Result<Self> {
        let utts = load_manifest(cfg.manifest_path()?)?;
        let feats = featurize(&utts, &LogMel::new(cfg.features.clone()), exec)?;
        let tracks = match cfg.cache_path(strategies)? {
            Some(path) => {
                let cache: HashMap<String, CacheRecord> =
                    read_cache(path)?.into_iter().map(|r| (r.utt_id.clone(), r)).collect();
                let tracks = utts
                    .iter()
                    .map(|u| {
                        cache
                            .get(&u.id)
                            .map(CacheRecord::track)
                            .ok_or_else(|| AtmError::Data(format!("{}: no cached confidence for {}", path.display(), u.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(tracks)
            }
            None => None,
        };
        Ok(PretrainData {
            ids: utts.into_iter().map(|u| u.id).collect(),
            feats,
            tracks,
        })
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// MSM pretraining loop over prepared data. Writes metrics and checkpoints
/// into `out`; periodic snapshots only when `snapshots` is set.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &PretrainData,
    out: &Path,
    exec: Execution,
    resume: bool,
    snapshots: bool,
) -> Result<Vec<MetricsRecord>> {
    if data.is_empty() {
        return Err(AtmError::Data("pretraining corpus is empty".into()));
    }
    create_dir(out)?;
    let p = &cfg.pretrain;
    let ck_path = out.join(MSM_CHECKPOINT);
    let (mut model, mut opt) = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        let model = MsmModel::from_checkpoint(&ck)?;
        let opt = ck.restore_optimizer(&model.store, p.adam, checkpoint_step(&ck)?)?;
        (model, opt)
    } else {
        let model = MsmModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = OptimizerState::new(&model.store, p.adam);
        (model, opt)
    };
    let hdr = header("pretrain", cfg);
    let metrics_path = out.join(METRICS_FILE);
    let mut writer = if resume {
        MetricsWriter::resume(&metrics_path, &hdr, opt.step)?
    } else {
        MetricsWriter::create(&metrics_path, &hdr)?
    };
    let save = |model: &MsmModel, opt: &OptimizerState, path: &Path| {
        let mut ck = model.to_checkpoint(checkpoint_meta(cfg, opt.step));
        ck.push_optimizer(opt, &model.store);
        ck.save(path)
    };
    let started = Instant::now();
    let batch_size = p.batch_size.min(data.len());
    let mut records = Vec::new();
    while opt.step < p.steps {
        let step = opt.step + 1;
        let mut rng = keyed(cfg.seed, Stream::Batch, step, 1);
        let batch: Vec<BatchItem> = sample(&mut rng, data.len(), batch_size)
            .into_iter()
            .map(|i| BatchItem {
                key: i as u64,
                feats: &data.feats[i],
                track: data.tracks.as_ref().map(|t| &t[i]),
                targets: None,
            })
            .collect();
        let opts = StepOptions {
            strategy: p.mask_strategy(),
            scale_mode: p.scale_mode,
            frame_participation: p.frame_participation,
            seed: cfg.seed,
            step,
            total_steps: p.steps,
            exec,
        };
        let (breakdown, grads) = msm_step(&model, &batch, &opts).map_err(|e| AtmError::at_step(step, e))?;
        adam_step(&mut model.store, &grads, &mut opt).map_err(|e| AtmError::at_step(step, e))?;
        let wall_ms = cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64);
        let record = MetricsRecord::new(step, &breakdown, wall_ms);
        writer.append(step, &record)?;
        if p.checkpoint_every > 0 && step % p.checkpoint_every == 0 {
            save(&model, &opt, &ck_path)?;
            if snapshots {
                save(&model, &opt, &out.join(format!("msm-step{step:06}.ckpt")))?;
            }
        }
        records.push(record);
    }
    save(&model, &opt, &ck_path)?;
    Ok(records)
}

pub fn pretrain(cfg: &RunConfig, out: &Path, exec: Execution, resume: bool) -> Result<Vec<MetricsRecord>> {
    cfg.validate(Command::Pretrain)?;
    let data = PretrainData::load(cfg, &[cfg.pretrain.strategy], exec)?;
    run_pretrain(cfg, &data, out, exec, resume, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub strategy: StrategyKind,
    /// `l_total` at the last step.
    pub l_total: f64,
    /// `msm_accuracy` at the last step.
    pub msm_accuracy: f64,
    /// Masked share of frames averaged over the run.
    pub realized_coverage: f64,
}

fn dedup_fractions(fractions: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &f in fractions {
        if out.contains(&f) {
            log::warn!("duplicate sweep fraction {f} ignored");
        } else {
            out.push(f);
        }
    }
    out
}

/// One pretraining run per (strategy, fraction); summary CSV in `out`.
pub fn sweep(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<Vec<SweepRow>> {
    cfg.validate(Command::Sweep)?;
    create_dir(out)?;
    let fractions = dedup_fractions(&cfg.sweep.fractions);
    let data = PretrainData::load(cfg, &cfg.sweep.strategies, exec)?;
    let mut rows = Vec::new();
    for &strategy in &cfg.sweep.strategies {
        for &fraction in &fractions {
            let mut run_cfg = cfg.clone();
            run_cfg.pretrain.strategy = strategy;
            run_cfg.pretrain.mask_fraction = fraction;
            let dir = out.join(format!("{strategy}-p{fraction}"));
            let records = run_pretrain(&run_cfg, &data, &dir, exec, false, false)?;
            let last = records
                .last()
                .ok_or_else(|| AtmError::Config("sweep runs need at least one step".into()))?;
            let coverage = records.iter().map(|r| r.realized_coverage).sum::<f64>() / records.len() as f64;
            log::info!("sweep {strategy} p={fraction}: l_total {:.4}", last.l_total);
            rows.push(SweepRow {
                fraction,
                strategy,
                l_total: last.l_total,
                msm_accuracy: last.msm_accuracy,
                realized_coverage: coverage,
            });
        }
    }
    let path = out.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| AtmError::io(&path, e))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> AtmError {
    AtmError::io(path, std::io::Error::other(e))
}

/// Spread of final `l_total` across fractions, per strategy. A flatter
/// curve means the strategy is less sensitive to the masking percentage.
pub fn sweep_spread(rows: &[SweepRow]) -> BTreeMap<StrategyKind, f64> {
    let mut spread = BTreeMap::new();
    for r in rows {
        let e = spread.entry(r.strategy).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.l_total);
        e.1 = e.1.max(r.l_total);
    }
    spread.into_iter().map(|(k, (lo, hi))| (k, hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAnalysisRow {
    pub utt_id: String,
    pub strategy: StrategyKind,
    pub plans: usize,
    pub mean_masked_confidence: f64,
    pub realized_coverage: f64,
    /// Starts of the first plan drawn for this utterance.
    pub starts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: StrategyKind,
    pub plans: usize,
    pub mean_masked_confidence: f64,
    pub std_masked_confidence: f64,
    pub realized_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingTest {
    pub greater: StrategyKind,
    pub lesser: StrategyKind,
    pub result: TestResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAnalysis {
    pub strategies: Vec<StrategySummary>,
    /// One-sided paired tests that the first strategy masks more confident
    /// frames than the second. Plan `n` of every strategy on an utterance is
    /// drawn from the same random stream, so matched plans differ only by
    /// strategy.
    pub ordering: Vec<OrderingTest>,
    #[serde(skip)]
    pub rows: Vec<MaskAnalysisRow>,
}

/// Draws mask plans for every cached utterance and strategy, no training.
pub fn analyze_mask(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<MaskAnalysis> {
    cfg.validate(Command::AnalyzeMask)?;
    create_dir(out)?;
    let cache = read_cache(cfg.confidence_cache.as_deref().expect("validated"))?;
    if cache.is_empty() {
        return Err(AtmError::Data("confidence cache is empty".into()));
    }
    let per_utt = cfg.analysis.plans.div_ceil(cache.len()).max(1);
    let mut rows = Vec::new();
    let mut strategies = Vec::new();
    let mut samples: BTreeMap<StrategyKind, Vec<f64>> = BTreeMap::new();
    for &kind in &cfg.analysis.strategies {
        let strategy = MaskStrategy {
            kind,
            ..cfg.pretrain.mask_strategy()
        };
        let per_record = par::try_map_indexed(exec, &cache, |ui, rec| {
            // Shared across strategies: common random numbers for the paired tests.
            let mut rng = keyed(cfg.seed, Stream::Analysis, ui as u64, 0);
            let mut conf = Vec::with_capacity(per_utt);
            let mut coverage = 0.0;
            let mut first = None;
            for _ in 0..per_utt {
                let plan = plan_mask(&strategy, Some(&rec.scores), rec.scores.len(), &mut rng)?;
                let stats = mask_stats(&plan, &rec.scores)?;
                conf.push(stats.mean_masked_confidence);
                coverage += stats.realized_coverage;
                first.get_or_insert(plan.starts);
            }
            Ok::<_, AtmError>((conf, coverage / per_utt as f64, first.unwrap_or_default()))
        })?;
        let mut pooled = Vec::with_capacity(per_utt * cache.len());
        let mut coverage = 0.0;
        for (rec, (conf, cov, starts)) in cache.iter().zip(per_record) {
            rows.push(MaskAnalysisRow {
                utt_id: rec.utt_id.clone(),
                strategy: kind,
                plans: per_utt,
                mean_masked_confidence: conf.iter().sum::<f64>() / conf.len() as f64,
                realized_coverage: cov,
                starts,
            });
            coverage += cov;
            pooled.extend(conf);
        }
        let s = summarize(&pooled);
        strategies.push(StrategySummary {
            strategy: kind,
            plans: pooled.len(),
            mean_masked_confidence: s.mean,
            std_masked_confidence: s.var.sqrt(),
            realized_coverage: coverage / cache.len() as f64,
        });
        samples.insert(kind, pooled);
    }
    let mut ordering = Vec::new();
    for (greater, lesser) in [
        (StrategyKind::High, StrategyKind::Random),
        (StrategyKind::Random, StrategyKind::Low),
        (StrategyKind::High, StrategyKind::Low),
    ] {
        if let (Some(a), Some(b)) = (samples.get(&greater), samples.get(&lesser)) {
            ordering.push(OrderingTest {
                greater,
                lesser,
                result: paired_greater(a, b),
            });
        }
    }
    let rows_path = out.join(ANALYSIS_FILE);
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| AtmError::json(&rows_path, e))?);
        text.push('\n');
    }
    fs::write(&rows_path, text).map_err(|e| AtmError::io(&rows_path, e))?;
    let analysis = MaskAnalysis {
        strategies,
        ordering,
        rows,
    };
    write_json(&out.join(ANALYSIS_SUMMARY), &analysis)?;
    Ok(analysis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub utterances: usize,
    pub tokens: usize,
    pub errors: usize,
    pub ter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub steps: u64,
    pub pretrained: bool,
    pub final_loss: Option<f64>,
    pub domains: BTreeMap<String, DomainScore>,
}

struct ProbeExample {
    reps: Tensor,
    labels: Vec<usize>,
    domain: String,
}

fn probe_examples(model: &MsmModel, cfg: &RunConfig, path: &Path, exec: Execution) -> Result<Vec<ProbeExample>> {
    let utts = load_manifest(path)?;
    let frontend = LogMel::new(cfg.features.clone());
    par::try_map_indexed(exec, &utts, |_, u| {
        let labels = u
            .labels
            .clone()
            .ok_or_else(|| AtmError::Data(format!("{}: probe utterance has no labels", u.id)))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.corpus.vocab) {
            return Err(AtmError::Data(format!("{}: label {bad} outside vocabulary {}", u.id, cfg.corpus.vocab)));
        }
        let feats = frontend.featurize(u)?;
        Ok(ProbeExample {
            reps: model.represent(&feats.frames, cfg.probe.layer)?,
            labels,
            domain: u.domain.clone(),
        })
    })
}

/// Per-dimension mean and inverse standard deviation over every training
/// frame, so the head sees the same input scale whatever the encoder.
fn frame_standardizer(examples: &[ProbeExample]) -> (Vec<f64>, Vec<f64>) {
    let d = examples[0].reps.cols();
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for ex in examples {
        for row in ex.reps.data().chunks(d) {
            for ((s, q), &v) in sum.iter_mut().zip(&mut sq).zip(row) {
                *s += v as f64;
                *q += (v as f64) * (v as f64);
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let inv_std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| 1.0 / (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    (mean, inv_std)
}

fn standardize(examples: &mut [ProbeExample], (mean, inv_std): &(Vec<f64>, Vec<f64>)) {
    let d = mean.len();
    for ex in examples {
        for row in ex.reps.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(inv_std) {
                *v = ((*v as f64 - m) * s) as f32;
            }
        }
    }
}

/// Linear CTC head on frozen context representations, scored by greedy
/// token error rate per domain.
pub fn probe(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<ProbeReport> {
    cfg.validate(Command::Probe)?;
    create_dir(out)?;
    let (model, pretrained) = match &cfg.msm_checkpoint {
        Some(path) => (MsmModel::from_checkpoint(&Checkpoint::load(path)?)?, true),
        None => {
            log::warn!("no MSM checkpoint given; probing an untrained encoder");
            (MsmModel::new(cfg.model.clone(), cfg.seed)?, false)
        }
    };
    if model.config.n_mels != cfg.features.n_mels {
        return Err(AtmError::Shape(format!(
            "checkpoint expects {} mel bands, features produce {}",
            model.config.n_mels, cfg.features.n_mels
        )));
    }
    let train_path = match &cfg.probe.train_manifest {
        Some(p) => p.clone(),
        None => cfg.manifest_path()?.to_path_buf(),
    };
    let mut train = probe_examples(&model, cfg, &train_path, exec)?;
    if train.is_empty() {
        return Err(AtmError::Data("probe training set is empty".into()));
    }
    let norm = frame_standardizer(&train);
    standardize(&mut train, &norm);

    let vocab = cfg.corpus.vocab;
    let mut store = ParamStore::new();
    let mut init = keyed(cfg.seed, Stream::Init, 3, 0);
    let head = Linear::new(&mut store, "probe", model.config.d, vocab + 1, &mut init);
    let mut opt = OptimizerState::new(&store, cfg.probe.adam);
    let mut final_loss = None;
    let batch_size = cfg.probe.batch_size.min(train.len());
    while opt.step < cfg.probe.steps {
        let step = opt.step + 1;
        let mut rng = keyed(cfg.seed, Stream::Batch, step, 2);
        let batch = sample(&mut rng, train.len(), batch_size).into_vec();
        let store_ref = &store;
        let results = par::try_map_indexed(exec, &batch, |_, &i| {
            let ex = &train[i];
            let mut g = Graph::new(store_ref);
            let x = g.constant(ex.reps.clone());
            let logits = head.forward(&mut g, x);
            let loss = g.ctc_loss(logits, &ex.labels)?;
            Ok::<_, AtmError>((g.value(loss).item() as f64, g.backward(loss)?.into_params()))
        })
        .map_err(|e| AtmError::at_step(step, e))?;
        let n = results.len();
        final_loss = Some(results.iter().map(|r| r.0).sum::<f64>() / n as f64);
        let grads = reduce_gradients(results.into_iter().map(|r| r.1).collect(), 1.0 / n as f32);
        adam_step(&mut store, &grads, &mut opt).map_err(|e| AtmError::at_step(step, e))?;
    }

    let mut eval_sets = Vec::new();
    if cfg.probe.eval_manifests.is_empty() {
        eval_sets.push(train);
    } else {
        for path in &cfg.probe.eval_manifests {
            let mut set = probe_examples(&model, cfg, path, exec)?;
            standardize(&mut set, &norm);
            eval_sets.push(set);
        }
    }
    let mut domains: BTreeMap<String, DomainScore> = BTreeMap::new();
    for set in &eval_sets {
        let decoded = par::map_indexed(exec, set, |_, ex| {
            let mut g = Graph::new(&store);
            let x = g.constant(ex.reps.clone());
            let logits = head.forward(&mut g, x);
            let hyp = greedy_decode(&g.value(logits).argmax_rows(), vocab);
            edit_distance(&hyp, &ex.labels)
        });
        for (ex, errors) in set.iter().zip(decoded) {
            let d = domains.entry(ex.domain.clone()).or_insert(DomainScore {
                utterances: 0,
                tokens: 0,
                errors: 0,
                ter: 0.0,
            });
            d.utterances += 1;
            d.tokens += ex.labels.len();
            d.errors += errors;
        }
    }
    for d in domains.values_mut() {
        d.ter = d.errors as f64 / d.tokens.max(1) as f64;
    }
    let report = ProbeReport {
        steps: cfg.probe.steps,
        pretrained,
        final_loss,
        domains,
    };
    write_json(&out.join(PROBE_FILE), &report)?;
    Ok(report)
}
