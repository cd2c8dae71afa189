//! End-to-end runs of the `atm` binary on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atm_core::pipeline::{read_metrics, MetricsRecord, RunConfig};
use atm_core::scorer::{read_cache, ScorerStepLog};
use serde_json::Value;

const SMALL_SCORER: &[&str] = &["--set", "scorer.d=16", "--set", "scorer.channels=4", "--set", "scorer.heads=2"];
const SMALL_MODEL: &[&str] = &[
    "--set",
    "model.d=32",
    "--set",
    "model.code_dim=32",
    "--set",
    "model.proj_dim=32",
    "--set",
    "model.codebook=16",
];

fn atm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = atm(args);
    assert!(
        out.status.success(),
        "atm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus, scorer and cache under `dir`.
struct Stack {
    manifest: PathBuf,
    checkpoint: PathBuf,
    cache: PathBuf,
}

fn stack(dir: &Path, count: usize, scorer_steps: u64) -> Stack {
    let data = dir.join("data");
    ok(&["synth-data", "--seed", "3", "--count", &count.to_string(), "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    let scorer = dir.join("scorer");
    let steps = scorer_steps.to_string();
    let mut args = vec!["train-scorer", "--manifest", s(&manifest), "--steps", &steps, "--out", s(&scorer)];
    args.extend_from_slice(SMALL_SCORER);
    ok(&args);
    let checkpoint = scorer.join("scorer.ckpt");
    ok(&["score", "--manifest", s(&manifest), "--scorer-checkpoint", s(&checkpoint), "--out", s(&scorer)]);
    Stack {
        manifest,
        checkpoint,
        cache: scorer.join("confidence.jsonl"),
    }
}

#[test]
fn synth_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth-data", "--seed", "1", "--count", "6", "--out", s(&a)]);
    ok(&["synth-data", "--seed", "1", "--count", "6", "--out", s(&b)]);
    let ma = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(ma.iter().filter(|&&c| c == b'\n').count(), 6);
    let first = fs::read_dir(a.join("wav")).unwrap().next().unwrap().unwrap().file_name();
    assert_eq!(fs::read(a.join("wav").join(&first)).unwrap(), fs::read(b.join("wav").join(&first)).unwrap());

    let empty = dir.path().join("empty");
    ok(&["synth-data", "--count", "0", "--out", s(&empty)]);
    assert!(fs::read(empty.join("manifest.jsonl")).unwrap().is_empty());

    let bad = atm(&["synth-data", "--vocab", "1", "--out", s(&dir.path().join("bad"))]);
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("config error"), "{}", stderr(&bad));
}

#[test]
fn dump_config_applies_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    fs::write(&file, r#"{"seed": 4, "pretrain": {"context": 6}}"#).unwrap();
    let out = ok(&[
        "pretrain",
        "--config",
        s(&file),
        "--strategy",
        "high",
        "--steps",
        "12",
        "--set",
        "model.codebook=32",
        "--dump-config",
    ]);
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.pretrain.context, 6);
    assert_eq!(cfg.pretrain.steps, 12);
    assert_eq!(cfg.model.codebook, 32);
    assert_eq!(cfg.pretrain.strategy, atm_core::masking::StrategyKind::High);
    assert_eq!(cfg.pretrain.mask_fraction, 0.4);

    let unknown = atm(&["pretrain", "--set", "model.nope=1", "--dump-config"]);
    assert!(!unknown.status.success());
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let out = atm(&["train-scorer", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere.jsonl"), "{}", stderr(&out));

    let data = dir.path().join("data");
    ok(&["synth-data", "--count", "4", "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    let out = atm(&["pretrain", "--manifest", s(&manifest), "--strategy", "high", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("confidence cache"), "{}", stderr(&out));
}

#[test]
fn scorer_resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--count", "10", "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    let run = |out: &Path, steps: &str, extra: &[&str]| {
        let mut args = vec!["train-scorer", "--manifest", s(&manifest), "--steps", steps, "--out", s(out)];
        args.extend_from_slice(SMALL_SCORER);
        args.extend_from_slice(extra);
        ok(&args);
    };
    let whole = dir.path().join("whole");
    run(&whole, "8", &[]);
    let split = dir.path().join("split");
    run(&split, "4", &[]);
    // A torn final line from an interrupted writer is tolerated.
    let log = split.join("scorer_log.jsonl");
    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str(r#"{"step":5,"ctc_lo"#);
    fs::write(&log, text).unwrap();
    run(&split, "8", &["--resume"]);

    let (_, a) = read_metrics::<ScorerStepLog>(&whole.join("scorer_log.jsonl")).unwrap();
    let (_, b) = read_metrics::<ScorerStepLog>(&log).unwrap();
    assert_eq!(b.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    assert_eq!(a, b);
    assert_eq!(
        fs::read(whole.join("scorer.ckpt")).unwrap(),
        fs::read(split.join("scorer.ckpt")).unwrap()
    );
}

#[test]
fn score_cache_covers_corpus_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let st = stack(dir.path(), 8, 5);
    let cache = read_cache(&st.cache).unwrap();
    assert_eq!(cache.len(), 8);
    let vocab = RunConfig::default().corpus.vocab as f64;
    for r in &cache {
        assert!(r.s_u >= 1.0 / (vocab + 1.0) - 1e-6 && r.s_u <= 1.0 + 1e-6, "{}", r.s_u);
    }
    let again = dir.path().join("again");
    ok(&["score", "--manifest", s(&st.manifest), "--scorer-checkpoint", s(&st.checkpoint), "--out", s(&again)]);
    assert_eq!(fs::read(&st.cache).unwrap(), fs::read(again.join("confidence.jsonl")).unwrap());

    // A scorer trained on 40 mel bands cannot read 80-band features.
    let narrow = dir.path().join("narrow");
    let mut args = vec!["train-scorer", "--manifest", s(&st.manifest), "--steps", "1", "--out", s(&narrow)];
    args.extend_from_slice(SMALL_SCORER);
    args.extend_from_slice(&["--set", "features.n_mels=40", "--set", "scorer.n_mels=40"]);
    ok(&args);
    let out = atm(&[
        "score",
        "--manifest",
        s(&st.manifest),
        "--scorer-checkpoint",
        s(&narrow.join("scorer.ckpt")),
        "--out",
        s(&narrow),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("shape"), "{}", stderr(&out));
}

#[test]
fn pretraining_reduces_contrastive_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--seed", "5", "--count", "60", "--out", s(&data)]);
    let out = dir.path().join("pt");
    let manifest = data.join("manifest.jsonl");
    let mut args = vec!["pretrain", "--manifest", s(&manifest), "--steps", "200", "--out", s(&out)];
    args.extend_from_slice(SMALL_MODEL);
    ok(&args);
    let (header, records) = read_metrics::<MetricsRecord>(&out.join("metrics.jsonl")).unwrap();
    let header = header.unwrap();
    assert_eq!(header.command, "pretrain");
    let embedded: RunConfig = serde_json::from_value(header.config).unwrap();
    assert_eq!(embedded.pretrain.steps, 200);
    assert_eq!(records.len(), 200);
    assert!(records.iter().all(|r| r.wall_ms.is_none()));
    let mean = |rs: &[MetricsRecord]| rs.iter().map(|r| r.l_ctr).sum::<f64>() / rs.len() as f64;
    let (first, last) = (mean(&records[..20]), mean(&records[180..]));
    println!("l_ctr first 20 {first:.4}, last 20 {last:.4}");
    assert!(last < first);
}

#[test]
fn sweep_dedupes_fractions_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let st = stack(dir.path(), 12, 3);
    let out = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--manifest",
        s(&st.manifest),
        "--cache",
        s(&st.cache),
        "--fractions",
        "0.3,0.4,0.4,0.5",
        "--strategies",
        "random,high",
        "--steps",
        "2",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(SMALL_MODEL);
    let res = ok(&args);
    assert!(stderr(&res).contains("duplicate sweep fraction"), "{}", stderr(&res));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "fraction,strategy,l_total,msm_accuracy,realized_coverage");
    assert!(lines[1].starts_with("0.3,random,"));
    assert!(lines[6].starts_with("0.5,high,"));
}

#[test]
fn analyze_mask_rows_and_constant_scores() {
    let dir = tempfile::tempdir().unwrap();
    let st = stack(dir.path(), 10, 2);
    let out = dir.path().join("an");
    ok(&["analyze-mask", "--cache", s(&st.cache), "--plans", "400", "--out", s(&out)]);
    let rows = fs::read_to_string(out.join("mask_analysis.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 10 * 4);

    // Constant confidences: every strategy masks the same confidence.
    let cache = read_cache(&st.cache).unwrap();
    let flat: Vec<_> = cache
        .iter()
        .map(|r| {
            atm_core::scorer::CacheRecord::new(
                r.utt_id.clone(),
                &atm_core::scorer::ConfidenceTrack::constant(r.scores.len(), 0.7),
            )
        })
        .collect();
    let flat_path = dir.path().join("flat.jsonl");
    atm_core::scorer::write_cache(&flat_path, &flat).unwrap();
    let out = dir.path().join("flat");
    ok(&["analyze-mask", "--cache", s(&flat_path), "--plans", "400", "--out", s(&out)]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("mask_summary.json")).unwrap()).unwrap();
    for st in summary["strategies"].as_array().unwrap() {
        let m = st["mean_masked_confidence"].as_f64().unwrap();
        assert!((m - 0.7).abs() < 1e-6, "{st}");
    }
}

#[test]
fn probe_reports_per_domain_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth-data", "--seed", "8", "--count", "12", "--out", s(&data)]);
    let shifted = dir.path().join("shifted");
    ok(&["synth-data", "--seed", "9", "--count", "6", "--domain", "shifted", "--out", s(&shifted)]);
    let manifest = data.join("manifest.jsonl");
    let pt = dir.path().join("pt");
    let mut args = vec!["pretrain", "--manifest", s(&manifest), "--steps", "3", "--out", s(&pt)];
    args.extend_from_slice(SMALL_MODEL);
    ok(&args);
    let ck = pt.join("msm.ckpt");
    let probe = |out: &Path, steps: &str| {
        ok(&[
            "probe",
            "--manifest",
            s(&manifest),
            "--checkpoint",
            s(&ck),
            "--eval-manifest",
            s(&manifest),
            "--eval-manifest",
            s(&shifted.join("manifest.jsonl")),
            "--steps",
            steps,
            "--out",
            s(out),
        ]);
        serde_json::from_str::<Value>(&fs::read_to_string(out.join("probe.json")).unwrap()).unwrap()
    };
    let a = probe(&dir.path().join("a"), "10");
    let b = probe(&dir.path().join("b"), "10");
    assert_eq!(a, b);
    assert_eq!(a["pretrained"], Value::Bool(true));
    let domains = a["domains"].as_object().unwrap();
    assert!(domains.contains_key("clean") && domains.contains_key("shifted"));
    let zero = probe(&dir.path().join("zero"), "0");
    println!("zero-step TER {}", zero["domains"]["clean"]["ter"]);
    assert!(zero["final_loss"].is_null());

    // Untrained encoder of the same shape; the comparison is reported only.
    let fresh = dir.path().join("fresh");
    let mut args = vec!["probe", "--manifest", s(&manifest), "--steps", "10", "--out", s(&fresh)];
    args.extend_from_slice(SMALL_MODEL);
    ok(&args);
    let fresh: Value = serde_json::from_str(&fs::read_to_string(fresh.join("probe.json")).unwrap()).unwrap();
    assert_eq!(fresh["pretrained"], Value::Bool(false));
    println!(
        "clean TER pretrained {} untrained {}",
        a["domains"]["clean"]["ter"], fresh["domains"]["clean"]["ter"]
    );

    let deep = atm(&[
        "probe",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ck),
        "--set",
        "probe.layer=99",
        "--out",
        s(&dir.path().join("deep")),
    ]);
    assert!(!deep.status.success());
    assert!(stderr(&deep).contains("layer 99"), "{}", stderr(&deep));

    // Checkpoint built for 40 mel bands against 80-band features.
    let narrow = dir.path().join("narrow");
    let mut args = vec!["pretrain", "--manifest", s(&manifest), "--steps", "1", "--out", s(&narrow)];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(&["--set", "features.n_mels=40", "--set", "model.n_mels=40"]);
    ok(&args);
    let out = atm(&[
        "probe",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&narrow.join("msm.ckpt")),
        "--out",
        s(&narrow),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("shape"), "{}", stderr(&out));
}
