use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbest_selflearn::checkpoint::Checkpoint;
use nbest_selflearn::experiment::ExperimentConfig;
use nbest_selflearn::metrics::read_metrics;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn nbsl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbsl"))
        .args(args)
        .env("NBSL_OUT", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn shipped_configs_parse() {
    let desk = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    assert_eq!(desk, ExperimentConfig::default());
    ExperimentConfig::load(&smoke_config()).unwrap().validate().unwrap();
}

#[test]
fn every_verb_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    let o = nbsl(&["train", "--config", cfg], root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seed_dir = root.join("smoke/seed-1");
    for f in ["seed.ckpt", "train_log.jsonl", "metrics.jsonl", "config.toml", "seed_train.json"] {
        assert!(seed_dir.join(f).exists(), "missing {f}");
    }

    for method in ["supervised", "one_best", "mtl_shared_ae"] {
        let o = nbsl(&["adapt", "--config", cfg, "--method", method, "--n-best", "2"], root);
        assert_eq!(code(&o), 0, "{method}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(seed_dir.join(format!("{method}.ckpt")).exists());
    }
    let o = nbsl(&["fed", "--config", cfg, "--rounds", "2"], root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rounds = std::fs::read_to_string(seed_dir.join("fed_rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 2);

    let metrics = seed_dir.join("metrics.jsonl");
    let records = read_metrics(&metrics).unwrap();
    assert!(records.iter().any(|r| r.method == "fed_mtl_shared_ae" && r.is_final));
    let o = nbsl(&["report", metrics.to_str().unwrap()], root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    let seed_row = table.lines().position(|l| l.starts_with("seed ")).unwrap();
    let ae_row = table.lines().position(|l| l.starts_with("mtl_shared_ae")).unwrap();
    assert!(seed_row < ae_row, "{table}");
    assert!(root.join("report.json").exists());

    let o = nbsl(&["gen-data", "--config", cfg, "--seeds", "1"], root);
    assert_eq!(code(&o), 0);
    assert!(seed_dir.join("data/adapt.txt").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();

    let o = nbsl(&["adapt", "--config", cfg, "--method", "two_best"], root);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mtl_shared_ae"));

    let o = nbsl(&["train", "--config", "/nonexistent/x.toml"], root);
    assert_eq!(code(&o), 2);

    // Adapting before training: the seed checkpoint is missing.
    let o = nbsl(&["adapt", "--config", cfg, "--method", "one_best"], root);
    assert_eq!(code(&o), 2);

    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[model]\nhidden_size = 3\n").unwrap();
    assert_eq!(code(&nbsl(&["train", "--config", bad.to_str().unwrap()], root)), 2);

    // MTL needs at least two hypotheses.
    assert_eq!(code(&nbsl(&["adapt", "--config", cfg, "--method", "mtl_shared_ae", "--n-best", "1"], root)), 2);
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("metrics.jsonl");
    std::fs::write(&garbage, "not json\n").unwrap();
    let o = nbsl(&["report", garbage.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_verb_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nbsl(&["gradcheck"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("(ok)").count(), 5);
}

#[test]
fn seeds_fan_out_and_zero_rounds_return_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let o = nbsl(&["train", "--config", cfg, "--seeds", "1,2,3", "--parallel-seeds"], root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut files = Vec::new();
    for s in 1..=3 {
        let d = root.join(format!("smoke/seed-{s}"));
        assert!(d.join("seed.ckpt").exists());
        let records = read_metrics(&d.join("metrics.jsonl")).unwrap();
        assert_eq!(records.len(), 1);
        files.push(d.join("metrics.jsonl").to_str().unwrap().to_string());
    }
    let mut args = vec!["report", "--out"];
    let report = root.join("r.json");
    args.push(report.to_str().unwrap());
    args.extend(files.iter().map(String::as_str));
    let o = nbsl(&args, root);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("s1") && table.contains("s3"), "{table}");

    let o = nbsl(&["fed", "--config", cfg, "--seeds", "2", "--rounds", "0"], root);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let d = root.join("smoke/seed-2");
    let seed = Checkpoint::load(&d.join("seed.ckpt")).unwrap().params;
    let fed = Checkpoint::load(&d.join("fed.ckpt")).unwrap().params;
    assert_eq!(seed, fed);
}

#[test]
fn missing_dataset_and_oversized_cohort_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let base = std::fs::read_to_string(smoke_config()).unwrap();

    let missing = root.join("missing.toml");
    std::fs::write(&missing, base.replace("adapt_speakers = 4", "adapt_speakers = 4\nadapt_path = \"/no/such/adapt.txt\"")).unwrap();
    let o = nbsl(&["gen-data", "--config", missing.to_str().unwrap()], root);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/adapt.txt"));

    let big = root.join("big.toml");
    std::fs::write(&big, base.replace("cohort_size = 2", "cohort_size = 9")).unwrap();
    assert_eq!(code(&nbsl(&["train", "--config", big.to_str().unwrap()], root)), 0);
    let o = nbsl(&["fed", "--config", big.to_str().unwrap()], root);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('9') && err.contains('4'), "{err}");
}
