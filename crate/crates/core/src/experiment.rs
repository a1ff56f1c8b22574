//! Experiment configuration, recipes and result tables.
//!
//! One experiment writes everything under `<output_root>/<name>/seed-<s>/`:
//! a copy of the config, checkpoints, training logs and metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport, Precision, Tensor};
use crate::checkpoint::{Checkpoint, RngState};
use crate::corpus::{self, Dataset, Domain, TaskSpec, Utterance};
use crate::error::{Error, Result};
use crate::fedsim::{partition_by_speaker, run_federated, FedConfig, FedReport};
use crate::metrics::{append_metrics, median, read_metrics, MetricsRecord};
use crate::decoder::Hypothesis;
use crate::model::{ModelConfig, ModelParams, Topology, EOS};
use crate::selflearn::{run_self_learning, supervised_adaptation, Method, SelfLearnConfig, SelfLearnReport};
use crate::trainer::{
    evaluate_cer, kd_1best_loss, loss_and_grads, nbest_loss, supervised_loss, write_log, Dispatch, TrainConfig, TrainItem, TrainMode, Trainer,
    WeightedLabel,
};

/// Default output root when neither `--out` nor the environment says otherwise.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "NBSL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "desk".into(),
            output_dir: None,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Dataset sizes, or files to load instead of generating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed_train: usize,
    pub seed_valid: usize,
    pub seed_speakers: usize,
    pub adapt: usize,
    pub adapt_valid: usize,
    pub adapt_speakers: usize,
    pub seed_train_path: Option<PathBuf>,
    pub seed_valid_path: Option<PathBuf>,
    pub adapt_path: Option<PathBuf>,
    pub adapt_valid_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed_train: 2000,
            seed_valid: 300,
            seed_speakers: 20,
            adapt: 1500,
            adapt_valid: 300,
            adapt_speakers: 50,
            seed_train_path: None,
            seed_valid_path: None,
            adapt_path: None,
            adapt_valid_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: TaskSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Seed-model training.
    pub train: TrainConfig,
    /// Optimization during adaptation (self-learning, supervised adaptation
    /// and federated clients).
    pub adapt: TrainConfig,
    pub selflearn: SelfLearnConfig,
    pub fed: Option<FedConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        let model = ModelConfig {
            feature_dim: task.feature_dim,
            vocab_size: task.vocab_size(),
            ..ModelConfig::default()
        };
        ExperimentConfig {
            experiment: ExperimentSection::default(),
            task,
            data: DataConfig::default(),
            model,
            train: TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 10,
                ..TrainConfig::default()
            },
            adapt: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
            selflearn: SelfLearnConfig::default(),
            fed: Some(FedConfig {
                refresh_interval: 16,
                ..FedConfig::default()
            }),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must not be empty"));
        }
        self.task.validate().map_err(|e| Error::config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.model.vocab_size != self.task.vocab_size() || self.model.feature_dim != self.task.feature_dim {
            return Err(Error::config(format!(
                "model (vocab {}, features {}) does not match the task (vocab {}, features {})",
                self.model.vocab_size,
                self.model.feature_dim,
                self.task.vocab_size(),
                self.task.feature_dim
            )));
        }
        self.train.validate()?;
        self.adapt.validate()?;
        self.selflearn.validate()?;
        if let Some(f) = &self.fed {
            f.validate()?;
        }
        for p in [
            &self.data.seed_train_path,
            &self.data.seed_valid_path,
            &self.data.adapt_path,
            &self.data.adapt_valid_path,
        ]
        .into_iter()
        .flatten()
        {
            if !p.exists() {
                return Err(Error::config(format!("dataset file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Sets the precision of every training section.
    pub fn set_precision(&mut self, precision: Precision) {
        self.train.precision = precision;
        self.adapt.precision = precision;
    }

    pub fn seed_dir(&self, root: &Path, seed: u64) -> PathBuf {
        root.join(&self.experiment.name).join(format!("seed-{seed}"))
    }
}

/// The four datasets of one run.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub seed_train: Dataset,
    pub seed_valid: Dataset,
    pub adapt: Dataset,
    pub adapt_valid: Dataset,
}

fn data_seed(run_seed: u64, k: u64) -> u64 {
    run_seed.wrapping_mul(1_000).wrapping_add(k)
}

/// Loads the configured dataset files or generates the datasets for `seed`.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentData> {
    let d = &cfg.data;
    let get = |path: &Option<PathBuf>, domain: Domain, n: usize, speakers: usize, k: u64| -> Result<Dataset> {
        match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::config(format!("dataset file {} does not exist", p.display())));
                }
                corpus::load(p)
            }
            None => corpus::generate(&cfg.task, domain, n, speakers, data_seed(seed, k)),
        }
    };
    Ok(ExperimentData {
        seed_train: get(&d.seed_train_path, Domain::Seed, d.seed_train, d.seed_speakers, 1)?,
        seed_valid: get(&d.seed_valid_path, Domain::Seed, d.seed_valid, d.seed_speakers, 2)?,
        adapt: get(&d.adapt_path, Domain::Shifted, d.adapt, d.adapt_speakers, 3)?,
        adapt_valid: get(&d.adapt_valid_path, Domain::Shifted, d.adapt_valid, d.adapt_speakers, 4)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedTrainSummary {
    pub epoch_cers: Vec<f64>,
    pub best_epoch: usize,
    pub valid_cer: f64,
    pub shifted_cer: f64,
    pub seconds: f64,
}

/// Supervised seed-model training on SEED data; keeps the epoch with the
/// lowest validation error.
pub fn train_seed_model(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<(ModelParams, SeedTrainSummary, Trainer)> {
    let started = std::time::Instant::now();
    let mut params = ModelParams::init(&cfg.model, seed)?;
    let items = data
        .seed_train
        .utterances
        .iter()
        .map(TrainItem::supervised)
        .collect::<Result<Vec<_>>>()?;
    let train = TrainConfig { seed, ..cfg.train.clone() };
    let mut trainer = Trainer::new(train, &params)?;
    let max_len = cfg.selflearn.max_len;
    let mut best = (0, f64::INFINITY, params.clone());
    let mut epoch_cers = Vec::new();
    let epochs = cfg.train.max_epochs.max(1);
    trainer.plan_sampling(epochs, items.len());
    for epoch in 1..=epochs {
        trainer.train(&mut params, &items, TrainMode::Supervised, 1)?;
        let cer = evaluate_cer(&params, &data.seed_valid.utterances, max_len)?;
        epoch_cers.push(cer);
        if cer < best.1 {
            best = (epoch, cer, params.clone());
        }
    }
    let shifted_cer = evaluate_cer(&best.2, &data.adapt_valid.utterances, max_len)?;
    let summary = SeedTrainSummary {
        epoch_cers,
        best_epoch: best.0,
        valid_cer: best.1,
        shifted_cer,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best.2, summary, trainer))
}

/// An adaptation recipe: a self-learning method or the supervised upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Supervised,
    SelfLearn(Method),
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::Supervised,
        Recipe::SelfLearn(Method::OneBest),
        Recipe::SelfLearn(Method::Mll),
        Recipe::SelfLearn(Method::MtlSharedAed),
        Recipe::SelfLearn(Method::MtlSharedAe),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Supervised => "supervised",
            Recipe::SelfLearn(m) => m.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "supervised" {
            return Ok(Recipe::Supervised);
        }
        s.parse::<Method>().map(Recipe::SelfLearn).map_err(|_| {
            let names: Vec<_> = Recipe::ALL.iter().map(|r| r.name()).collect();
            Error::config(format!("unknown method `{s}`; valid methods: {}", names.join(", ")))
        })
    }
}

/// Adapts `seed_params` to the SHIFTED data with `recipe`.
pub fn adapt(cfg: &ExperimentConfig, data: &ExperimentData, seed_params: &ModelParams, recipe: Recipe, seed: u64) -> Result<(ModelParams, SelfLearnReport)> {
    let train = TrainConfig { seed, ..cfg.adapt.clone() };
    match recipe {
        Recipe::Supervised => supervised_adaptation(seed_params, &data.adapt.utterances, &data.adapt_valid.utterances, &cfg.selflearn, &train),
        Recipe::SelfLearn(method) => {
            let sl = SelfLearnConfig { method, ..cfg.selflearn.clone() };
            run_self_learning(seed_params, &data.adapt.utterances, &data.adapt_valid.utterances, &sl, &train)
        }
    }
}

/// Federated self-learning over per-speaker clients of the adaptation set.
pub fn federate(cfg: &ExperimentConfig, data: &ExperimentData, seed_params: &ModelParams, seed: u64) -> Result<(ModelParams, FedReport)> {
    let fed = cfg.fed.clone().ok_or_else(|| Error::config("the config has no [fed] section"))?;
    let fed = FedConfig { seed, ..fed };
    let mut clients = partition_by_speaker(&data.adapt.utterances)?;
    let train = TrainConfig { seed, ..cfg.adapt.clone() };
    run_federated(seed_params, &mut clients, &data.adapt_valid.utterances, &fed, &train)
}

/// Row order of result tables.
pub const METHOD_ORDER: [&str; 6] = ["seed", "supervised", "one_best", "mll", "mtl_shared_aed", "mtl_shared_ae"];

fn method_rank(m: &str) -> (usize, String) {
    let base = m.strip_prefix("fed_").unwrap_or(m);
    let fed = usize::from(m.starts_with("fed_"));
    match METHOD_ORDER.iter().position(|x| *x == base) {
        Some(i) => (fed * METHOD_ORDER.len() + i, String::new()),
        None => (2 * METHOD_ORDER.len(), m.to_string()),
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub per_seed: BTreeMap<u64, f64>,
    pub median: f64,
}

/// Final CER per (method, seed): records flagged final win, otherwise the
/// last iteration. `seed` rows keep the first value seen per seed.
pub fn summarize(records: &[MetricsRecord]) -> Vec<ReportRow> {
    let mut best: BTreeMap<(String, u64), (bool, usize, f64)> = BTreeMap::new();
    for r in records {
        let key = (r.method.clone(), r.seed);
        let cand = (r.is_final, r.iteration, r.cer);
        match best.get(&key) {
            Some(_) if r.method == "seed" => {}
            Some(&(f, it, _)) if (f, it) >= (cand.0, cand.1) => {}
            _ => {
                best.insert(key, cand);
            }
        }
    }
    let mut rows: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for ((m, s), (_, _, c)) in best {
        rows.entry(m).or_default().insert(s, c);
    }
    let mut out: Vec<ReportRow> = rows
        .into_iter()
        .map(|(method, per_seed)| {
            let mut v: Vec<f64> = per_seed.values().copied().collect();
            let median = median(&mut v).unwrap_or(f64::NAN);
            ReportRow { method, per_seed, median }
        })
        .collect();
    out.sort_by_key(|r| method_rank(&r.method));
    out
}

/// Text table: one row per method with its median and per-seed CERs (%).
pub fn render_table(rows: &[ReportRow]) -> String {
    let seeds: Vec<u64> = rows
        .iter()
        .flat_map(|r| r.per_seed.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:<20} {:>8}", "method", "median");
    for seed in &seeds {
        let _ = write!(s, " {:>8}", format!("s{seed}"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<20} {:>8.2}", r.method, 100.0 * r.median);
        for seed in &seeds {
            match r.per_seed.get(seed) {
                Some(c) => {
                    let _ = write!(s, " {:>8.2}", 100.0 * c);
                }
                None => {
                    let _ = write!(s, " {:>8}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Reads metrics files and returns the rendered table and its rows.
pub fn report(files: &[PathBuf]) -> Result<(String, Vec<ReportRow>)> {
    if files.is_empty() {
        return Err(Error::config("report needs at least one metrics file"));
    }
    let mut records = Vec::new();
    for f in files {
        records.extend(read_metrics(f)?);
    }
    let rows = summarize(&records);
    Ok((render_table(&rows), rows))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn final_record(experiment: &str, method: &str, seed: u64, iteration: usize, cer: f64) -> MetricsRecord {
    MetricsRecord {
        experiment: experiment.into(),
        method: method.into(),
        seed,
        iteration,
        cer,
        one_best_cer: None,
        oracle_cer: None,
        is_final: true,
    }
}

/// `train` for one seed: writes `seed.ckpt`, `train_log.jsonl` and metrics.
pub fn run_train(cfg: &ExperimentConfig, root: &Path, seed: u64) -> Result<SeedTrainSummary> {
    let dir = cfg.seed_dir(root, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let data = prepare_data(cfg, seed)?;
    let (params, summary, trainer) = train_seed_model(cfg, &data, seed)?;
    Checkpoint::new(params, RngState { seed, step: trainer.step }).save(&dir.join("seed.ckpt"))?;
    let log = dir.join("train_log.jsonl");
    let _ = fs::remove_file(&log);
    write_log(&log, &trainer.log)?;
    let metrics = dir.join("metrics.jsonl");
    append_metrics(&metrics, &[final_record(&cfg.experiment.name, "seed_train", seed, summary.best_epoch, summary.valid_cer)])?;
    write_text(&dir.join("seed_train.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn load_seed(dir: &Path) -> Result<ModelParams> {
    let path = dir.join("seed.ckpt");
    if !path.exists() {
        return Err(Error::config(format!("seed checkpoint {} does not exist; run `train` first", path.display())));
    }
    Ok(Checkpoint::load(&path)?.params)
}

/// `adapt` for one seed: loads `seed.ckpt`, writes `<method>.ckpt`, the
/// report and metrics.
pub fn run_adapt(cfg: &ExperimentConfig, root: &Path, seed: u64, recipe: Recipe) -> Result<SelfLearnReport> {
    let dir = cfg.seed_dir(root, seed);
    let seed_params = load_seed(&dir)?;
    let data = prepare_data(cfg, seed)?;
    let (params, report) = adapt(cfg, &data, &seed_params, recipe, seed)?;
    let name = recipe.name();
    Checkpoint::new(params, RngState { seed, step: 0 }).save(&dir.join(format!("{name}.ckpt")))?;
    write_text(&dir.join(format!("{name}_report.txt")), &report.render())?;
    write_text(&dir.join(format!("{name}_report.json")), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let mut records = report.metrics(&cfg.experiment.name, seed);
    records.push(final_record(&cfg.experiment.name, name, seed, report.best_iteration, report.best_cer));
    append_metrics(&dir.join("metrics.jsonl"), &records)?;
    Ok(report)
}

/// `fed` for one seed: loads `seed.ckpt`, writes `fed.ckpt`, round records
/// and metrics.
pub fn run_fed(cfg: &ExperimentConfig, root: &Path, seed: u64) -> Result<FedReport> {
    let dir = cfg.seed_dir(root, seed);
    let seed_params = load_seed(&dir)?;
    let data = prepare_data(cfg, seed)?;
    let (params, report) = federate(cfg, &data, &seed_params, seed)?;
    let method = format!("fed_{}", cfg.fed.as_ref().map_or("mtl_shared_ae", |f| f.method.name()));
    Checkpoint::new(params, RngState { seed, step: report.rounds.len() as u64 }).save(&dir.join("fed.ckpt"))?;
    let rounds: Vec<String> = report
        .rounds
        .iter()
        .map(|r| serde_json::to_string(r).expect("round serializes"))
        .collect();
    write_text(&dir.join("fed_rounds.jsonl"), &(rounds.join("\n") + "\n"))?;
    let mut records = report.metrics(&cfg.experiment.name, &method, seed);
    records.push(final_record(&cfg.experiment.name, &method, seed, report.rounds.len(), report.final_cer));
    append_metrics(&dir.join("metrics.jsonl"), &records)?;
    Ok(report)
}

/// Writes the four datasets of `seed` into `dir`.
pub fn run_gen_data(cfg: &ExperimentConfig, dir: &Path, seed: u64) -> Result<Vec<(PathBuf, usize)>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = prepare_data(cfg, seed)?;
    let mut out = Vec::new();
    for (name, ds) in [
        ("seed_train", &data.seed_train),
        ("seed_valid", &data.seed_valid),
        ("adapt", &data.adapt),
        ("adapt_valid", &data.adapt_valid),
    ] {
        let path = dir.join(format!("{name}.txt"));
        corpus::save(ds, &path)?;
        out.push((path, ds.len()));
    }
    Ok(out)
}

/// Finite-difference checks of every training loss on a tiny model
/// (hidden 4, vocabulary 5, three frames, three target tokens).
pub fn loss_gradchecks(seed: u64, step: f64, tolerance: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut cfg = ModelConfig::tiny(3, 4, 5);
    cfg.embed_dim = 3;
    cfg.attention_dim = 3;
    // a wide init keeps every gradient well above finite-difference noise
    let base = ModelParams::init_uniform(&cfg, seed, 0.5)?;
    let features = Tensor::new(vec![3, 3], (0..9).map(|i| ((i as f64 + seed as f64) * 0.731).sin()).collect())?;
    let utt = Utterance {
        id: "check".into(),
        speaker: None,
        features: features.clone(),
        reference: Some(vec![3, 4, EOS]),
    };
    let hyp = Hypothesis {
        tokens: vec![4, 3, EOS],
        score: -0.4,
        truncated: false,
    };
    let labels = vec![
        WeightedLabel { tokens: vec![3, 4, EOS], weight: 0.6, rank: 1 },
        WeightedLabel { tokens: vec![4, EOS], weight: 0.4, rank: 2 },
    ];
    let f64p = Precision::F64;
    let mut out = Vec::new();
    out.push((
        "supervised".to_string(),
        grad_check(&base, |p: &ModelParams| loss_and_grads(p, f64p, |s| supervised_loss(s, &utt, 0.1, 0.0, &mut NoSampling)), step, tolerance)?,
    ));
    out.push((
        "kd_1best".to_string(),
        grad_check(&base, |p: &ModelParams| loss_and_grads(p, f64p, |s| kd_1best_loss(s, &features, &hyp, 0.1)), step, tolerance)?,
    ));
    out.push((
        "mll_nbest".to_string(),
        grad_check(&base, |p: &ModelParams| loss_and_grads(p, f64p, |s| nbest_loss(s, &features, &labels, Dispatch::MultiLabel, 0.1)), step, tolerance)?,
    ));
    for (name, topology) in [("mtl_shared_aed", Topology::SharedAed), ("mtl_shared_ae", Topology::SharedAe)] {
        let mut branched = base.add_branches(2, topology)?;
        perturb_branches(&mut branched, seed);
        out.push((
            name.to_string(),
            grad_check(&branched, |p: &ModelParams| loss_and_grads(p, f64p, |s| nbest_loss(s, &features, &labels, Dispatch::MultiTask, 0.1)), step, tolerance)?,
        ));
    }
    Ok(out)
}

/// Makes branch copies differ so a check cannot pass by symmetry alone.
fn perturb_branches(p: &mut ModelParams, seed: u64) {
    let ids: Vec<_> = p.store().ids().filter(|&id| p.store().name(id).contains(".b1")).collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (j, v) in p.store_mut().get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((k * 31 + j) as f64 + seed as f64).cos();
        }
    }
}

/// Sampling source for teacher-forced checks; never drawn from at p = 0.
struct NoSampling;

impl rand::RngCore for NoSampling {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        dest.fill(0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, seed: u64, iteration: usize, cer: f64, is_final: bool) -> MetricsRecord {
        MetricsRecord {
            experiment: "e".into(),
            method: method.into(),
            seed,
            iteration,
            cer,
            one_best_cer: None,
            oracle_cer: None,
            is_final,
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_are_config_errors() {
        let e = ExperimentConfig::from_toml("[experiment]\nseeds = []\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_toml("[data]\nadapt_path = \"/no/such/file.txt\"\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("/no/such/file.txt"));
        let e = ExperimentConfig::from_toml("[model]\nbogus = 1\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn recipes_parse() {
        for r in Recipe::ALL {
            assert_eq!(Recipe::parse(r.name()).unwrap(), r);
        }
        let e = Recipe::parse("nope").unwrap_err();
        assert!(e.to_string().contains("supervised") && e.to_string().contains("mtl_shared_aed"));
    }

    #[test]
    fn table_rows_follow_method_order_and_medians() {
        let mut recs = Vec::new();
        for s in 1..=5 {
            recs.push(rec("seed", s, 0, 0.3, false));
            recs.push(rec("mtl_shared_ae", s, 1, 0.25, false));
            recs.push(rec("mtl_shared_ae", s, 2, 0.2 + s as f64 * 0.01, false));
            recs.push(rec("mtl_shared_ae", s, 1, 0.1 * s as f64, true));
            recs.push(rec("supervised", s, 3, 0.01, false));
            recs.push(rec("one_best", s, 2, 0.2, false));
            recs.push(rec("fed_mtl_shared_ae", s, 4, 0.22, true));
        }
        let rows = summarize(&recs);
        let order: Vec<_> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(order, ["seed", "supervised", "one_best", "mtl_shared_ae", "fed_mtl_shared_ae"]);
        let ae = &rows[3];
        assert_eq!(ae.per_seed.len(), 5);
        assert!((ae.median - 0.3).abs() < 1e-12);
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 6);
        let single = summarize(&[rec("mll", 1, 1, 0.2, true)]);
        assert_eq!(render_table(&single).lines().count(), 2);
    }

    #[test]
    fn all_loss_gradients_check() {
        for (name, report) in loss_gradchecks(3, 1e-4, 1e-4).unwrap() {
            assert!(report.passed(), "{name}: {report:?}");
        }
    }

    #[test]
    fn missing_seed_checkpoint_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = load_seed(dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("seed.ckpt"));
    }
}
