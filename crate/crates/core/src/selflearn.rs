//! The self-learning outer loop.
//!
//! Each iteration decodes the adaptation set with the current model, trains
//! on the weighted N-best hypotheses, fine-tunes on the 1-best hypothesis
//! and evaluates on the labeled validation set. The loop stops when the
//! validation error stops improving and returns the best checkpoint with
//! any extra branches removed.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::corpus::Utterance;
use crate::decoder::{beam_search_with, read_nbest, write_nbest, BeamConfig, NBestList};
use crate::error::{Error, Result};
use crate::metrics::{edit_distance, ErrorCounts, MetricsRecord};
use crate::model::{ModelParams, Topology};
use crate::trainer::{evaluate, TrainConfig, TrainItem, TrainMode, Target, Trainer, WeightedLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneBest,
    Mll,
    MtlSharedAed,
    MtlSharedAe,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::OneBest, Method::Mll, Method::MtlSharedAed, Method::MtlSharedAe];

    pub fn name(self) -> &'static str {
        match self {
            Method::OneBest => "one_best",
            Method::Mll => "mll",
            Method::MtlSharedAed => "mtl_shared_aed",
            Method::MtlSharedAe => "mtl_shared_ae",
        }
    }

    fn topology(self) -> Option<Topology> {
        match self {
            Method::MtlSharedAed => Some(Topology::SharedAed),
            Method::MtlSharedAe => Some(Topology::SharedAe),
            _ => None,
        }
    }

    fn nbest_mode(self) -> TrainMode {
        match self {
            Method::OneBest => TrainMode::Kd1Best,
            Method::Mll => TrainMode::MllNbest,
            Method::MtlSharedAed | Method::MtlSharedAe => TrainMode::MtlNbest,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::config(format!("unknown method `{s}`; valid methods: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfLearnConfig {
    pub n_best: usize,
    pub method: Method,
    pub nbest_epochs: usize,
    pub onebest_epochs: usize,
    pub max_iterations: usize,
    pub beam_width: usize,
    pub max_len: usize,
    /// Temperature of the hypothesis weights.
    pub temperature: f64,
    /// Smallest absolute validation-error decrease that counts as progress.
    pub min_improvement: f64,
}

impl Default for SelfLearnConfig {
    fn default() -> Self {
        SelfLearnConfig {
            n_best: 4,
            method: Method::MtlSharedAe,
            nbest_epochs: 2,
            onebest_epochs: 2,
            max_iterations: 4,
            beam_width: 8,
            max_len: 16,
            temperature: 1.0,
            min_improvement: 0.001,
        }
    }
}

impl SelfLearnConfig {
    /// Number of hypotheses trained on (1 for `one_best`).
    pub fn effective_n(&self) -> usize {
        if self.method == Method::OneBest {
            1
        } else {
            self.n_best
        }
    }

    /// Adaptation decode. `one_best` still decodes `n_best` hypotheses so its
    /// report carries an oracle; only the top one becomes a target.
    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_width: self.beam_width,
            n_best: self.n_best,
            max_len: self.max_len,
            temperature: self.temperature,
        }
    }

    /// Single-hypothesis beam used for validation decoding.
    pub fn eval_beam(&self) -> BeamConfig {
        BeamConfig { n_best: 1, ..self.beam() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 {
            return Err(Error::config("selflearn.n_best must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("selflearn.max_iterations must be at least 1"));
        }
        if self.method.topology().is_some() && self.n_best < 2 {
            return Err(Error::config("multi-task methods need n_best >= 2"));
        }
        if self.min_improvement < 0.0 {
            return Err(Error::config("selflearn.min_improvement must be non-negative"));
        }
        self.beam().validate().map_err(|e| Error::config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoImprovement,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// 1-best error of this iteration's decode on the adaptation set, when
    /// the adaptation utterances carry references (reporting only).
    pub adapt_one_best_cer: Option<f64>,
    pub adapt_oracle_cer: Option<f64>,
    pub validation_cer: f64,
    pub nbest_loss: f64,
    pub onebest_loss: f64,
    /// Utterances dropped because decoding produced no symbols.
    pub skipped: usize,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfLearnReport {
    pub method: String,
    pub n_best: usize,
    pub seed_cer: f64,
    pub iterations: Vec<IterationRecord>,
    /// 0 when no iteration beat the seed model.
    pub best_iteration: usize,
    pub best_cer: f64,
    pub stop_reason: StopReason,
}

impl SelfLearnReport {
    pub fn metrics(&self, experiment: &str, seed: u64) -> Vec<MetricsRecord> {
        let mut out = vec![MetricsRecord {
            experiment: experiment.into(),
            method: "seed".into(),
            seed,
            iteration: 0,
            cer: self.seed_cer,
            one_best_cer: None,
            oracle_cer: None,
            is_final: false,
        }];
        for it in &self.iterations {
            out.push(MetricsRecord {
                experiment: experiment.into(),
                method: self.method.clone(),
                seed,
                iteration: it.iteration,
                cer: it.validation_cer,
                one_best_cer: it.adapt_one_best_cer,
                oracle_cer: it.adapt_oracle_cer,
                is_final: false,
            });
        }
        out
    }

    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "method {} (N={}), seed CER {:.2}%", self.method, self.n_best, 100.0 * self.seed_cer);
        let _ = writeln!(s, "{:>4}  {:>9}  {:>9}  {:>9}  {:>8}  {:>8}  {:>7}", "iter", "adapt 1b", "oracle", "valid", "nb loss", "1b loss", "skipped");
        for it in &self.iterations {
            let _ = writeln!(
                s,
                "{:>4}  {:>9}  {:>9}  {:>9.2}  {:>8.4}  {:>8.4}  {:>7}",
                it.iteration,
                pct(it.adapt_one_best_cer),
                pct(it.adapt_oracle_cer),
                100.0 * it.validation_cer,
                it.nbest_loss,
                it.onebest_loss,
                it.skipped
            );
        }
        let _ = writeln!(
            s,
            "best iteration {} with CER {:.2}% ({:?})",
            self.best_iteration,
            100.0 * self.best_cer,
            self.stop_reason
        );
        s
    }
}

/// Beam-decodes every utterance, in input order.
pub fn decode_all(params: &ModelParams, utterances: &[Utterance], beam: &BeamConfig, precision: Precision, threads: usize) -> Result<Vec<NBestList>> {
    let one = |u: &Utterance| beam_search_with(params, &u.features, beam, precision);
    if threads <= 1 || utterances.len() < 2 {
        return utterances.iter().map(one).collect();
    }
    let chunk = utterances.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = utterances
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(utterances.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

/// Decodes `utterances` and writes their N-best lists to `path`.
pub fn cache_decodes(params: &ModelParams, utterances: &[Utterance], beam: &BeamConfig, path: &Path) -> Result<usize> {
    let lists = decode_all(params, utterances, beam, Precision::F64, 1)?;
    let named: Vec<(String, NBestList)> = utterances.iter().map(|u| u.id.clone()).zip(lists).collect();
    write_nbest(path, &named)
}

/// Reads a decode cache written by [`cache_decodes`].
pub fn load_decodes(path: &Path) -> Result<Vec<(String, NBestList)>> {
    read_nbest(path)
}

/// 1-best and oracle error counts of `lists` against references, when every
/// utterance has one.
fn decode_quality(utterances: &[Utterance], lists: &[NBestList]) -> Result<Option<(f64, f64)>> {
    let mut one = ErrorCounts::default();
    let mut oracle = ErrorCounts::default();
    for (u, list) in utterances.iter().zip(lists) {
        let Some(r) = u.symbols().filter(|r| !r.is_empty()) else {
            return Ok(None);
        };
        let mut counts = Vec::with_capacity(list.len());
        for h in &list.hypotheses {
            counts.push(edit_distance(r, h.symbols())?);
        }
        let first = counts.first().copied().unwrap_or(edit_distance(r, &[])?);
        let best = counts.iter().copied().min_by_key(|c| c.errors()).unwrap_or(first);
        one = one + first;
        oracle = oracle + best;
    }
    Ok(Some((one.rate(), oracle.rate())))
}

fn validation_cer(params: &ModelParams, validation: &[Utterance], beam: &BeamConfig, precision: Precision) -> Result<f64> {
    Ok(evaluate(params, validation, beam, precision)?.rate())
}

/// Runs self-learning from `seed` on the unlabeled adaptation set.
///
/// Adaptation references, if present, only feed the reported 1-best and
/// oracle error rates; training targets are built from decoded hypotheses.
pub fn run_self_learning(
    seed: &ModelParams,
    adaptation: &[Utterance],
    validation: &[Utterance],
    config: &SelfLearnConfig,
    train: &TrainConfig,
) -> Result<(ModelParams, SelfLearnReport)> {
    config.validate()?;
    if adaptation.is_empty() {
        return Err(Error::invalid("empty adaptation set"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let started = Instant::now();
    let beam = config.beam();
    let eval_beam = config.eval_beam();
    let seed_cer = validation_cer(seed, validation, &eval_beam, train.precision)?;
    let mut params = seed.strip_branches()?;
    let mut trainer = Trainer::new(train.clone(), &params)?;
    let mut best = (0, seed_cer, params.clone());
    let mut iterations = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;

    for iteration in 1..=config.max_iterations {
        let lists = decode_all(&params, adaptation, &beam, train.precision, train.threads)?;
        let quality = decode_quality(adaptation, &lists)?;

        let mut labels: Vec<(usize, Vec<WeightedLabel>)> = Vec::new();
        let mut skipped = 0;
        for (i, list) in lists.iter().enumerate() {
            match list.best() {
                Some(h) if !h.symbols().is_empty() => labels.push((i, WeightedLabel::from_nbest(list))),
                _ => skipped += 1,
            }
        }
        if labels.is_empty() {
            return Err(Error::invalid("every adaptation utterance decoded to an empty hypothesis"));
        }

        if let Some(topology) = config.method.topology() {
            if params.num_branches() < config.n_best {
                params = params.add_branches(config.n_best, topology)?;
                trainer.reset_state(&params);
            }
        }

        let items: Vec<TrainItem<'_>> = labels
            .iter()
            .map(|(i, l)| TrainItem {
                features: &adaptation[*i].features,
                target: Target::Hypotheses(l),
            })
            .collect();
        let nb = if config.nbest_epochs > 0 {
            trainer.train(&mut params, &items, config.method.nbest_mode(), config.nbest_epochs)?
        } else {
            Vec::new()
        };
        let ob = if config.onebest_epochs > 0 {
            trainer.train(&mut params, &items, TrainMode::Kd1Best, config.onebest_epochs)?
        } else {
            Vec::new()
        };
        let cer = validation_cer(&params, validation, &eval_beam, train.precision)?;
        iterations.push(IterationRecord {
            iteration,
            adapt_one_best_cer: quality.map(|q| q.0),
            adapt_oracle_cer: quality.map(|q| q.1),
            validation_cer: cer,
            nbest_loss: nb.last().copied().unwrap_or(f64::NAN),
            onebest_loss: ob.last().copied().unwrap_or(f64::NAN),
            skipped,
            elapsed: started.elapsed().as_secs_f64(),
        });
        let improved = cer <= best.1 - config.min_improvement;
        if cer < best.1 || (improved && cer == best.1) {
            best = (iteration, cer, params.clone());
        }
        if !improved {
            stop_reason = StopReason::NoImprovement;
            break;
        }
    }

    let report = SelfLearnReport {
        method: config.method.name().into(),
        n_best: config.effective_n(),
        seed_cer,
        iterations,
        best_iteration: best.0,
        best_cer: best.1,
        stop_reason,
    };
    Ok((best.2.strip_branches()?, report))
}

/// Supervised adaptation on the labeled adaptation set, an upper bound for
/// the self-learning methods. Uses the same iteration and stopping scheme
/// with `nbest_epochs + onebest_epochs` epochs per iteration.
pub fn supervised_adaptation(
    seed: &ModelParams,
    adaptation: &[Utterance],
    validation: &[Utterance],
    config: &SelfLearnConfig,
    train: &TrainConfig,
) -> Result<(ModelParams, SelfLearnReport)> {
    config.validate()?;
    if adaptation.is_empty() || validation.is_empty() {
        return Err(Error::invalid("supervised adaptation needs adaptation and validation data"));
    }
    let started = Instant::now();
    let eval_beam = config.eval_beam();
    let seed_cer = validation_cer(seed, validation, &eval_beam, train.precision)?;
    let mut params = seed.strip_branches()?;
    let items = adaptation.iter().map(TrainItem::supervised).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(train.clone(), &params)?;
    let mut best = (0, seed_cer, params.clone());
    let mut iterations = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let epochs = (config.nbest_epochs + config.onebest_epochs).max(1);
    for iteration in 1..=config.max_iterations {
        let losses = trainer.train(&mut params, &items, TrainMode::Supervised, epochs)?;
        let cer = validation_cer(&params, validation, &eval_beam, train.precision)?;
        iterations.push(IterationRecord {
            iteration,
            adapt_one_best_cer: None,
            adapt_oracle_cer: None,
            validation_cer: cer,
            nbest_loss: f64::NAN,
            onebest_loss: losses.last().copied().unwrap_or(f64::NAN),
            skipped: 0,
            elapsed: started.elapsed().as_secs_f64(),
        });
        let improved = cer <= best.1 - config.min_improvement;
        if cer < best.1 || (improved && cer == best.1) {
            best = (iteration, cer, params.clone());
        }
        if !improved {
            stop_reason = StopReason::NoImprovement;
            break;
        }
    }
    let report = SelfLearnReport {
        method: "supervised".into(),
        n_best: 0,
        seed_cer,
        iterations,
        best_iteration: best.0,
        best_cer: best.1,
        stop_reason,
    };
    Ok((best.2, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ModelConfig;

    fn params() -> ModelParams {
        let mut cfg = ModelConfig::tiny(3, 4, 6);
        cfg.embed_dim = 3;
        cfg.attention_dim = 3;
        ModelParams::init(&cfg, 2).unwrap()
    }

    fn utts(n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance {
                id: format!("u{i}"),
                speaker: None,
                features: Tensor::new(vec![2, 3], (0..6).map(|j| ((i * 6 + j) as f64 * 0.37).sin()).collect()).unwrap(),
                reference: Some(vec![3 + i % 3, 2]),
            })
            .collect()
    }

    #[test]
    fn method_names_round_trip_and_unknown_lists_valid() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "two_best".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("mtl_shared_ae") && err.contains("one_best"), "{err}");
    }

    #[test]
    fn config_rules() {
        let c = SelfLearnConfig { method: Method::OneBest, n_best: 4, ..Default::default() };
        assert_eq!(c.effective_n(), 1);
        assert!(c.validate().is_ok());
        assert!(SelfLearnConfig { n_best: 0, ..Default::default() }.validate().is_err());
        assert!(SelfLearnConfig { n_best: 1, method: Method::MtlSharedAed, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn cache_counts_and_round_trips() {
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nbest");
        let beam = BeamConfig { beam_width: 4, n_best: 4, max_len: 4, temperature: 1.0 };
        assert_eq!(cache_decodes(&p, &[], &beam, &path).unwrap(), 0);
        let us = utts(5);
        let n = cache_decodes(&p, &us, &beam, &path).unwrap();
        let back = load_decodes(&path).unwrap();
        assert_eq!(n, back.iter().map(|(_, l)| l.len()).sum::<usize>());
        let direct = decode_all(&p, &us, &beam, Precision::F64, 1).unwrap();
        for ((id, l), (u, d)) in back.iter().zip(us.iter().zip(&direct)) {
            assert_eq!(id, &u.id);
            assert_eq!(l.hypotheses.iter().map(|h| &h.tokens).collect::<Vec<_>>(), d.hypotheses.iter().map(|h| &h.tokens).collect::<Vec<_>>());
        }
    }

    #[test]
    fn threaded_decode_matches_serial() {
        let p = params();
        let us = utts(5);
        let beam = BeamConfig { beam_width: 3, n_best: 2, max_len: 4, temperature: 1.0 };
        assert_eq!(decode_all(&p, &us, &beam, Precision::F64, 1).unwrap(), decode_all(&p, &us, &beam, Precision::F64, 3).unwrap());
    }

    #[test]
    fn empty_adaptation_set_is_an_error() {
        let p = params();
        let r = run_self_learning(&p, &[], &utts(2), &SelfLearnConfig::default(), &TrainConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn returned_model_is_single_and_matches_best_cer() {
        let mut p = params();
        let us = utts(6);
        let items: Vec<_> = us.iter().map(|u| TrainItem::supervised(u).unwrap()).collect();
        let warm = TrainConfig { batch_size: 6, learning_rate: 2e-2, ..Default::default() };
        Trainer::new(warm, &p).unwrap().train_steps(&mut p, &items, TrainMode::Supervised, 40).unwrap();
        let cfg = SelfLearnConfig {
            method: Method::MtlSharedAe,
            n_best: 2,
            beam_width: 3,
            max_len: 4,
            nbest_epochs: 1,
            onebest_epochs: 1,
            max_iterations: 2,
            min_improvement: 0.0,
            ..Default::default()
        };
        let train = TrainConfig { batch_size: 3, learning_rate: 1e-2, ..Default::default() };
        let (out, report) = run_self_learning(&p, &us, &us, &cfg, &train).unwrap();
        assert_eq!(out.num_branches(), 1);
        assert_eq!(out.numel(), p.numel());
        let cer = validation_cer(&out, &us, &cfg.eval_beam(), Precision::F64).unwrap();
        assert_eq!(cer, report.best_cer);
        let min = report.iterations.iter().map(|i| i.validation_cer).fold(report.seed_cer, f64::min);
        assert!(report.best_cer <= min);
        assert!(report.iterations.iter().all(|i| i.adapt_oracle_cer <= i.adapt_one_best_cer));
    }
}
