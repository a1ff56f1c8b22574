//! Losses and optimization.
//!
//! All sequence losses are per-token: the smoothed cross-entropy summed over
//! the target steps and divided by the target length. The weighted N-best
//! loss is `Σ_n q_n · loss(hypothesis n)`, evaluated through branch 0 for
//! multi-label learning or through branch `n-1` for multi-task learning. The
//! encoder runs once per utterance and its states are reused by every term.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore, Precision, Tensor, Var};
use crate::corpus::Utterance;
use crate::decoder::{beam_search_with, BeamConfig, Hypothesis, NBestList};
use crate::error::{Error, Result};
use crate::metrics::{edit_distance, ErrorCounts};
use crate::model::{Encoded, ModelParams, Session, SOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    Kd1Best,
    MllNbest,
    MtlNbest,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Supervised => "supervised",
            TrainMode::Kd1Best => "kd_1best",
            TrainMode::MllNbest => "mll_nbest",
            TrainMode::MtlNbest => "mtl_nbest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub label_smoothing: f64,
    /// Final scheduled-sampling probability.
    pub sampling_max: f64,
    /// Fraction of the planned steps over which sampling ramps up from 0.
    pub sampling_ramp: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub precision: Precision,
    /// Worker threads for per-utterance gradients (results are reduced in order).
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            label_smoothing: 0.1,
            sampling_max: 0.3,
            sampling_ramp: 0.5,
            batch_size: 16,
            max_epochs: 10,
            clip_norm: 5.0,
            precision: Precision::F64,
            threads: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.sampling_max) || !(0.0..=1.0).contains(&self.sampling_ramp) {
            return Err(Error::config("train.sampling_max and sampling_ramp must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config("train.learning_rate and epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1 and beta2 must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::config("train.batch_size and threads must be positive"));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::config("train.clip_norm must be non-negative"));
        }
        Ok(())
    }

    pub fn adam(&self) -> Optimizer {
        Optimizer::Adam {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    /// Scheduled-sampling probability after `step` of `planned` steps.
    pub fn sampling_probability(&self, step: u64, planned: u64) -> f64 {
        let ramp = self.sampling_ramp * planned as f64;
        if ramp <= 0.0 {
            return self.sampling_max;
        }
        self.sampling_max * (step as f64 / ramp).min(1.0)
    }
}

/// One hypothesis used as a training label together with its weight `q_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLabel {
    pub tokens: Vec<usize>,
    pub weight: f64,
    /// 1-based rank in the N-best list.
    pub rank: usize,
}

impl WeightedLabel {
    /// Labels for every entry of an N-best list, in rank order.
    pub fn from_nbest(list: &NBestList) -> Vec<WeightedLabel> {
        list.hypotheses
            .iter()
            .zip(&list.weights)
            .enumerate()
            .map(|(i, (h, &w))| WeightedLabel {
                tokens: h.tokens.clone(),
                weight: w,
                rank: i + 1,
            })
            .collect()
    }
}

/// How the terms of the weighted N-best loss map onto branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    /// Every term through branch 0.
    MultiLabel,
    /// Term `n` through branch `n-1`.
    MultiTask,
}

/// Per-token smoothed cross-entropy of `targets` decoded through `branch`.
///
/// At step `i > 0` the previous token is the target `y_{i-1}` with
/// probability `1-p`, otherwise it is drawn from the model's distribution at
/// step `i-1`. With `p = 0` the RNG is never touched.
pub fn sequence_loss(
    s: &mut Session<'_>,
    enc: &Encoded,
    branch: usize,
    targets: &[usize],
    smoothing: f64,
    sampling_p: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::invalid("empty target sequence"));
    }
    let mut state = s.initial_state();
    let mut prev = SOS;
    let mut terms = Vec::with_capacity(targets.len());
    for (i, &y) in targets.iter().enumerate() {
        let (lp, next) = s.decode_step(branch, prev, &state, enc)?;
        terms.push(s.graph.smoothed_cross_entropy(lp, y, smoothing)?);
        state = next;
        prev = if sampling_p > 0.0 && i + 1 < targets.len() && rng.gen::<f64>() < sampling_p {
            sample_token(s.graph.value(lp).data(), rng)
        } else {
            y
        };
    }
    let stacked = s.graph.concat(&terms)?;
    Ok(s.graph.mean(stacked))
}

fn sample_token(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Supervised loss on a labeled utterance.
pub fn supervised_loss(
    s: &mut Session<'_>,
    utt: &Utterance,
    smoothing: f64,
    sampling_p: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    let reference = utt
        .reference
        .as_deref()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::invalid(format!("utterance `{}` has no reference", utt.id)))?;
    let enc = s.encode(&utt.features)?;
    sequence_loss(s, &enc, 0, reference, smoothing, sampling_p, rng)
}

/// Teacher-forced loss against a single hypothesis through branch 0.
pub fn kd_1best_loss(s: &mut Session<'_>, features: &Tensor, hyp: &Hypothesis, smoothing: f64) -> Result<Var> {
    let enc = s.encode(features)?;
    sequence_loss(s, &enc, 0, &hyp.tokens, smoothing, 0.0, &mut NoRng)
}

/// `Σ_n q_n · loss(ŷ_n)` with the encoder evaluated once.
pub fn nbest_loss(
    s: &mut Session<'_>,
    features: &Tensor,
    labels: &[WeightedLabel],
    dispatch: Dispatch,
    smoothing: f64,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::invalid("nbest_loss needs at least one label"));
    }
    if dispatch == Dispatch::MultiTask && s.params().num_branches() < labels.len() {
        return Err(Error::invalid(format!(
            "{} labels need as many branches, model has {}",
            labels.len(),
            s.params().num_branches()
        )));
    }
    let enc = s.encode(features)?;
    let mut total: Option<Var> = None;
    for (n, label) in labels.iter().enumerate() {
        let branch = match dispatch {
            Dispatch::MultiLabel => 0,
            Dispatch::MultiTask => n,
        };
        let term = sequence_loss(s, &enc, branch, &label.tokens, smoothing, 0.0, &mut NoRng)?;
        let weighted = s.graph.scale(term, label.weight);
        total = Some(match total {
            None => weighted,
            Some(t) => s.graph.add(t, weighted)?,
        });
    }
    Ok(total.expect("at least one label"))
}

/// An RNG that must never be drawn from (teacher forcing).
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("teacher forcing does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("teacher forcing does not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("teacher forcing does not sample")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("teacher forcing does not sample")
    }
}

/// Runs `build` on a fresh training session and returns the loss value and
/// parameter gradients.
pub fn loss_and_grads<F>(params: &ModelParams, precision: Precision, build: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Session<'_>) -> Result<Var>,
{
    grads_with_dropout(params, precision, None, build)
}

fn grads_with_dropout<F>(params: &ModelParams, precision: Precision, dropout_seed: Option<u64>, build: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&mut Session<'_>) -> Result<Var>,
{
    let mut s = params.training_session(precision);
    if let Some(seed) = dropout_seed {
        s = s.with_dropout(seed);
    }
    let loss = build(&mut s)?;
    let grads = s.graph.backward(loss)?;
    let mut pg = ParamGrads::zeros(params.store());
    pg.accumulate(&grads, s.bound(), 1.0);
    Ok((s.graph.value(loss).item(), pg))
}

/// Value-only variant of [`loss_and_grads`].
pub fn loss_value<F>(params: &ModelParams, precision: Precision, build: F) -> Result<f64>
where
    F: FnOnce(&mut Session<'_>) -> Result<Var>,
{
    let mut s = params.session(precision);
    let loss = build(&mut s)?;
    Ok(s.graph.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        clip_norm: Option<f64>,
    },
    /// `θ ← θ - lr·g`.
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: ParamGrads,
    v: ParamGrads,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            m: ParamGrads::zeros(store),
            v: ParamGrads::zeros(store),
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub applied: bool,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer update. Non-finite gradients skip the step.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    opt: &Optimizer,
) -> Result<StepReport> {
    if grads.len() != store.len() {
        return Err(Error::invalid("gradient buffers do not match the parameters"));
    }
    let grad_norm = grads.norm();
    if !grads.is_finite() {
        return Ok(StepReport {
            applied: false,
            grad_norm,
        });
    }
    match *opt {
        Optimizer::Sgd { lr } => {
            for (id, g) in store.ids().zip(grads.iter()).collect::<Vec<_>>() {
                for (p, gv) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        }
        Optimizer::Adam {
            lr,
            beta1,
            beta2,
            epsilon,
            clip_norm,
        } => {
            let clip = match clip_norm {
                Some(c) if grad_norm > c => c / grad_norm,
                _ => 1.0,
            };
            state.steps += 1;
            let t = state.steps as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let ids: Vec<_> = store.ids().collect();
            for (((id, g), m), v) in ids.into_iter().zip(grads.iter()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
                let p = store.get_mut(id).data_mut();
                for i in 0..p.len() {
                    let gi = g[i] * clip;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + epsilon);
                }
            }
        }
    }
    Ok(StepReport {
        applied: true,
        grad_norm,
    })
}

/// Adam update with the configured hyperparameters.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut OptimizerState, config: &TrainConfig) -> Result<StepReport> {
    optimizer_step(store, grads, state, &config.adam())
}

/// Training target for one utterance.
///
/// Unsupervised paths only ever build [`Target::Hypotheses`], so a reference
/// transcript cannot reach their gradients.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Reference(&'a [usize]),
    Hypotheses(&'a [WeightedLabel]),
}

#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub features: &'a Tensor,
    pub target: Target<'a>,
}

impl<'a> TrainItem<'a> {
    pub fn supervised(utt: &'a Utterance) -> Result<Self> {
        let r = utt
            .reference
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("utterance `{}` has no reference", utt.id)))?;
        Ok(TrainItem {
            features: &utt.features,
            target: Target::Reference(r),
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub mode: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub sampling_p: f64,
    pub wall_time: f64,
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("log record serializes")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Mini-batch trainer holding optimizer state across calls.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    state: OptimizerState,
    pub step: u64,
    pub log: Vec<LogRecord>,
    /// Scheduled-sampling plan `(first step, planned steps)` spanning calls.
    plan: Option<(u64, u64)>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let optimizer = config.adam();
        Ok(Self::with_optimizer(config, optimizer, params))
    }

    pub fn with_optimizer(config: TrainConfig, optimizer: Optimizer, params: &ModelParams) -> Self {
        Trainer {
            config,
            optimizer,
            state: OptimizerState::new(params.store()),
            step: 0,
            log: Vec::new(),
            plan: None,
            started: Instant::now(),
        }
    }

    /// Spreads the scheduled-sampling ramp over `epochs` epochs of `n_items`
    /// items starting now, across any number of [`Trainer::train`] calls.
    pub fn plan_sampling(&mut self, epochs: usize, n_items: usize) {
        let per_epoch = n_items.div_ceil(self.config.batch_size) as u64;
        self.plan = Some((self.step, per_epoch * epochs as u64));
    }

    /// Forgets optimizer moments (needed after the parameter set changes shape).
    pub fn reset_state(&mut self, params: &ModelParams) {
        self.state = OptimizerState::new(params.store());
    }

    fn item_loss(&self, params: &ModelParams, item: &TrainItem<'_>, mode: TrainMode, p: f64, rng_seed: u64) -> Result<(f64, ParamGrads)> {
        let eps = self.config.label_smoothing;
        let dropout_seed = (params.config().dropout > 0.0).then_some(rng_seed ^ 0xd50);
        grads_with_dropout(params, self.config.precision, dropout_seed, |s| {
            match (mode, item.target) {
                (TrainMode::Supervised, Target::Reference(r)) => {
                    let enc = s.encode(item.features)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                    sequence_loss(s, &enc, 0, r, eps, p, &mut rng)
                }
                (TrainMode::Kd1Best, Target::Hypotheses(labels)) => {
                    let first = labels.first().ok_or_else(|| Error::invalid("no hypotheses"))?;
                    let enc = s.encode(item.features)?;
                    sequence_loss(s, &enc, 0, &first.tokens, eps, 0.0, &mut NoRng)
                }
                (TrainMode::MllNbest, Target::Hypotheses(labels)) => {
                    nbest_loss(s, item.features, labels, Dispatch::MultiLabel, eps)
                }
                (TrainMode::MtlNbest, Target::Hypotheses(labels)) => {
                    nbest_loss(s, item.features, labels, Dispatch::MultiTask, eps)
                }
                (mode, _) => Err(Error::invalid(format!("mode {} does not accept this target", mode.name()))),
            }
        })
    }

    fn batch_grads(&self, params: &ModelParams, batch: &[TrainItem<'_>], mode: TrainMode, p: f64) -> Result<(f64, ParamGrads)> {
        let seed_for = |i: usize| {
            self.config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(self.step.wrapping_mul(1_000_003))
                .wrapping_add(i as u64)
        };
        let results: Vec<Result<(f64, ParamGrads)>> = if self.config.threads > 1 && batch.len() > 1 {
            let chunk = batch.len().div_ceil(self.config.threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .enumerate()
                    .map(|(ci, items)| {
                        scope.spawn(move || {
                            items
                                .iter()
                                .enumerate()
                                .map(|(j, it)| self.item_loss(params, it, mode, p, seed_for(ci * chunk + j)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        } else {
            batch
                .iter()
                .enumerate()
                .map(|(i, it)| self.item_loss(params, it, mode, p, seed_for(i)))
                .collect()
        };
        let mut total = ParamGrads::zeros(params.store());
        let mut loss = 0.0;
        let k = 1.0 / batch.len() as f64;
        for r in results {
            let (l, g) = r?;
            loss += l * k;
            total.add_scaled(&g, k);
        }
        Ok((loss, total))
    }

    /// Runs `epochs` passes over `items`; returns the mean loss of each epoch.
    ///
    /// Items are shuffled per epoch with an RNG derived from the seed and the
    /// current step, so runs are reproducible.
    pub fn train(&mut self, params: &mut ModelParams, items: &[TrainItem<'_>], mode: TrainMode, epochs: usize) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Err(Error::invalid("no training items"));
        }
        let per_epoch = items.len().div_ceil(self.config.batch_size) as u64;
        let (first_step, planned) = self.plan.unwrap_or((self.step, per_epoch * epochs as u64));
        let mut epoch_losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..items.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.step.wrapping_mul(0x2545_F491_4F6C_DD1D));
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<TrainItem<'_>> = chunk.iter().map(|&i| items[i]).collect();
                let p = if mode == TrainMode::Supervised {
                    self.config.sampling_probability(self.step - first_step, planned)
                } else {
                    0.0
                };
                let (loss, grads) = self.batch_grads(params, &batch, mode, p)?;
                let report = optimizer_step(params.store_mut(), &grads, &mut self.state, &self.optimizer)?;
                sum += loss * batch.len() as f64;
                self.log.push(LogRecord {
                    step: self.step,
                    mode: mode.name().into(),
                    loss,
                    grad_norm: report.grad_norm,
                    sampling_p: p,
                    wall_time: self.started.elapsed().as_secs_f64(),
                });
                self.step += 1;
            }
            epoch_losses.push(sum / items.len() as f64);
        }
        Ok(epoch_losses)
    }

    /// Runs exactly `steps` optimizer updates, cycling through `items` in order.
    pub fn train_steps(&mut self, params: &mut ModelParams, items: &[TrainItem<'_>], mode: TrainMode, steps: usize) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Err(Error::invalid("no training items"));
        }
        let bs = self.config.batch_size.min(items.len());
        let mut cursor = 0;
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<TrainItem<'_>> = (0..bs).map(|j| items[(cursor + j) % items.len()]).collect();
            cursor = (cursor + bs) % items.len();
            let (loss, grads) = self.batch_grads(params, &batch, mode, 0.0)?;
            let report = optimizer_step(params.store_mut(), &grads, &mut self.state, &self.optimizer)?;
            self.log.push(LogRecord {
                step: self.step,
                mode: mode.name().into(),
                loss,
                grad_norm: report.grad_norm,
                sampling_p: 0.0,
                wall_time: self.started.elapsed().as_secs_f64(),
            });
            self.step += 1;
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Decodes every utterance (branch 0) and returns pooled error counts
/// against the references.
pub fn evaluate(params: &ModelParams, utterances: &[Utterance], beam: &BeamConfig, precision: Precision) -> Result<ErrorCounts> {
    let mut total = ErrorCounts::default();
    for u in utterances {
        let reference = u
            .symbols()
            .ok_or_else(|| Error::invalid(format!("utterance `{}` has no reference", u.id)))?;
        let list = beam_search_with(params, &u.features, beam, precision)?;
        let hyp = list.best().map(|h| h.symbols()).unwrap_or(&[]);
        total = total + edit_distance(reference, hyp)?;
    }
    Ok(total)
}

/// Pooled character error rate of greedy decoding.
pub fn evaluate_cer(params: &ModelParams, utterances: &[Utterance], max_len: usize) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::invalid("no utterances to evaluate"));
    }
    Ok(evaluate(params, utterances, &BeamConfig::greedy(max_len), Precision::F64)?.rate())
}
