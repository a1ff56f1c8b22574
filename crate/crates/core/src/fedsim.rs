//! Federated self-learning simulation.
//!
//! Every round the server samples a cohort, each cohort member adapts a copy
//! of the global model on hypotheses it decoded itself, and only parameter
//! deltas travel back. The server folds the deltas in client-id order and
//! applies the aggregate as a pseudo-gradient through its optimizer.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, ParamStore, Precision};
use crate::corpus::Utterance;
use crate::decoder::{BeamConfig, NBestList};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{ModelParams, Topology};
use crate::selflearn::{decode_all, Method};
use crate::trainer::{evaluate, optimizer_step, Optimizer, OptimizerState, Target, TrainConfig, TrainItem, TrainMode, Trainer, WeightedLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    SampleProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub cohort_size: usize,
    /// Local optimizer steps per participation.
    pub local_steps: usize,
    /// Rounds between hypothesis refreshes for a client.
    pub refresh_interval: u64,
    pub rounds: u64,
    pub weighting: Weighting,
    /// Server update on the pseudo-gradient `-Δ`; `sgd` with lr 1 applies Δ as is.
    pub server: Optimizer,
    /// Client optimizer; Adam from the train section when absent.
    pub local_optimizer: Option<Optimizer>,
    pub method: Method,
    pub n_best: usize,
    pub beam_width: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// Validation is decoded every this many rounds (0: only at the end).
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            cohort_size: 8,
            local_steps: 10,
            refresh_interval: 512,
            rounds: 40,
            weighting: Weighting::SampleProportional,
            server: Optimizer::Sgd { lr: 1.0 },
            local_optimizer: None,
            method: Method::MtlSharedAe,
            n_best: 4,
            beam_width: 8,
            max_len: 16,
            temperature: 1.0,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cohort_size == 0 {
            return Err(Error::config("fed.cohort_size must be at least 1"));
        }
        if self.refresh_interval == 0 {
            return Err(Error::config("fed.refresh_interval must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("fed.local_steps must be at least 1"));
        }
        if self.n_best == 0 || (matches!(self.method, Method::MtlSharedAed | Method::MtlSharedAe) && self.n_best < 2) {
            return Err(Error::config("fed.n_best must be at least 1 (2 for multi-task methods)"));
        }
        self.beam().validate().map_err(|e| Error::config(e.to_string()))
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam_width: self.beam_width,
            n_best: if self.method == Method::OneBest { 1 } else { self.n_best },
            max_len: self.max_len,
            temperature: self.temperature,
        }
    }

    pub fn mode(&self) -> TrainMode {
        match self.method {
            Method::OneBest => TrainMode::Kd1Best,
            Method::Mll => TrainMode::MllNbest,
            Method::MtlSharedAed | Method::MtlSharedAe => TrainMode::MtlNbest,
        }
    }

    pub fn topology(&self) -> Option<Topology> {
        match self.method {
            Method::MtlSharedAed => Some(Topology::SharedAed),
            Method::MtlSharedAe => Some(Topology::SharedAe),
            _ => None,
        }
    }
}

/// One simulated speaker. Its utterances and hypotheses never leave it.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: String,
    utterances: Vec<Utterance>,
    hypotheses: Option<Vec<NBestList>>,
    last_decode: Option<u64>,
    pub local_steps: u64,
}

impl Client {
    /// References are dropped on the way in.
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(Error::invalid(format!("client `{id}` has no utterances")));
        }
        Ok(Client {
            id,
            utterances: utterances.iter().map(Utterance::unlabeled).collect(),
            hypotheses: None,
            last_decode: None,
            local_steps: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance_ids(&self) -> impl Iterator<Item = &str> {
        self.utterances.iter().map(|u| u.id.as_str())
    }

    pub fn last_decode(&self) -> Option<u64> {
        self.last_decode
    }

    /// Replaces the cached hypotheses with a fresh decode by `global`.
    pub fn decode(&mut self, global: &ModelParams, beam: &BeamConfig, precision: Precision, round: u64) -> Result<()> {
        self.hypotheses = Some(decode_all(global, &self.utterances, beam, precision, 1)?);
        self.last_decode = Some(round);
        Ok(())
    }

    /// Adapts a copy of `global` for `steps` optimizer steps and returns the
    /// parameter delta.
    pub fn local_update(&mut self, global: &ModelParams, mode: TrainMode, optimizer: Optimizer, train: &TrainConfig, steps: usize) -> Result<ClientUpdate> {
        let lists = self
            .hypotheses
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("client `{}` has not decoded", self.id)))?;
        let labels: Vec<(usize, Vec<WeightedLabel>)> = lists
            .iter()
            .enumerate()
            .filter(|(_, l)| l.best().is_some_and(|h| !h.symbols().is_empty()))
            .map(|(i, l)| (i, WeightedLabel::from_nbest(l)))
            .collect();
        let mut local = global.clone();
        if !labels.is_empty() {
            let mut items: Vec<TrainItem<'_>> = labels
                .iter()
                .map(|(i, l)| TrainItem {
                    features: &self.utterances[*i].features,
                    target: Target::Hypotheses(l),
                })
                .collect();
            let bs = train.batch_size.min(items.len());
            let offset = (self.local_steps as usize * bs) % items.len();
            items.rotate_left(offset);
            let mut trainer = Trainer::with_optimizer(train.clone(), optimizer, &local);
            trainer.train_steps(&mut local, &items, mode, steps)?;
            self.local_steps += steps as u64;
        }
        let mut delta = ParamGrads::zeros(global.store());
        for ((d, l), g) in delta.iter_mut().zip(local.store().iter()).zip(global.store().iter()) {
            for ((dv, lv), gv) in d.iter_mut().zip(l.2.data()).zip(g.2.data()) {
                *dv = lv - gv;
            }
        }
        Ok(ClientUpdate {
            client_id: self.id.clone(),
            delta,
            sample_count: labels.len(),
        })
    }
}

/// The only thing a client sends to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub delta: ParamGrads,
    pub sample_count: usize,
}

/// One client per distinct speaker, in speaker-id order; utterances within a
/// client are ordered by id.
pub fn partition_by_speaker(utterances: &[Utterance]) -> Result<Vec<Client>> {
    let mut groups: BTreeMap<&str, Vec<Utterance>> = BTreeMap::new();
    for u in utterances {
        let spk = u
            .speaker
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("utterance `{}` has no speaker id", u.id)))?;
        groups.entry(spk).or_default().push(u.clone());
    }
    groups
        .into_iter()
        .map(|(spk, mut us)| {
            us.sort_by(|a, b| a.id.cmp(&b.id));
            Client::new(spk, us)
        })
        .collect()
}

/// Indices of clients whose hypotheses must be refreshed at `counter`.
pub fn schedule_decodes(clients: &[Client], counter: u64, interval: u64) -> Vec<usize> {
    clients
        .iter()
        .enumerate()
        .filter(|(_, c)| match c.last_decode {
            None => true,
            Some(last) => counter.saturating_sub(last) >= interval,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Convex combination of client deltas, folded in client-id order.
pub fn aggregate(updates: &[ClientUpdate], weighting: Weighting) -> Result<ParamGrads> {
    let first = updates.first().ok_or_else(|| Error::invalid("no client updates to aggregate"))?;
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let weights: Vec<f64> = match weighting {
        Weighting::Uniform => vec![1.0 / order.len() as f64; order.len()],
        Weighting::SampleProportional => {
            let total: usize = order.iter().map(|u| u.sample_count).sum();
            if total == 0 {
                vec![1.0 / order.len() as f64; order.len()]
            } else {
                order.iter().map(|u| u.sample_count as f64 / total as f64).collect()
            }
        }
    };
    aggregate_weighted(&order.iter().map(|u| &u.delta).collect::<Vec<_>>(), &weights, first.delta.len())
}

/// `Σ w_c Δ_c` over deltas given in fold order.
pub fn aggregate_weighted(deltas: &[&ParamGrads], weights: &[f64], params: usize) -> Result<ParamGrads> {
    if deltas.len() != weights.len() || deltas.is_empty() {
        return Err(Error::invalid("aggregate needs one weight per delta"));
    }
    let mut out = deltas[0].clone();
    out.scale(0.0);
    for (d, &w) in deltas.iter().zip(weights) {
        if d.len() != params {
            return Err(Error::invalid("client deltas have different parameter sets"));
        }
        out.add_scaled(d, w);
    }
    Ok(out)
}

/// Boundary where the deltas would be encrypted before leaving the clients.
fn secure_boundary(updates: Vec<ClientUpdate>) -> Vec<ClientUpdate> {
    updates
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub clients: Vec<String>,
    pub decoded: Vec<String>,
    pub client_delta_norms: Vec<f64>,
    pub aggregate_norm: f64,
    pub validation_cer: Option<f64>,
}

/// Server-side state that persists across rounds.
#[derive(Debug, Clone)]
pub struct Server {
    pub params: ModelParams,
    state: OptimizerState,
    pub round: u64,
}

impl Server {
    pub fn new(params: ModelParams) -> Self {
        let state = OptimizerState::new(params.store());
        Server { params, state, round: 0 }
    }
}

/// Samples the cohort for `round`: sorted client indices.
pub fn sample_cohort(n_clients: usize, cohort: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if cohort > n_clients {
        return Err(Error::config(format!("cohort size {cohort} exceeds the {n_clients} available clients")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);
    let mut idx = sample(&mut rng, n_clients, cohort).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// One federated round: broadcast, refresh due decodes, local adaptation,
/// aggregation and the server step.
pub fn run_round(server: &mut Server, clients: &mut [Client], config: &FedConfig, train: &TrainConfig) -> Result<RoundRecord> {
    let round = server.round;
    let cohort = sample_cohort(clients.len(), config.cohort_size, config.seed, round)?;
    let beam = config.beam();
    let optimizer = config.local_optimizer.unwrap_or_else(|| train.adam());
    let mut decoded = Vec::new();
    let mut updates = Vec::with_capacity(cohort.len());
    let participants: Vec<Client> = cohort.iter().map(|&i| clients[i].clone()).collect();
    let due = schedule_decodes(&participants, round, config.refresh_interval);
    for (k, &i) in cohort.iter().enumerate() {
        let client = &mut clients[i];
        if due.contains(&k) {
            client.decode(&server.params, &beam, train.precision, round)?;
            decoded.push(client.id.clone());
        }
        let local_train = TrainConfig {
            seed: train.seed ^ config.seed.rotate_left(17) ^ round.wrapping_mul(0x9E37_79B9) ^ i as u64,
            ..train.clone()
        };
        updates.push(client.local_update(&server.params, config.mode(), optimizer, &local_train, config.local_steps)?);
    }
    let updates = secure_boundary(updates);
    let client_delta_norms = updates.iter().map(|u| u.delta.norm()).collect();
    let clients_ids = updates.iter().map(|u| u.client_id.clone()).collect();
    let delta = aggregate(&updates, config.weighting)?;
    let mut pseudo_grad = delta.clone();
    pseudo_grad.scale(-1.0);
    optimizer_step(server.params.store_mut(), &pseudo_grad, &mut server.state, &config.server)?;
    server.round += 1;
    Ok(RoundRecord {
        round,
        clients: clients_ids,
        decoded,
        client_delta_norms,
        aggregate_norm: delta.norm(),
        validation_cer: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedReport {
    pub seed_cer: f64,
    pub final_cer: f64,
    pub rounds: Vec<RoundRecord>,
}

impl FedReport {
    pub fn metrics(&self, experiment: &str, method: &str, seed: u64) -> Vec<MetricsRecord> {
        let record = |method: &str, iteration: usize, cer: f64| MetricsRecord {
            experiment: experiment.into(),
            method: method.into(),
            seed,
            iteration,
            cer,
            one_best_cer: None,
            oracle_cer: None,
            is_final: false,
        };
        let mut out = vec![record("seed", 0, self.seed_cer)];
        out.extend(
            self.rounds
                .iter()
                .filter_map(|r| r.validation_cer.map(|c| record(method, r.round as usize + 1, c))),
        );
        if self.rounds.last().and_then(|r| r.validation_cer).is_none() {
            out.push(record(method, self.rounds.len(), self.final_cer));
        }
        out
    }
}

/// Runs `config.rounds` rounds starting from `seed` and returns the final
/// single-branch global model.
pub fn run_federated(
    seed: &ModelParams,
    clients: &mut [Client],
    validation: &[Utterance],
    config: &FedConfig,
    train: &TrainConfig,
) -> Result<(ModelParams, FedReport)> {
    config.validate()?;
    train.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("no clients"));
    }
    if config.cohort_size > clients.len() {
        return Err(Error::config(format!(
            "cohort size {} exceeds the {} available clients",
            config.cohort_size,
            clients.len()
        )));
    }
    let eval_beam = BeamConfig { n_best: 1, ..config.beam() };
    let cer = |p: &ModelParams| -> Result<f64> {
        if validation.is_empty() {
            Ok(f64::NAN)
        } else {
            Ok(evaluate(p, validation, &eval_beam, train.precision)?.rate())
        }
    };
    let seed_cer = cer(seed)?;
    let mut global = seed.strip_branches()?;
    if let Some(t) = config.topology() {
        global = global.add_branches(config.n_best, t)?;
    }
    let mut server = Server::new(global);
    let mut rounds = Vec::with_capacity(config.rounds as usize);
    for r in 0..config.rounds {
        let mut record = run_round(&mut server, clients, config, train)?;
        if config.eval_every > 0 && (r + 1) % config.eval_every == 0 {
            record.validation_cer = Some(cer(&server.params)?);
        }
        rounds.push(record);
    }
    let final_params = server.params.strip_branches()?;
    let final_cer = match rounds.last().and_then(|r| r.validation_cer) {
        Some(c) => c,
        None if config.rounds == 0 => seed_cer,
        None => cer(&final_params)?,
    };
    Ok((final_params, FedReport { seed_cer, final_cer, rounds }))
}

/// Parameter-wise difference `a - b`.
pub fn param_delta(a: &ParamStore, b: &ParamStore) -> Result<ParamGrads> {
    if a.len() != b.len() {
        return Err(Error::invalid("parameter sets differ"));
    }
    let mut d = ParamGrads::zeros(a);
    for ((dv, x), y) in d.iter_mut().zip(a.iter()).zip(b.iter()) {
        if x.2.shape() != y.2.shape() {
            return Err(Error::invalid(format!("parameter `{}` differs in shape", x.1)));
        }
        for ((o, p), q) in dv.iter_mut().zip(x.2.data()).zip(y.2.data()) {
            *o = p - q;
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamId, Tensor};
    use crate::model::ModelConfig;

    fn utt(id: &str, spk: Option<&str>) -> Utterance {
        Utterance {
            id: id.into(),
            speaker: spk.map(String::from),
            features: Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            reference: Some(vec![3, 2]),
        }
    }

    #[test]
    fn partition_counts_and_order_invariance() {
        let mut us = Vec::new();
        for s in 0..3 {
            for i in 0..10 {
                us.push(utt(&format!("u{s}-{i:02}"), Some(&format!("spk{s}"))));
            }
        }
        let clients = partition_by_speaker(&us).unwrap();
        assert_eq!(clients.iter().map(Client::len).collect::<Vec<_>>(), vec![10, 10, 10]);
        let mut rev = us.clone();
        rev.reverse();
        let again = partition_by_speaker(&rev).unwrap();
        for (a, b) in clients.iter().zip(&again) {
            assert_eq!(a.id, b.id);
            assert!(a.utterance_ids().eq(b.utterance_ids()));
        }
        assert!(clients.iter().all(|c| c.utterances.iter().all(|u| u.reference.is_none())));
        assert_eq!(partition_by_speaker(&us[..4]).unwrap().len(), 1);
        assert!(partition_by_speaker(&[utt("x", None)]).is_err());
    }

    #[test]
    fn refresh_schedule() {
        let mut c = Client::new("a", vec![utt("u", Some("a"))]).unwrap();
        assert_eq!(schedule_decodes(std::slice::from_ref(&c), 0, 512), vec![0]);
        c.last_decode = Some(0);
        assert!(schedule_decodes(std::slice::from_ref(&c), 511, 512).is_empty());
        assert_eq!(schedule_decodes(std::slice::from_ref(&c), 512, 512), vec![0]);
        c.last_decode = Some(7);
        assert_eq!(schedule_decodes(std::slice::from_ref(&c), 8, 1), vec![0]);
    }

    fn grads(store: &ParamStore, values: &[f64]) -> ParamGrads {
        let mut g = ParamGrads::zeros(store);
        g.get_mut(ParamId(0)).copy_from_slice(values);
        g
    }

    #[test]
    fn aggregation_is_the_stated_convex_combination() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.0; 3])).unwrap();
        let a = ClientUpdate { client_id: "b".into(), delta: grads(&store, &[1.0, -2.0, 4.0]), sample_count: 3 };
        let b = ClientUpdate { client_id: "a".into(), delta: grads(&store, &[-3.0, 2.0, 0.5]), sample_count: 1 };
        let agg = aggregate(&[a.clone(), b.clone()], Weighting::SampleProportional).unwrap();
        let expect: Vec<f64> = (0..3).map(|i| 0.75 * a.delta.get(ParamId(0))[i] + 0.25 * b.delta.get(ParamId(0))[i]).collect();
        for (x, y) in agg.get(ParamId(0)).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
        let uni = aggregate(&[a.clone(), b.clone()], Weighting::Uniform).unwrap();
        assert!(uni.norm() <= a.delta.norm().max(b.delta.norm()));
        let same = aggregate(&[a.clone(), ClientUpdate { client_id: "c".into(), ..a.clone() }], Weighting::Uniform).unwrap();
        assert_eq!(same, a.delta);
    }

    #[test]
    fn cohort_sampling_is_seeded_and_checked() {
        let a = sample_cohort(10, 4, 3, 5).unwrap();
        assert_eq!(a, sample_cohort(10, 4, 3, 5).unwrap());
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let err = sample_cohort(3, 4, 0, 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains('4') && err.to_string().contains('3'));
    }

    #[test]
    fn zero_rounds_returns_the_seed() {
        let mut cfg = ModelConfig::tiny(3, 4, 6);
        cfg.embed_dim = 3;
        cfg.attention_dim = 3;
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut clients = partition_by_speaker(&[utt("a", Some("s"))]).unwrap();
        let fc = FedConfig { rounds: 0, cohort_size: 1, n_best: 2, beam_width: 2, max_len: 4, ..Default::default() };
        let (out, report) = run_federated(&p, &mut clients, &[], &fc, &TrainConfig::default()).unwrap();
        assert_eq!(out, p);
        assert!(report.rounds.is_empty());
    }
}
