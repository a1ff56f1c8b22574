use nbest_selflearn::corpus::{self, Domain, TaskSpec, Utterance};
use nbest_selflearn::fedsim::{partition_by_speaker, run_federated, FedConfig};
use nbest_selflearn::model::{ModelConfig, ModelParams};
use nbest_selflearn::selflearn::{run_self_learning, Method, SelfLearnConfig};
use nbest_selflearn::trainer::{TrainConfig, TrainItem, TrainMode, Trainer};

struct Setup {
    seed: ModelParams,
    adapt: Vec<Utterance>,
    valid: Vec<Utterance>,
}

fn setup() -> Setup {
    let spec = TaskSpec::default();
    let train = corpus::generate(&spec, Domain::Seed, 64, 4, 21).unwrap();
    let mut seed = ModelParams::init(&ModelConfig::tiny(spec.feature_dim, 8, spec.vocab_size()), 21).unwrap();
    let items: Vec<_> = train.utterances.iter().map(|u| TrainItem::supervised(u).unwrap()).collect();
    let mut t = Trainer::new(TrainConfig { learning_rate: 2e-2, batch_size: 8, ..Default::default() }, &seed).unwrap();
    t.train(&mut seed, &items, TrainMode::Supervised, 4).unwrap();
    Setup {
        seed,
        adapt: corpus::generate(&spec, Domain::Shifted, 16, 4, 22).unwrap().utterances,
        valid: corpus::generate(&spec, Domain::Shifted, 8, 2, 23).unwrap().utterances,
    }
}

fn small_config(method: Method) -> SelfLearnConfig {
    SelfLearnConfig { method, n_best: 3, nbest_epochs: 1, onebest_epochs: 1, max_iterations: 2, beam_width: 3, max_len: 10, ..Default::default() }
}

#[test]
fn adaptation_references_never_reach_training() {
    let s = setup();
    let train = TrainConfig { batch_size: 4, ..Default::default() };
    let corrupted: Vec<Utterance> = s
        .adapt
        .iter()
        .map(|u| Utterance { reference: Some(vec![3, 3, 3, 3, 3, 2]), ..u.clone() })
        .collect();
    let unlabeled: Vec<Utterance> = s.adapt.iter().map(Utterance::unlabeled).collect();
    for method in Method::ALL {
        let cfg = small_config(method);
        let (p_clean, r_clean) = run_self_learning(&s.seed, &s.adapt, &s.valid, &cfg, &train).unwrap();
        let (p_bad, r_bad) = run_self_learning(&s.seed, &corrupted, &s.valid, &cfg, &train).unwrap();
        let (p_none, r_none) = run_self_learning(&s.seed, &unlabeled, &s.valid, &cfg, &train).unwrap();
        assert_eq!(p_clean, p_bad, "{method:?}");
        assert_eq!(p_clean, p_none, "{method:?}");
        let trajectory = |r: &nbest_selflearn::selflearn::SelfLearnReport| -> Vec<(u64, u64, u64)> {
            r.iterations.iter().map(|i| (i.validation_cer.to_bits(), i.nbest_loss.to_bits(), i.onebest_loss.to_bits())).collect()
        };
        assert_eq!(trajectory(&r_clean), trajectory(&r_bad));
        assert_eq!(trajectory(&r_clean), trajectory(&r_none));
        // Only the reported decode quality sees references.
        assert!(r_none.iterations.iter().all(|i| i.adapt_one_best_cer.is_none() && i.adapt_oracle_cer.is_none()));
        assert!(r_clean.iterations.iter().all(|i| i.adapt_oracle_cer <= i.adapt_one_best_cer));
    }
}

#[test]
fn self_learning_is_deterministic() {
    let s = setup();
    let train = TrainConfig { batch_size: 4, seed: 5, ..Default::default() };
    let cfg = small_config(Method::MtlSharedAed);
    let (a, ra) = run_self_learning(&s.seed, &s.adapt, &s.valid, &cfg, &train).unwrap();
    let (b, rb) = run_self_learning(&s.seed, &s.adapt, &s.valid, &cfg, &train).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.best_cer.to_bits(), rb.best_cer.to_bits());
    assert_eq!(a.num_branches(), 1);
}

#[test]
fn federated_runs_are_deterministic_and_threads_do_not_matter() {
    let s = setup();
    let cfg = FedConfig { cohort_size: 2, local_steps: 2, refresh_interval: 2, rounds: 4, n_best: 2, beam_width: 2, max_len: 10, seed: 3, ..Default::default() };
    let run = |threads: usize| {
        let mut clients = partition_by_speaker(&s.adapt).unwrap();
        let train = TrainConfig { batch_size: 4, threads, seed: 3, ..Default::default() };
        run_federated(&s.seed, &mut clients, &s.valid, &cfg, &train).unwrap()
    };
    let (p1, r1) = run(1);
    let (p2, r2) = run(1);
    let (p3, r3) = run(2);
    assert_eq!(p1, p2);
    assert_eq!(r1, r2);
    assert_eq!(p1, p3);
    assert_eq!(r1, r3);
    assert_eq!(r1.rounds.len(), 4);
    assert!(r1.rounds[0].decoded.len() == 2);
}

#[test]
fn shifted_error_grows_with_rotation() {
    // Reduced-scale seed models; the median over three seeds must not
    // decrease as the rotation angle grows.
    let base = TaskSpec::default();
    let angles = [0.0, 10.0, 25.0, 50.0];
    let mut per_angle = vec![Vec::new(); angles.len()];
    for seed in 1..=3u64 {
        let train = corpus::generate(&base, Domain::Seed, 400, 8, seed).unwrap();
        let mut p = ModelParams::init(&ModelConfig::default(), seed).unwrap();
        let items: Vec<_> = train.utterances.iter().map(|u| TrainItem::supervised(u).unwrap()).collect();
        let mut t = Trainer::new(TrainConfig { learning_rate: 3e-3, batch_size: 8, seed, ..Default::default() }, &p).unwrap();
        t.train(&mut p, &items, TrainMode::Supervised, 5).unwrap();
        for (k, &angle) in angles.iter().enumerate() {
            let spec = TaskSpec { shift_angle_deg: angle, ..base.clone() };
            let valid = corpus::generate(&spec, Domain::Shifted, 60, 4, 100 + seed).unwrap();
            per_angle[k].push(nbest_selflearn::trainer::evaluate_cer(&p, &valid.utterances, 16).unwrap());
        }
    }
    let medians: Vec<f64> = per_angle.iter_mut().map(|v| nbest_selflearn::metrics::median(v).unwrap()).collect();
    assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
}
