// Federated self-learning: one client per speaker decodes its own
// utterances, trains locally and sends only a parameter delta.

use nbest_selflearn::corpus::{self, Domain, TaskSpec};
use nbest_selflearn::fedsim::{partition_by_speaker, run_federated, FedConfig};
use nbest_selflearn::model::{ModelConfig, ModelParams};
use nbest_selflearn::selflearn::Method;
use nbest_selflearn::trainer::{TrainConfig, TrainItem, TrainMode, Trainer};
use nbest_selflearn::Result;

fn seed_model(spec: &TaskSpec) -> Result<ModelParams> {
    let train = corpus::generate(spec, Domain::Seed, 600, 8, 1)?;
    let mut params = ModelParams::init(&ModelConfig::default(), 1)?;
    let items = train.utterances.iter().map(TrainItem::supervised).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(TrainConfig { learning_rate: 3e-3, batch_size: 8, seed: 1, ..Default::default() }, &params)?;
    trainer.plan_sampling(6, items.len());
    trainer.train(&mut params, &items, TrainMode::Supervised, 6)?;
    Ok(params)
}

pub fn run_example() -> Result<()> {
    let spec = TaskSpec::default();
    let seed = seed_model(&spec)?;
    let adapt: Vec<_> = corpus::generate(&spec, Domain::Shifted, 96, 12, 3)?.utterances.iter().map(|u| u.unlabeled()).collect();
    let valid = corpus::generate(&spec, Domain::Shifted, 40, 8, 4)?.utterances;
    let mut clients = partition_by_speaker(&adapt)?;
    println!("{} clients, sizes {:?}", clients.len(), clients.iter().map(|c| c.len()).collect::<Vec<_>>());

    let config = FedConfig { cohort_size: 4, local_steps: 4, refresh_interval: 3, rounds: 6, method: Method::MtlSharedAe, eval_every: 3, seed: 1, ..Default::default() };
    let train = TrainConfig { learning_rate: 3e-3, batch_size: 4, seed: 1, ..Default::default() };
    let (_, report) = run_federated(&seed, &mut clients, &valid, &config, &train)?;
    for r in &report.rounds {
        let cer = r.validation_cer.map_or("-".to_string(), |c| format!("{:.1}%", 100.0 * c));
        println!("round {:>2}: clients {:?}, decoded {:?}, |Δ| {:.4}, CER {cer}", r.round, r.clients, r.decoded, r.aggregate_norm);
    }
    println!("CER {:.1}% -> {:.1}%", 100.0 * report.seed_cer, 100.0 * report.final_cer);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
