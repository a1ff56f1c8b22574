// Adapts a SEED-trained model to SHIFTED data from its own N-best
// hypotheses, comparing the 1-best baseline with the shared-encoder
// multi-task method.

use nbest_selflearn::corpus::{self, Domain, TaskSpec};
use nbest_selflearn::model::{ModelConfig, ModelParams};
use nbest_selflearn::selflearn::{run_self_learning, Method, SelfLearnConfig};
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
    // References are dropped: adaptation only ever sees features.
    let adapt: Vec<_> = corpus::generate(&spec, Domain::Shifted, 80, 8, 3)?.utterances.iter().map(|u| u.unlabeled()).collect();
    let valid = corpus::generate(&spec, Domain::Shifted, 40, 8, 4)?.utterances;

    let train = TrainConfig { learning_rate: 3e-3, seed: 1, ..Default::default() };
    for method in [Method::OneBest, Method::MtlSharedAe] {
        let config = SelfLearnConfig { method, n_best: 4, nbest_epochs: 1, onebest_epochs: 1, max_iterations: 2, ..Default::default() };
        let (adapted, report) = run_self_learning(&seed, &adapt, &valid, &config, &train)?;
        print!("{}", report.render());
        println!("returned model has {} branch(es)\n", adapted.num_branches());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
