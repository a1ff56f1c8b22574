// Supervised training of a small encoder-decoder on SEED data, reporting
// per-epoch loss and greedy CER on held-out SEED and SHIFTED utterances.

use nbest_selflearn::corpus::{self, Domain, TaskSpec};
use nbest_selflearn::model::{ModelConfig, ModelParams};
use nbest_selflearn::trainer::{evaluate_cer, TrainConfig, TrainItem, TrainMode, Trainer};
use nbest_selflearn::Result;

pub fn run_example() -> Result<()> {
    let spec = TaskSpec::default();
    let train = corpus::generate(&spec, Domain::Seed, 600, 8, 1)?;
    let valid = corpus::generate(&spec, Domain::Seed, 40, 8, 2)?;
    let shifted = corpus::generate(&spec, Domain::Shifted, 40, 8, 3)?;

    let cfg = ModelConfig::default();
    let mut params = ModelParams::init(&cfg, 1)?;
    println!("{} parameters", params.numel());
    let items = train.utterances.iter().map(TrainItem::supervised).collect::<Result<Vec<_>>>()?;
    let epochs = 6;
    let mut trainer = Trainer::new(TrainConfig { learning_rate: 3e-3, batch_size: 8, seed: 1, ..Default::default() }, &params)?;
    trainer.plan_sampling(epochs, items.len());
    for epoch in 1..=epochs {
        let loss = trainer.train(&mut params, &items, TrainMode::Supervised, 1)?[0];
        let cer = evaluate_cer(&params, &valid.utterances, 16)?;
        println!("epoch {epoch}: loss {loss:.3}, SEED CER {:.1}%", 100.0 * cer);
    }
    println!("SHIFTED CER {:.1}%", 100.0 * evaluate_cer(&params, &shifted.utterances, 16)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
