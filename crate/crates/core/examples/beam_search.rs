// N-best beam search on a briefly trained model, with the hypothesis
// weights and a rescoring check against teacher-forced log-probabilities.

use nbest_selflearn::corpus::{self, Domain, TaskSpec};
use nbest_selflearn::decoder::{beam_search, sequence_log_prob, BeamConfig};
use nbest_selflearn::model::{ModelConfig, ModelParams};
use nbest_selflearn::trainer::{TrainConfig, TrainItem, TrainMode, Trainer};
use nbest_selflearn::{Error, Result};

pub fn run_example() -> Result<()> {
    let spec = TaskSpec::default();
    let data = corpus::generate(&spec, Domain::Seed, 64, 4, 5)?;
    let cfg = ModelConfig::tiny(spec.feature_dim, 16, spec.vocab_size());
    let mut params = ModelParams::init(&cfg, 5)?;
    let items = data.utterances.iter().map(TrainItem::supervised).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(TrainConfig { learning_rate: 1e-2, ..Default::default() }, &params)?;
    trainer.train(&mut params, &items, TrainMode::Supervised, 3)?;

    let utt = &data.utterances[0];
    let beam = BeamConfig { beam_width: 8, n_best: 4, max_len: 12, temperature: 1.0 };
    let list = beam_search(&params, &utt.features, &beam)?;
    println!("reference  {}", spec.render(utt.symbols().unwrap_or_default()));
    for (h, w) in list.hypotheses.iter().zip(&list.weights) {
        let forced = sequence_log_prob(&params, &utt.features, &h.tokens, 0)?;
        println!("{:<10} score {:>7.4}  weight {w:.3}  forced log-prob {forced:>8.4}", spec.render(h.symbols()), h.score);
        if (forced - h.log_prob()).abs() > 1e-9 {
            return Err(Error::invalid("beam score disagrees with teacher forcing"));
        }
    }
    let total: f64 = list.weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("weights do not sum to one"));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
