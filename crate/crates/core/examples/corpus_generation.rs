// Generates SEED and SHIFTED utterances, augments one and round-trips a
// dataset through the on-disk format.

use nbest_selflearn::corpus::{self, AugmentConfig, Domain, TaskSpec};
use nbest_selflearn::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> Result<()> {
    let spec = TaskSpec::default();
    let seed = corpus::generate(&spec, Domain::Seed, 6, 2, 11)?;
    let shifted = corpus::generate(&spec, Domain::Shifted, 6, 3, 11)?;
    println!("vocab {} ({} symbols), feature dim {}", spec.vocab_size(), spec.num_symbols(), spec.feature_dim);
    for u in seed.utterances.iter().take(3) {
        let text = spec.render(u.symbols().unwrap_or_default());
        println!("{} [{}] {:>2} frames  {text}", u.id, u.speaker.as_deref().unwrap_or("-"), u.frames());
    }

    // Same symbols, different prototypes: the shift moves every frame.
    let a = spec.prototypes(Domain::Seed);
    let b = spec.prototypes(Domain::Shifted);
    let moved: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    println!("prototype displacement under the shift: {moved:.3}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aug = AugmentConfig { amplitude: true, speed: true, noise: 0.05 };
    let u = corpus::augment(&seed.utterances[0], &aug, &mut rng);
    println!("augmented {}: {} -> {} frames", u.id, seed.utterances[0].frames(), u.frames());

    let dir = std::env::temp_dir().join(format!("nbsl-corpus-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("shifted.utts");
    let bytes = corpus::save(&shifted, &path)?;
    let back = corpus::load(&path)?;
    std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    println!("saved {} utterances in {bytes} bytes and reloaded them", back.len());
    if back != shifted {
        return Err(Error::invalid("dataset changed across save/load"));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
