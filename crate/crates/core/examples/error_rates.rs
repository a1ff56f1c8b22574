// Edit-distance error counts, corpus CER and the N-best oracle error rate.

use nbest_selflearn::decoder::{Hypothesis, NBestList};
use nbest_selflearn::model::EOS;
use nbest_selflearn::metrics::{corpus_error_rate, edit_distance, nbest_oracle_error_rate};
use nbest_selflearn::{Error, Result};

fn hyp(symbols: &[usize], score: f64) -> Hypothesis {
    let mut tokens = symbols.to_vec();
    tokens.push(EOS);
    Hypothesis { tokens, score, truncated: false }
}

pub fn run_example() -> Result<()> {
    let reference: Vec<char> = "kitten".chars().collect();
    let hypothesis: Vec<char> = "sitting".chars().collect();
    let c = edit_distance(&reference, &hypothesis)?;
    println!(
        "kitten -> sitting: {} sub, {} del, {} ins over {} chars, rate {:.3}",
        c.substitutions, c.deletions, c.insertions, c.ref_len, c.rate()
    );
    if c.errors() != 3 {
        return Err(Error::invalid("expected three edits"));
    }

    let a: Vec<usize> = vec![3, 4, 5];
    let b: Vec<usize> = vec![6, 7];
    let cer = corpus_error_rate(&[(&a[..], &[3, 4][..]), (&b[..], &[6, 7][..])])?;
    println!("corpus CER over two utterances: {cer:.3}");

    // The first hypothesis is wrong but the runner-up is exact, so the
    // oracle picks it.
    let lists = vec![NBestList::new(vec![hyp(&[3, 4, 6], -0.2), hyp(&[3, 4, 5], -0.4)], 1.0)?];
    let oracle = nbest_oracle_error_rate(&[&a[..]], &lists)?;
    println!("1-best CER {:.3}, oracle CER {oracle:.3}", corpus_error_rate(&[(&a[..], &[3, 4, 6][..])])?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
