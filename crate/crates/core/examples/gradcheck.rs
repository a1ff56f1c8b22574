// Finite-difference check of every training loss on a tiny model.

use nbest_selflearn::{Error, Result};

pub fn run_example() -> Result<()> {
    let mut failed = Vec::new();
    for (name, report) in nbest_selflearn::experiment::loss_gradchecks(1, 1e-4, 1e-4)? {
        println!("{name:<16} max relative error {:.2e}", report.max_rel_error);
        for g in &report.groups {
            println!("  {:<14} {:>5} {:.2e}", g.group, g.elements, g.max_rel_error);
        }
        if !report.passed() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example()
}
