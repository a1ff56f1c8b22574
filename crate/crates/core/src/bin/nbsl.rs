use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nbest_selflearn::autodiff::Precision;
use nbest_selflearn::experiment::{self, ExperimentConfig, Recipe, DEFAULT_OUTPUT_ROOT, OUTPUT_ENV};
use nbest_selflearn::{Error, Result};

#[derive(Parser)]
#[command(name = "nbsl", version, about = "Self-learning experiments for attention encoder-decoder models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); the built-in desk config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds overriding `experiment.seeds`.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output root.
    #[arg(long, env = OUTPUT_ENV)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Run the seeds concurrently.
    #[arg(long)]
    parallel_seeds: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train seed models on SEED data.
    Train(RunArgs),
    /// Adapt seed models to the SHIFTED data.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        /// supervised, one_best, mll, mtl_shared_aed or mtl_shared_ae.
        #[arg(long)]
        method: String,
        #[arg(long)]
        n_best: Option<usize>,
    },
    /// Federated self-learning over per-speaker clients.
    Fed {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        n_best: Option<usize>,
    },
    /// Comparison table from metrics files.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Machine-readable copy; `<output root>/report.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write the datasets of a run to disk.
    GenData(RunArgs),
}

fn output_root(out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    out.or_else(|| cfg.experiment.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &run.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &run.seeds {
        cfg.experiment.seeds = seeds.clone();
    }
    if let Some(p) = run.precision {
        cfg.set_precision(p.into());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `job` for every seed, serially or on one thread per seed, and
/// returns the first error in seed order.
fn for_each_seed<F>(seeds: &[u64], parallel: bool, job: F) -> Result<()>
where
    F: Fn(u64) -> Result<()> + Sync,
{
    if !parallel {
        return seeds.iter().try_for_each(|&s| job(s));
    }
    let job = &job;
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || job(s))).collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    results.into_iter().collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(run) => {
            let cfg = load_config(&run)?;
            let root = output_root(run.out.clone(), &cfg);
            for_each_seed(&cfg.experiment.seeds, run.parallel_seeds, |seed| {
                let s = experiment::run_train(&cfg, &root, seed)?;
                println!(
                    "seed {seed}: validation CER {:.2}% (epoch {}), shifted CER {:.2}%, {:.0}s -> {}",
                    100.0 * s.valid_cer,
                    s.best_epoch,
                    100.0 * s.shifted_cer,
                    s.seconds,
                    cfg.seed_dir(&root, seed).display()
                );
                Ok(())
            })
        }
        Command::Adapt { run, method, n_best } => {
            let recipe = Recipe::parse(&method)?;
            let mut cfg = load_config(&run)?;
            if let Some(n) = n_best {
                cfg.selflearn.n_best = n;
                cfg.validate()?;
            }
            let root = output_root(run.out.clone(), &cfg);
            for_each_seed(&cfg.experiment.seeds, run.parallel_seeds, |seed| {
                let report = experiment::run_adapt(&cfg, &root, seed, recipe)?;
                println!("seed {seed}\n{}", report.render());
                Ok(())
            })
        }
        Command::Fed { run, rounds, n_best } => {
            let mut cfg = load_config(&run)?;
            let fed = cfg.fed.get_or_insert_with(Default::default);
            if let Some(r) = rounds {
                fed.rounds = r;
            }
            if let Some(n) = n_best {
                fed.n_best = n;
            }
            cfg.validate()?;
            let root = output_root(run.out.clone(), &cfg);
            for_each_seed(&cfg.experiment.seeds, run.parallel_seeds, |seed| {
                let report = experiment::run_fed(&cfg, &root, seed)?;
                println!(
                    "seed {seed}: {} rounds, CER {:.2}% -> {:.2}%",
                    report.rounds.len(),
                    100.0 * report.seed_cer,
                    100.0 * report.final_cer
                );
                Ok(())
            })
        }
        Command::Report { files, out } => {
            let (table, rows) = experiment::report(&files)?;
            print!("{table}");
            let path = out.unwrap_or_else(|| {
                std::env::var_os(OUTPUT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
                    .join("report.json")
            });
            write_json(&path, &rows)
        }
        Command::Gradcheck { seed, step, tolerance } => {
            let mut failed = Vec::new();
            for (name, report) in experiment::loss_gradchecks(seed, step, tolerance)? {
                println!("{name}: max relative error {:.3e} ({})", report.max_rel_error, if report.passed() { "ok" } else { "FAILED" });
                for g in &report.groups {
                    println!("  {:<14} {:>5} elements  {:.3e}", g.group, g.elements, g.max_rel_error);
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
        Command::GenData(run) => {
            let cfg = load_config(&run)?;
            let root = output_root(run.out.clone(), &cfg);
            for &seed in &cfg.experiment.seeds {
                let dir = cfg.seed_dir(&root, seed).join("data");
                for (path, n) in experiment::run_gen_data(&cfg, &dir, seed)? {
                    println!("{n:>6} utterances -> {}", path.display());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
