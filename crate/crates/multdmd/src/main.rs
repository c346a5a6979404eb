//! Thin CLI over the pipeline commands.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use multdmd::config::RunConfig;
use multdmd::pipeline;
use multdmd::ResolvedConfig;

#[derive(Parser)]
#[command(name = "multdmd", version, about = "Structure-preserving Koopman spectral analysis")]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Cap the worker thread count (results are identical at any setting).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Global seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate or ingest snapshot data and write it out.
    Generate,
    /// Distortion of the clustering per dictionary size.
    Elbow,
    /// Dictionary, transition weights, estimators, spectra and residuals.
    Fit,
    /// POD-compress a field file into coefficient snapshots.
    Pod,
    /// Physical-space Koopman modes of the multiplicative fit.
    Modes,
    /// Data autocorrelations against model-predicted spectral moments.
    Moments,
}

fn load_config(cli: &Cli) -> multdmd::Result<ResolvedConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve()
}

fn run(cli: &Cli) -> multdmd::Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Generate => {
            let s = pipeline::cmd_generate(&cfg)?;
            println!(
                "generated {} pairs (d = {}) -> {} [config {}]",
                s.pairs,
                s.dim,
                cfg.out_dir.display(),
                s.config_hash
            );
        }
        Command::Elbow => {
            let s = pipeline::cmd_elbow(&cfg)?;
            for (n, d) in &s.curve {
                println!("N = {n:6}  distortion = {d:.6}");
            }
            println!("-> {} [config {}]", cfg.out_dir.display(), s.config_hash);
        }
        Command::Fit => {
            let s = pipeline::cmd_fit(&cfg)?;
            println!("fit: {} pairs over {} cells", s.pairs, s.cells);
            if s.removed_cells > 0 {
                println!("  merged {} empty cells", s.removed_cells);
            }
            for (name, count, worst) in &s.spectra {
                if worst.is_nan() {
                    println!("  {name}: {count} eigenvalues");
                } else {
                    println!("  {name}: {count} retained eigenvalues, max residual {worst:.3e}");
                }
            }
            println!("-> {} [config {}]", cfg.out_dir.display(), s.config_hash);
        }
        Command::Pod => {
            let s = pipeline::cmd_pod(&cfg)?;
            println!(
                "pod: {} snapshots of dimension {} -> rank {} ({} pairs)",
                s.snapshots, s.dim, s.rank, s.pairs
            );
            for (k, e) in s.energy_fractions.iter().enumerate() {
                println!("  mode {k}: cumulative energy {e:.6}");
            }
            println!("-> {} [config {}]", cfg.out_dir.display(), s.config_hash);
        }
        Command::Modes => {
            let s = pipeline::cmd_modes(&cfg)?;
            println!("modes: {} eigenpairs over {} field components", s.modes, s.field_dim);
            println!("-> {} [config {}]", cfg.out_dir.display(), s.config_hash);
        }
        Command::Moments => {
            let s = pipeline::cmd_moments(&cfg)?;
            println!(
                "moments: max |model - data| = {:.3e} over n <= {} (basis condition {:.3e})",
                s.max_abs_diff, s.n_max, s.condition_number
            );
            if s.conditioning_warning {
                println!("  warning: eigenvector basis condition number exceeds 1e8");
            }
            println!("-> {} [config {}]", cfg.out_dir.display(), s.config_hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
