use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hinf::config::{self, prepare, robust_example, Overrides};
use hinf::output;
use hinf::runner::{run_experiment, RunError};

#[derive(Parser)]
#[command(name = "hinf", version, about = "Policy iteration experiments for stochastic H-infinity control")]
struct Cli {
    /// Replace the config's seed list by this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo paths H.
    #[arg(long, global = true, value_name = "H")]
    paths: Option<usize>,
    /// Euler steps per sampling interval G.
    #[arg(long, global = true, value_name = "G")]
    substeps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config.
    Run { config: PathBuf },
    /// Write the built-in example configs to --out, or print them.
    Examples,
    /// Validate a config without running it.
    Check { config: PathBuf },
}

fn overrides(cli: &Cli) -> Overrides {
    Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        paths: cli.paths,
        substeps: cli.substeps,
    }
}

fn examples(out: Option<&Path>) -> Result<(), RunError> {
    let mut all = config::builtin_examples();
    all.push(robust_example());
    match out {
        Some(dir) => {
            for cfg in &all {
                let path = dir.join(format!("{}.json", cfg.name));
                output::write_json(&path, cfg)?;
                println!("{}", path.display());
            }
        }
        None => println!("{}", serde_json::to_string_pretty(&all).expect("configs serialize")),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), RunError> {
    match &cli.command {
        Command::Check { config } => {
            let prep = prepare(config, &overrides(cli))?;
            println!(
                "ok: {} ({}), config hash {}",
                prep.experiment.name,
                prep.experiment.mode.as_str(),
                prep.hash
            );
        }
        Command::Run { config } => {
            let prep = prepare(config, &overrides(cli))?;
            let manifest = run_experiment(&prep)?;
            for c in &manifest.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!(
                "wrote {}",
                prep.experiment.output_dir.join(&prep.experiment.name).display()
            );
        }
        Command::Examples => examples(cli.out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
