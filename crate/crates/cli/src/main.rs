use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sgdlab::config::ExperimentConfig;
use sgdlab::error::{CliError, Result};
use sgdlab::runner::{run_experiment, write_bundle, write_datasets, Mode};
use sgdlab::{report, verify};

/// Large-step SGD experiments: data generation, training sweeps, SDE
/// surrogates, invariant suites and reports.
#[derive(Parser, Debug)]
#[command(name = "sgdlab", version)]
struct Cli {
    /// Replace the config's seed list (repeatable).
    #[arg(long, global = true)]
    seed: Vec<u64>,

    /// Output root; bundles go to `<out>/<experiment>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset of every seed.
    GenData {
        /// Bundled config name or path to a TOML file.
        config: String,
    },
    /// Run every training run of a config and write the bundle.
    Train { config: String },
    /// Run the SDE reference and its paired Euler-Maruyama runs.
    SdeSim { config: String },
    /// Run an invariant suite: prop1, prop2, sde or gradients.
    Verify { suite: String },
    /// Render charts and the summary table of a bundle.
    Report { dir: PathBuf },
}

fn load(cli: &Cli, name: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(name)?;
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    let dir = cfg.bundle_dir(&cfg.out);
    Ok((cfg, dir))
}

fn experiment(cli: &Cli, name: &str, mode: Mode) -> Result<()> {
    let (cfg, dir) = load(cli, name)?;
    let res = run_experiment(&cfg, mode, cli.threads)?;
    write_bundle(&res, &dir)?;
    println!("wrote {}", dir.display());
    match res.diverged() {
        0 => Ok(()),
        k => Err(CliError::Diverged(k)),
    }
}

fn run_verify(cli: &Cli, suite: &str) -> Result<bool> {
    let rep = verify::run_suite(suite)?;
    for c in &rep.checks {
        println!("{} {} value={:e} tol={:e} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance, c.detail);
    }
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out")).join("verify");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{suite}.json")), serde_json::to_string_pretty(&rep)?)?;
    if suite == "prop2" {
        verify::write_prop2_trace(&dir)?;
    }
    println!("{} {suite}; wrote {}", if rep.pass { "PASS" } else { "FAIL" }, dir.display());
    Ok(rep.pass)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData { config } => {
            let (cfg, dir) = load(cli, config)?;
            write_datasets(&cfg, &dir)?;
            println!("wrote {}", dir.join("data").display());
        }
        Command::Train { config } => experiment(cli, config, Mode::Train)?,
        Command::SdeSim { config } => experiment(cli, config, Mode::Sde)?,
        Command::Verify { suite } => return run_verify(cli, suite),
        Command::Report { dir } => {
            for p in report::report(Path::new(dir))? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            eprintln!("run `sgdlab --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
