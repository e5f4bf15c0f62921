use std::path::PathBuf;
use std::process::ExitCode;

use adrfit_cli::commands::{cmd_estimate, cmd_generate, cmd_report, cmd_simulate, cmd_validate};
use adrfit_cli::config::Method;
use adrfit_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

/// Simulate chromatography experiments and calibrate SMA parameters.
#[derive(Debug, Parser)]
#[command(name = "adrfit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the configured one; `generate` defaults to the data directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured optimizer.
    #[arg(long, global = true)]
    optimizer: Option<String>,
    /// Overrides the search-evaluation budget.
    #[arg(long = "budget-evals", global = true)]
    budget_evals: Option<u64>,
    /// Adds a wall-time limit in seconds.
    #[arg(long = "budget-seconds", global = true)]
    budget_seconds: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write outlet profiles (and predictions for existing measurement files).
    Simulate {
        /// Parameters from a result bundle or ground-truth record; default is the configured ground truth.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Write synthetic measurements from the configured ground truth.
    Generate,
    /// Calibrate against the calibration experiments.
    Estimate,
    /// Score a result bundle on the validation experiments.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Tabulate bundles and write convergence CSVs.
    Report { bundles: Vec<PathBuf> },
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &cli.optimizer {
        cfg.optimizer.method = Method::parse(name)?;
    }
    if let Some(n) = cli.budget_evals {
        cfg.budget.evaluations = n;
    }
    if let Some(s) = cli.budget_seconds {
        cfg.budget.seconds = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    match &cli.command {
        Command::Simulate { bundle } => {
            for p in cmd_simulate(&cfg, bundle.as_deref(), &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Generate => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            for p in cmd_generate(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Estimate => {
            let res = cmd_estimate(&cfg, &out)?;
            println!(
                "{}: objective {:e} after {} evaluations ({:.1} s)",
                res.bundle.method, res.bundle.objective, res.bundle.statistics.total_evaluations, res.metadata.wall_s
            );
            for p in &res.files {
                println!("wrote {}", p.display());
            }
        }
        Command::Validate { bundle } => {
            let report = cmd_validate(&cfg, bundle, &out)?;
            for e in &report.experiments {
                print!("{}: total RSS {:e}", e.experiment, e.total_rss);
                if let Some(uv) = e.uv_rss {
                    print!(", UV {uv:e}");
                }
                for f in &e.fraction_rss {
                    print!(", {} {:e}", f.name, f.objective);
                }
                if let Some(s) = &e.outlet_sup_rel_error {
                    print!(", outlet sup error vs truth {:e}", s.uv);
                }
                println!();
            }
        }
        Command::Report { bundles } => {
            let (_, table) = cmd_report(bundles, &out)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adrfit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
