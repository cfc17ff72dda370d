use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shieldlab::gridworld::ObstacleKind;
use shieldlab::harness::{self, ExperimentConfig, TaskSpec};
use shieldlab::Result;

#[derive(Parser)]
#[command(name = "shieldlab", version, about = "Shielded exploration on crossing gridworlds")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set shield.rho=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (same as `--set out_dir=...`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write map files. Without `--size`, writes the env and every prior task.
    Gen {
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        crossings: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "lava")]
        obstacle: ObstacleKind,
    },
    /// Solve maps exactly and write their Q-tables.
    Solve {
        /// `kind:size:crossings:seed`; defaults to the env and prior tasks.
        #[arg(long)]
        task: Vec<TaskSpec>,
    },
    /// Build the prior Q-table from the prior tasks.
    Priors,
    /// Train the encoder on the prior tasks' states.
    TrainEncoder,
    /// Run every configured mode and seed.
    Run,
    /// Summarise run metrics per mode.
    Report,
    /// Print the resolved config.
    Config,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&harness::read_text(path)?)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Gen {
            size,
            crossings,
            seed,
            obstacle,
        } => {
            let tasks = match size {
                Some(size) => vec![TaskSpec {
                    obstacle,
                    size,
                    crossings,
                    seed,
                }],
                None => harness::all_tasks(&cfg),
            };
            print_paths(&harness::cmd_gen(&cfg, &tasks)?);
        }
        Command::Solve { task } => {
            let tasks = if task.is_empty() { harness::all_tasks(&cfg) } else { task };
            print_paths(&harness::cmd_solve(&cfg, &tasks)?);
        }
        Command::Priors => print_paths(&harness::cmd_priors(&cfg)?),
        Command::TrainEncoder => print_paths(&harness::cmd_train_encoder(&cfg)?),
        Command::Run => print_paths(&harness::cmd_run(&cfg)?),
        Command::Report => {
            let (path, text) = harness::cmd_report(&cfg)?;
            print!("{}", text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
            eprintln!("wrote {}", path.display());
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
