use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use priocomm_cli::commands::{EvalArgs, PlotArgs, TrainArgs};
use priocomm_cli::config::OUTPUT_ENV;
use priocomm_cli::{cmd_eval, cmd_plot, cmd_train, CliError, PRESETS};
use priocomm_core::comm::CommMode;

#[derive(Parser)]
#[command(
    name = "priocomm",
    version,
    about = "Train agents that learn both control and communication priority"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        /// TOML run configuration.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset (see `priocomm presets`).
        #[arg(long)]
        preset: Option<String>,
        /// priority or roundrobin.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<CommMode>,
        /// Comma-separated seeds, e.g. 0,1,2.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override a config field, e.g. --set train.actor_lr=1e-3.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output root directory.
        #[arg(long, env = OUTPUT_ENV)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a trained run with deterministic actions.
    Eval {
        /// Run directory written by `train`.
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the summary and traces (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-agent positions, velocities and actions.
        #[arg(long)]
        env_trace: bool,
    },
    /// Plot learning curves (mean and standard deviation across seeds).
    Plot {
        /// metrics.csv files; runs sharing a name are averaged.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short, default_value = "curves.svg")]
        out: PathBuf,
        #[arg(long, default_value = "eval_control_reward")]
        metric: String,
        #[arg(long)]
        title: Option<String>,
    },
    /// List the available presets.
    Presets,
}

fn parse_mode(s: &str) -> Result<CommMode, String> {
    s.parse().map_err(|e: priocomm_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut err = std::io::stderr();
    match cli.command {
        Command::Train {
            config,
            preset,
            mode,
            seeds,
            overrides,
            out,
            quiet,
        } => {
            let args = TrainArgs {
                config,
                preset,
                mode,
                seeds,
                overrides,
                out,
                quiet,
            };
            for s in cmd_train(&args, &mut err)? {
                println!(
                    "{} seed {}: final eval control reward {}",
                    s.name,
                    s.seed,
                    s.final_eval_control_reward.map_or("n/a".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Eval {
            run_dir,
            checkpoint,
            config,
            episodes,
            seed,
            out,
            env_trace,
        } => {
            let args = EvalArgs {
                run_dir,
                checkpoint,
                config,
                episodes,
                seed,
                out,
                env_trace,
            };
            cmd_eval(&args, &mut std::io::stdout())?;
        }
        Command::Plot {
            inputs,
            out,
            metric,
            title,
        } => {
            let args = PlotArgs {
                inputs,
                out,
                metric,
                title,
            };
            cmd_plot(&args, &mut std::io::stdout())?;
        }
        Command::Presets => {
            let mut out = std::io::stdout();
            for p in PRESETS {
                writeln!(out, "{:<20} {}", p.name, p.description)?;
            }
        }
    }
    Ok(())
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
