use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use priocomm_core::comm::{write_comm_log, CommMode};
use priocomm_core::env::write_trace_csv;
use priocomm_core::nn::Checkpoint;
use priocomm_core::trainer::{
    eval_seed, evaluate_checkpoint, metrics_header, train, write_priority_trace, EvalReport, METRICS_VERSION,
};
use serde::Serialize;

use crate::config::{preset, RunConfig};
use crate::plot::{render_plot, PlotSummary};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const BANDWIDTH_FILE: &str = "bandwidth.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMM_LOG_FILE: &str = "comm_log.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const PRIORITY_TRACE_FILE: &str = "priority_trace.csv";
pub const ENV_TRACE_FILE: &str = "env_trace.csv";

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub mode: Option<CommMode>,
    pub seeds: Option<Vec<u64>>,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

/// Where one seed's artifacts went and how it finished.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    #[serde(skip)]
    pub dir: PathBuf,
    pub env_steps: u64,
    pub episodes: usize,
    pub initial_eval_control_reward: Option<f64>,
    pub final_eval_control_reward: Option<f64>,
    pub final_eval_penalty: Option<f64>,
}

/// Resolve a preset or config file plus command-line overrides.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(mode) = args.mode {
                cfg.network.mode = mode;
            }
            cfg
        }
        (None, Some(name)) => preset(name)?.config(args.mode.unwrap_or(CommMode::Priority)),
        (Some(_), Some(_)) => return Err(CliError::Config("give either --config or --preset, not both".into())),
        (None, None) => return Err(CliError::Config("one of --config or --preset is required".into())),
    };
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    let cfg = cfg.with_overrides(&args.overrides)?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Train every seed of the resolved config, writing one run directory each.
pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> Result<Vec<RunSummary>, CliError> {
    let cfg = resolve_config(args)?;
    let root = cfg.output_root(args.out.as_deref());
    let mut summaries = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let summary = train_seed(&cfg, seed, &root, args.quiet, log).map_err(|e| e.context(format!("seed {seed}")))?;
        summaries.push(summary);
    }
    Ok(summaries)
}

fn train_seed(
    cfg: &RunConfig,
    seed: u64,
    root: &Path,
    quiet: bool,
    log: &mut dyn Write,
) -> Result<RunSummary, CliError> {
    let dir = root.join(&cfg.name).join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;

    let snapshot = RunConfig {
        seeds: vec![seed],
        output_dir: None,
        ..cfg.clone()
    };
    let mut snap = create(&dir.join(CONFIG_FILE))?;
    writeln!(snap, "# resolved run configuration")?;
    snap.write_all(snapshot.to_toml().as_bytes())?;
    snap.flush()?;

    let mut metrics = create(&dir.join(METRICS_FILE))?;
    writeln!(
        metrics,
        "# priocomm metrics v{METRICS_VERSION} run={} seed={seed}",
        cfg.name
    )?;
    writeln!(
        metrics,
        "{}",
        metrics_header(cfg.env.n_agents, cfg.network.mode == CommMode::Priority)
    )?;
    let mut write_err = None;
    let outcome = train(&cfg.env, &cfg.network, &cfg.train, seed, |row| {
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{}", row.to_csv()).and_then(|_| metrics.flush()) {
                write_err = Some(e);
            }
        }
        if !quiet {
            let eval = row
                .eval_control_reward
                .map(|v| format!(" eval {v:.3}"))
                .unwrap_or_default();
            let ep = row
                .mean_episode_reward
                .map(|v| format!(" episode {v:.3}"))
                .unwrap_or_default();
            let _ = writeln!(log, "{} seed {seed} step {}{ep}{eval}", cfg.name, row.env_steps);
        }
    })?;
    if let Some(e) = write_err {
        return Err(CliError::Runtime(format!(
            "writing {}: {e}",
            dir.join(METRICS_FILE).display()
        )));
    }

    outcome
        .checkpoint
        .save(&dir.join(CHECKPOINT_FILE))
        .map_err(|e| CliError::Runtime(format!("checkpoint write failed: {e}")))?;
    write_json(&dir.join(BANDWIDTH_FILE), &outcome.bandwidth)?;
    if let Some(records) = &outcome.comm_log {
        let mut out = create(&dir.join(COMM_LOG_FILE))?;
        write_comm_log(&mut out, records, cfg.network.priority_levels)?;
        out.flush()?;
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        seed,
        dir: dir.clone(),
        env_steps: cfg.train.total_steps,
        episodes: outcome.episodes.len(),
        initial_eval_control_reward: outcome.initial_eval.as_ref().map(|r| r.mean_control_reward),
        final_eval_control_reward: outcome.final_eval.as_ref().map(|r| r.mean_control_reward),
        final_eval_penalty: outcome.final_eval.as_ref().map(|r| r.mean_penalty),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    if !quiet {
        writeln!(log, "{} seed {seed} done -> {}", cfg.name, dir.display())?;
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    /// Run directory holding `config.toml` and `checkpoint.bin`.
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub episodes: usize,
    /// Defaults to the evaluation seed used during training.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub env_trace: bool,
}

impl EvalArgs {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_dir: run_dir.into(),
            checkpoint: None,
            config: None,
            episodes: 10,
            seed: None,
            out: None,
            env_trace: false,
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalSummary<'a> {
    run: &'a str,
    seed: u64,
    episodes: usize,
    mean_control_reward: f64,
    mean_penalty: f64,
    episode_control_rewards: &'a [f64],
    bandwidth: &'a priocomm_core::comm::BandwidthStats,
}

pub fn cmd_eval(args: &EvalArgs, log: &mut dyn Write) -> Result<EvalReport, CliError> {
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run_dir.join(CHECKPOINT_FILE));
    let cfg_path = args.config.clone().unwrap_or_else(|| args.run_dir.join(CONFIG_FILE));
    for p in [&ckpt_path, &cfg_path] {
        if !p.is_file() {
            return Err(CliError::Config(format!("{} does not exist", p.display())));
        }
    }
    let cfg = RunConfig::load(&cfg_path)?;
    let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| CliError::Config(format!("{}: {e}", ckpt_path.display())))?;
    let seed = args.seed.unwrap_or_else(|| eval_seed(cfg.seeds[0]));
    let report = evaluate_checkpoint(
        &ckpt,
        &cfg.env,
        &cfg.network,
        &cfg.train,
        args.episodes,
        seed,
        args.env_trace,
    )
    .map_err(|e| CliError::from(e).context(ckpt_path.display()))?;

    let out = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    fs::create_dir_all(&out)?;
    write_json(
        &out.join(EVAL_SUMMARY_FILE),
        &EvalSummary {
            run: &cfg.name,
            seed,
            episodes: report.episodes,
            mean_control_reward: report.mean_control_reward,
            mean_penalty: report.mean_penalty,
            episode_control_rewards: &report.episode_control_rewards,
            bandwidth: &report.bandwidth,
        },
    )?;
    let mut trace = create(&out.join(PRIORITY_TRACE_FILE))?;
    write_priority_trace(&mut trace, cfg.env.n_agents, &report.trace)?;
    trace.flush()?;
    if args.env_trace {
        let mut t = create(&out.join(ENV_TRACE_FILE))?;
        write_trace_csv(&mut t, &report.env_trace)?;
        t.flush()?;
    }
    writeln!(
        log,
        "{}: {} episodes, mean control reward {:.4}, mean penalty {:.4}",
        cfg.name, report.episodes, report.mean_control_reward, report.mean_penalty
    )?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PlotArgs {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub metric: String,
    pub title: Option<String>,
}

pub fn cmd_plot(args: &PlotArgs, log: &mut dyn Write) -> Result<PlotSummary, CliError> {
    let summary = render_plot(&args.inputs, &args.metric, args.title.as_deref(), &args.out)?;
    for g in &summary.groups {
        writeln!(
            log,
            "{}: {} seed(s), final {} = {:.4} +- {:.4}",
            g.name,
            g.finals.len(),
            args.metric,
            g.final_mean(),
            g.final_std()
        )?;
    }
    for c in summary.comparisons() {
        writeln!(
            log,
            "{} vs {}: difference {:.4}, pooled std {:.4}",
            c.first, c.second, c.difference, c.pooled_std
        )?;
    }
    writeln!(log, "wrote {}", args.out.display())?;
    Ok(summary)
}
