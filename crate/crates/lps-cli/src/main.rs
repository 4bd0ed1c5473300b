//! `lps` — train, evaluate, sweep, and diagnose latent-steering agents.
//!
//! Config precedence everywhere: command-line flag > TOML config file >
//! built-in default. The fully resolved config is echoed to stdout and into
//! the metrics file header, so a run can always be reproduced from its
//! artifacts alone.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lps_core::agents::{load_train_state, AgentKind};
use lps_core::critic::Aggregation;
use lps_core::envlab::{generate_demos, save_dataset, ArtifactProfile, EnvSpec};
use lps_core::harness::{
    bootstrap_mean_ci, eval_state_policy, latent_cosine_grid, read_metrics, run_sweep, run_train,
    ExperimentConfig,
};
use lps_core::latent::Geometry;
use lps_core::tensor::Tensor;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lps", version, about = "Latent policy steering laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a demonstration dataset and write it to disk.
    GenData(GenDataOpts),
    /// Train one agent and write metrics plus a checkpoint.
    Train(TrainOpts),
    /// Evaluate a checkpoint on its environment.
    Eval(EvalOpts),
    /// Train one run per alpha value and summarize.
    Sweep(SweepOpts),
    /// Latent-gradient diagnostics for a distilled-critic checkpoint.
    Diagnose(DiagnoseOpts),
    /// Bootstrap summary of final returns across metrics files.
    Summarize(SummarizeOpts),
}

#[derive(Args)]
struct GenDataOpts {
    /// Environment name (pointmass-nav, corner-bandit, corner-bandit-h1).
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 7777)]
    seed: u64,
    /// Drop actuation noise, pauses, and detours from the demonstrator.
    #[arg(long)]
    clean: bool,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

/// Every field is optional: unset flags fall through to the config file and
/// then to the built-in defaults.
#[derive(Args, Clone)]
struct ConfigOverrides {
    /// TOML config file to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<AgentKind>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    demo_episodes: Option<usize>,
    #[arg(long)]
    demo_seed: Option<u64>,
    #[arg(long)]
    clean_demos: Option<bool>,
    /// Pre-built dataset file (skips demo generation).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    p_equal: Option<f64>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    base_loss_scale: Option<f64>,
    #[arg(long, value_parser = parse_geometry)]
    geometry: Option<Geometry>,
    /// Comma-separated hidden widths, e.g. 64,64.
    #[arg(long, value_parser = parse_widths)]
    base_hidden: Option<Widths>,
    #[arg(long, value_parser = parse_widths)]
    actor_hidden: Option<Widths>,
    #[arg(long, value_parser = parse_widths)]
    critic_hidden: Option<Widths>,
    /// Critic ensemble size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_agg)]
    target_agg: Option<Aggregation>,
    #[arg(long, value_parser = parse_agg)]
    actor_agg: Option<Aggregation>,
    #[arg(long)]
    normalize_q: Option<bool>,
}

#[derive(Args)]
struct TrainOpts {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Output directory for metrics and the checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment the checkpoint was trained on.
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepOpts {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Alpha values, e.g. --alphas 0.1,3,300.
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseOpts {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grid points per axis.
    #[arg(long, default_value_t = 21)]
    grid: usize,
    /// Half-width of the latent grid.
    #[arg(long, default_value_t = 2.0)]
    span: f64,
    /// Replace the distilled critic by the exact composition (machinery check).
    #[arg(long)]
    self_test: bool,
    /// Optional file for the full per-cell report.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeOpts {
    /// Metrics files; the final eval return of each becomes one sample.
    #[arg(required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kind(s: &str) -> Result<AgentKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_geometry(s: &str) -> Result<Geometry, String> {
    match s {
        "sphere" => Ok(Geometry::Sphere),
        "normal" => Ok(Geometry::Normal),
        "truncated" => Ok(Geometry::Truncated),
        other => Err(format!("unknown geometry '{other}' (sphere|normal|truncated)")),
    }
}

fn parse_agg(s: &str) -> Result<Aggregation, String> {
    match s {
        "min" => Ok(Aggregation::Min),
        "mean" => Ok(Aggregation::Mean),
        other => Err(format!("unknown aggregation '{other}' (min|mean)")),
    }
}

/// Wrapper so clap parses a width list as one value instead of appending
/// one `usize` per occurrence.
#[derive(Clone)]
struct Widths(Vec<usize>);

impl From<Widths> for Vec<usize> {
    fn from(w: Widths) -> Self {
        w.0
    }
}

fn parse_widths(s: &str) -> Result<Widths, String> {
    s.split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|e| format!("bad width '{w}': {e}")))
        .collect::<Result<Vec<usize>, String>>()
        .map(Widths)
}

impl ConfigOverrides {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_toml_file(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone().into(); })*
            };
        }
        set!(
            kind, env, seed, steps, batch_size, eval_interval, eval_episodes, demo_episodes,
            demo_seed, clean_demos, checkpoint_interval, h, lr, gamma, tau, alpha, p_equal,
            flow_steps, base_loss_scale, base_hidden, actor_hidden, critic_hidden, k, target_agg,
            actor_agg, normalize_q
        );
        if let Some(ds) = &self.dataset {
            cfg.dataset = Some(ds.display().to_string());
        }
        if let Some(g) = self.geometry {
            cfg.geometry = Some(g);
        }
        Ok(cfg.resolved())
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(o) => gen_data(o),
        Cmd::Train(o) => train(o),
        Cmd::Eval(o) => eval(o),
        Cmd::Sweep(o) => sweep(o),
        Cmd::Diagnose(o) => diagnose(o),
        Cmd::Summarize(o) => summarize(o),
    }
}

fn gen_data(o: GenDataOpts) -> anyhow::Result<()> {
    let spec = EnvSpec::by_name(&o.env)?;
    let profile = if o.clean { ArtifactProfile::clean() } else { ArtifactProfile::default() };
    let ds = generate_demos(&spec, o.episodes, &profile, o.seed)?;
    save_dataset(&o.out, &ds)?;
    println!(
        "wrote {}: {} episodes, {} steps, obs_dim {}, action_dim {}",
        o.out.display(),
        ds.n_episodes(),
        ds.n_steps(),
        ds.obs_dim,
        ds.action_dim
    );
    Ok(())
}

fn train(o: TrainOpts) -> anyhow::Result<()> {
    let cfg = o.overrides.resolve()?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    let run = run_train(&cfg, &o.out)?;
    let last = run.records.last().expect("run produced records");
    println!("{}", serde_json::to_string(last)?);
    println!("metrics: {}", run.metrics_path.display());
    println!("checkpoint: {}", run.checkpoint_path.display());
    Ok(())
}

fn eval(o: EvalOpts) -> anyhow::Result<()> {
    let state = load_train_state::<f32>(&o.checkpoint)?;
    let env = EnvSpec::by_name(&o.env)?;
    if env.obs_dim != state.hyper.obs_dim || env.action_dim != state.hyper.action_dim {
        bail!(
            "checkpoint was trained on {}x{} spaces but {} is {}x{}",
            state.hyper.obs_dim,
            state.hyper.action_dim,
            o.env,
            env.obs_dim,
            env.action_dim
        );
    }
    let report = eval_state_policy(&state, &env, o.episodes, o.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "kind": state.kind.as_str(),
            "step": state.step,
            "episodes": o.episodes,
            "mean_return": report.mean_return,
            "success_rate": report.success_rate,
        })
    );
    Ok(())
}

fn sweep(o: SweepOpts) -> anyhow::Result<()> {
    let cfg = o.overrides.resolve()?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    let points = run_sweep(&cfg, &o.alphas, &o.out)?;
    for p in &points {
        println!(
            "alpha {:>10.4}: return {:+.4}, success {:.2}, ood {}",
            p.alpha,
            p.final_record.eval_return_mean,
            p.final_record.eval_success_rate,
            p.final_record
                .ood_fraction
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
        );
    }
    println!("sweep summary: {}", o.out.join("sweep.json").display());
    Ok(())
}

fn diagnose(o: DiagnoseOpts) -> anyhow::Result<()> {
    let state = load_train_state::<f32>(&o.checkpoint)?;
    let obs = Tensor::<f32>::zeros(1, state.hyper.obs_dim);
    let report = latent_cosine_grid(&state, &obs, o.grid, o.span, o.self_test)?;
    println!(
        "{}",
        serde_json::json!({
            "grid": report.grid,
            "span": report.span,
            "mean_cos": report.mean_cos,
            "min_cos": report.min_cos,
            "undefined_cells": report.undefined,
            "self_test": o.self_test,
        })
    );
    if let Some(path) = o.json_out {
        let f = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(f, &report)?;
        println!("cells: {}", path.display());
    }
    Ok(())
}

fn summarize(o: SummarizeOpts) -> anyhow::Result<()> {
    let mut finals = Vec::new();
    for path in &o.metrics {
        let (_, records) = read_metrics(path)?;
        let last = records
            .last()
            .with_context(|| format!("{} has no records", path.display()))?;
        println!(
            "{}: final step {}, return {:+.4}, success {:.2}",
            path.display(),
            last.step,
            last.eval_return_mean,
            last.eval_success_rate
        );
        finals.push(last.eval_return_mean);
    }
    let summary = bootstrap_mean_ci(&finals, o.resamples, o.seed)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
