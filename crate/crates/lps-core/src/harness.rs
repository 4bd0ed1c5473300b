//! Experiment orchestration: resolved configs, deterministic training runs,
//! metrics files, alpha sweeps, and latent-space diagnostics.
//!
//! Determinism contract: a run is a pure function of its resolved config.
//! Every random decision draws from a ChaCha stream keyed by (seed, purpose)
//! and metrics never include wall-clock data, so two runs of the same config
//! produce byte-identical metrics files regardless of thread count.

use crate::agents::{
    build_latent_q_graph, build_one_step_graph, save_train_state, train_step, AgentHyper,
    AgentKind, StepReport, TrainState,
};
use crate::autodiff::{reverse_grad, NodeId, Tape};
use crate::critic::{build_q_agg_graph, Aggregation};
use crate::envlab::{
    evaluate_policy, generate_demos, load_dataset, ood_fraction, ArtifactProfile, BanditClusters,
    EnvKind, EnvSpec, EvalReport, OfflineDataset,
};
use crate::error::{LpsError, Result};
use crate::latent::Geometry;
use crate::rng::{self, LabRng};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Batch-sampling stream id under the run seed (ids 1 and 2 belong to
/// parameter init and the in-state training stream).
const STREAM_BATCH: u64 = 3;

/// Distance (in cluster sigmas) beyond which an action counts as
/// out-of-distribution for the bandit diagnostics.
pub const OOD_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: AgentKind,
    pub env: String,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Demonstration episodes to generate when no dataset file is given.
    pub demo_episodes: usize,
    pub demo_seed: u64,
    /// Generate demonstrations without noise, pauses, or detours.
    pub clean_demos: bool,
    /// Optional path to a pre-built dataset file.
    pub dataset: Option<String>,
    /// Overwrite the run checkpoint every this many steps (0 = at the end only).
    pub checkpoint_interval: u64,
    pub h: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub p_equal: f64,
    pub flow_steps: usize,
    pub base_loss_scale: f64,
    /// Latent prior geometry; `None` picks the per-kind default.
    pub geometry: Option<Geometry>,
    pub base_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub k: usize,
    pub target_agg: Aggregation,
    pub actor_agg: Aggregation,
    pub normalize_q: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: AgentKind::Lps,
            env: "pointmass-nav".into(),
            seed: 0,
            steps: 50_000,
            batch_size: 256,
            eval_interval: 1000,
            eval_episodes: 20,
            demo_episodes: 200,
            demo_seed: 7777,
            clean_demos: false,
            dataset: None,
            checkpoint_interval: 0,
            h: 5,
            lr: 3e-4,
            gamma: 0.99,
            tau: 5e-3,
            alpha: 1.0,
            p_equal: 0.5,
            flow_steps: 10,
            base_loss_scale: 1.0,
            geometry: None,
            base_hidden: vec![64, 64],
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            k: 2,
            target_agg: Aggregation::Min,
            actor_agg: Aggregation::Mean,
            normalize_q: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LpsError::Config(format!("config parse: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Per-kind prior default: flow-matching backbones and the stochastic
    /// latent actor live on the Gaussian prior, everything else on the
    /// sphere.
    pub fn resolved_geometry(&self) -> Geometry {
        self.geometry.unwrap_or(match self.kind {
            AgentKind::Lpsd | AgentKind::QcFql | AgentKind::BcFm => Geometry::Normal,
            _ => Geometry::Sphere,
        })
    }

    /// The config with all optional fields made explicit; hashing and
    /// training both start from this.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.geometry = Some(self.resolved_geometry());
        c
    }

    pub fn config_hash(&self) -> u64 {
        let bytes = serde_json::to_vec(&self.resolved()).expect("config serializes");
        rng::fnv1a(&bytes)
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::by_name(&self.env)
    }

    pub fn to_hyper(&self, env: &EnvSpec) -> AgentHyper {
        AgentHyper {
            obs_dim: env.obs_dim,
            action_dim: env.action_dim,
            h: self.h,
            lr: self.lr,
            gamma: self.gamma,
            tau: self.tau,
            alpha: self.alpha,
            p_equal: self.p_equal,
            flow_steps: self.flow_steps,
            base_loss_scale: self.base_loss_scale,
            geometry: self.resolved_geometry(),
            base_hidden: self.base_hidden.clone(),
            actor_hidden: self.actor_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            k: self.k,
            target_agg: self.target_agg,
            actor_agg: self.actor_agg,
            normalize_q: self.normalize_q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env_spec()?;
        if self.steps == 0 || self.eval_interval == 0 {
            return Err(LpsError::Config("steps and eval_interval must be >= 1".into()));
        }
        if self.batch_size == 0 || self.eval_episodes == 0 {
            return Err(LpsError::Config("batch_size and eval_episodes must be >= 1".into()));
        }
        if self.dataset.is_none() && self.demo_episodes == 0 {
            return Err(LpsError::Config("demo_episodes must be >= 1 without a dataset".into()));
        }
        if self.h > env.horizon {
            return Err(LpsError::Config(format!(
                "chunk length {} exceeds the {} horizon {}",
                self.h, self.env, env.horizon
            )));
        }
        self.to_hyper(&env).validate(self.kind)
    }

    /// Where a sweep point applies its alpha: the explicit regularizer for
    /// the kinds that have one, the base-policy loss weight otherwise.
    pub fn with_sweep_alpha(&self, alpha: f64) -> Self {
        let mut c = self.clone();
        match self.kind {
            AgentKind::QcMfql | AgentKind::QcFql | AgentKind::Lpsd => c.alpha = alpha,
            _ => c.base_loss_scale = alpha,
        }
        c
    }
}

// ---------------------------------------------------------------------------
// metrics

pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub version: u32,
    pub config_hash: u64,
    pub config: ExperimentConfig,
}

/// One logged evaluation point. Loss fields are means over the steps since
/// the previous record; everything else is measured at this step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub base_loss: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub distill_loss: Option<f64>,
    pub q_mean: Option<f64>,
    pub z_sq_mean: Option<f64>,
    pub z_sq_min: Option<f64>,
    pub z_sq_max: Option<f64>,
    pub eval_return_mean: f64,
    pub eval_success_rate: f64,
    pub ood_fraction: Option<f64>,
}

pub fn write_metrics(path: &Path, header: &MetricsHeader, records: &[MetricsRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let head_line = lines
        .next()
        .ok_or(LpsError::Metrics { line: 1, reason: "empty metrics file".into() })??;
    let header: MetricsHeader = serde_json::from_str(&head_line)
        .map_err(|e| LpsError::Metrics { line: 1, reason: format!("bad header: {e}") })?;
    if header.version != METRICS_VERSION {
        return Err(LpsError::Metrics {
            line: 1,
            reason: format!("unsupported metrics version {}", header.version),
        });
    }
    let mut records = Vec::new();
    let mut last_step = None;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| LpsError::Metrics { line: lineno, reason: format!("bad record: {e}") })?;
        if let Some(prev) = last_step {
            if rec.step <= prev {
                return Err(LpsError::Metrics {
                    line: lineno,
                    reason: format!("step {} does not increase past {}", rec.step, prev),
                });
            }
        }
        last_step = Some(rec.step);
        records.push(rec);
    }
    Ok((header, records))
}

// ---------------------------------------------------------------------------
// training runs

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalReport,
}

fn eval_seed(seed: u64, step: u64) -> u64 {
    let mut bytes = Vec::with_capacity(20);
    bytes.extend_from_slice(b"eval");
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(&step.to_le_bytes());
    rng::fnv1a(&bytes)
}

/// Evaluate a train state's policy on its environment: open-loop chunks,
/// one decision every `h` steps, actions clipped by the environment.
pub fn eval_state_policy(
    state: &TrainState<f32>,
    env: &EnvSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let policy = |obs: &[f32], rng: &mut LabRng| -> Result<Vec<f32>> {
        let o = Tensor::from_vec(1, obs.len(), obs.to_vec());
        let a = state.act(&o, rng)?;
        Ok(a.data().to_vec())
    };
    evaluate_policy(env, state.hyper.h, episodes, seed, &policy)
}

pub fn load_or_generate_dataset(config: &ExperimentConfig, env: &EnvSpec) -> Result<OfflineDataset> {
    match &config.dataset {
        Some(path) => load_dataset(Path::new(path)),
        None => {
            let profile = if config.clean_demos {
                ArtifactProfile::clean()
            } else {
                ArtifactProfile::default()
            };
            generate_demos(env, config.demo_episodes, &profile, config.demo_seed)
        }
    }
}

/// Windowed loss accumulator between metrics records.
struct Window {
    n: u64,
    base: f64,
    actor: f64,
    critic: f64,
    distill: f64,
    q: f64,
    z_mean: f64,
    z_min: f64,
    z_max: f64,
    saw_actor: bool,
    saw_critic: bool,
    saw_distill: bool,
}

impl Default for Window {
    fn default() -> Self {
        Window {
            n: 0,
            base: 0.0,
            actor: 0.0,
            critic: 0.0,
            distill: 0.0,
            q: 0.0,
            z_mean: 0.0,
            z_min: f64::INFINITY,
            z_max: f64::NEG_INFINITY,
            saw_actor: false,
            saw_critic: false,
            saw_distill: false,
        }
    }
}

impl Window {
    fn push(&mut self, r: &StepReport) {
        self.n += 1;
        self.base += r.base_loss;
        if let Some(v) = r.actor_loss {
            self.actor += v;
            self.saw_actor = true;
        }
        if let Some(v) = r.critic_loss {
            self.critic += v;
            self.saw_critic = true;
        }
        if let Some(v) = r.distill_loss {
            self.distill += v;
            self.saw_distill = true;
        }
        if let Some(v) = r.q_mean {
            self.q += v;
        }
        if let Some(v) = r.z_sq_mean {
            self.z_mean += v;
        }
        if let Some(v) = r.z_sq_min {
            self.z_min = self.z_min.min(v);
        }
        if let Some(v) = r.z_sq_max {
            self.z_max = self.z_max.max(v);
        }
    }

    fn record(
        &self,
        step: u64,
        eval: &EvalReport,
        ood: Option<f64>,
    ) -> MetricsRecord {
        let n = self.n.max(1) as f64;
        MetricsRecord {
            step,
            base_loss: self.base / n,
            actor_loss: self.saw_actor.then(|| self.actor / n),
            critic_loss: self.saw_critic.then(|| self.critic / n),
            distill_loss: self.saw_distill.then(|| self.distill / n),
            q_mean: self.saw_actor.then(|| self.q / n),
            z_sq_mean: self.saw_actor.then(|| self.z_mean / n),
            z_sq_min: self.saw_actor.then_some(self.z_min),
            z_sq_max: self.saw_actor.then_some(self.z_max),
            eval_return_mean: eval.mean_return,
            eval_success_rate: eval.success_rate,
            ood_fraction: ood,
        }
    }
}

/// Run one training job to completion. The metrics file is written
/// incrementally; the checkpoint is overwritten at each checkpoint interval
/// so an abort leaves the last healthy state on disk.
pub fn run_train(config: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let config = config.resolved();
    let env = config.env_spec()?;
    let hash = config.config_hash();
    let dataset = load_or_generate_dataset(&config, &env)?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.lpst");

    let mut state =
        TrainState::<f32>::new(config.kind, config.to_hyper(&env), config.seed, hash)?;
    let mut batch_rng = rng::stream(config.seed, STREAM_BATCH);
    let header =
        MetricsHeader { version: METRICS_VERSION, config_hash: hash, config: config.clone() };

    let mut mw = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    serde_json::to_writer(&mut mw, &header)?;
    mw.write_all(b"\n")?;

    let clusters = BanditClusters::preset();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut window = Window::default();
    let mut final_eval = None;

    for step in 0..config.steps {
        let batch =
            crate::envlab::sample_chunk_batch::<f32>(&dataset, config.h, config.batch_size, &mut batch_rng)?;
        let report = match train_step(&mut state, &batch) {
            Ok(r) => r,
            Err(e) => {
                mw.flush()?;
                return Err(e);
            }
        };
        window.push(&report);
        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.steps {
            if records.last().map(|r| r.step) != Some(done) {
                let eval = eval_state_policy(&state, &env, config.eval_episodes, eval_seed(config.seed, done))?;
                let ood = (env.kind == EnvKind::CornerBandit)
                    .then(|| ood_fraction(&eval.actions, &clusters, OOD_SIGMAS));
                let rec = window.record(done, &eval, ood);
                serde_json::to_writer(&mut mw, &rec)?;
                mw.write_all(b"\n")?;
                records.push(rec);
                window = Window::default();
                final_eval = Some(eval);
            }
        }
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 {
            save_train_state(&checkpoint_path, &state)?;
        }
    }
    mw.flush()?;
    save_train_state(&checkpoint_path, &state)?;
    let final_eval = final_eval.expect("at least one record is always written");
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        metrics_path,
        checkpoint_path,
        records,
        final_eval,
    })
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub final_record: MetricsRecord,
    pub dir: PathBuf,
}

/// One training run per alpha value, with the alpha applied where the kind
/// actually uses it. Results land in `out_dir/alpha-<i>` plus a `sweep.json`
/// summary.
pub fn run_sweep(base: &ExperimentConfig, alphas: &[f64], out_dir: &Path) -> Result<Vec<SweepPoint>> {
    if alphas.is_empty() {
        return Err(LpsError::InvalidArgument("sweep needs at least one alpha".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut points = Vec::new();
    for (i, &alpha) in alphas.iter().enumerate() {
        let cfg = base.with_sweep_alpha(alpha);
        let dir = out_dir.join(format!("alpha-{i}"));
        let run = run_train(&cfg, &dir)?;
        let final_record =
            run.records.last().cloned().expect("run produced at least one record");
        points.push(SweepPoint { alpha, final_record, dir });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("sweep.json"))?);
    serde_json::to_writer_pretty(&mut f, &points)?;
    f.flush()?;
    Ok(points)
}

// ---------------------------------------------------------------------------
// diagnostics

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CosineCell {
    pub z: [f64; 2],
    pub cos: f64,
    pub defined: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CosineGridReport {
    pub grid: usize,
    pub span: f64,
    pub mean_cos: f64,
    pub min_cos: f64,
    pub undefined: usize,
    pub cells: Vec<CosineCell>,
}

fn grad_wrt_z<F: Real>(
    program: impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId>,
    z: &Tensor<F>,
) -> Result<Vec<f64>> {
    let (_, grads) = reverse_grad(program, std::slice::from_ref(z), &[])?;
    Ok(grads[0].data().iter().map(|v| v.as_f64()).collect())
}

/// Compare latent-value gradients against the true composed value gradient
/// on a square grid of 2-D latents for one observation.
///
/// For each grid point z this takes the gradient with respect to z of the
/// distilled critic and of the composition critic(s, decode(s, z)), and
/// reports their cosine. Cells where either gradient is (numerically) zero
/// are excluded as undefined. With `self_test` the distilled side is
/// replaced by the composition itself, so every defined cell must come out
/// at cosine 1; this validates the machinery independently of training.
pub fn latent_cosine_grid(
    state: &TrainState<f32>,
    obs: &Tensor<f32>,
    grid: usize,
    span: f64,
    self_test: bool,
) -> Result<CosineGridReport> {
    if state.hyper.chunk_dim() != 2 {
        return Err(LpsError::InvalidArgument(format!(
            "cosine grid needs a 2-d latent, have {}",
            state.hyper.chunk_dim()
        )));
    }
    if obs.rows() != 1 {
        return Err(LpsError::InvalidArgument("cosine grid takes a single observation".into()));
    }
    let latent_critic = state.latent_critic.as_ref().ok_or_else(|| {
        LpsError::InvalidArgument("cosine grid needs an agent with a distilled latent critic".into())
    })?;
    let critic = state
        .critic
        .as_ref()
        .ok_or_else(|| LpsError::InvalidArgument("cosine grid needs a critic".into()))?;
    if grid < 2 {
        return Err(LpsError::InvalidArgument("cosine grid needs at least 2 points per axis".into()));
    }

    let agg = state.hyper.actor_agg;
    let composed = |tape: &mut Tape<f32>, params: &[NodeId], _: &[NodeId]| -> Result<NodeId> {
        let s = tape.constant(obs.clone());
        let a = build_one_step_graph(tape, &state.base, s, params[0])?;
        let q = build_q_agg_graph(tape, critic, false, s, a, agg);
        Ok(tape.sum_all(q))
    };
    let distilled = |tape: &mut Tape<f32>, params: &[NodeId], _: &[NodeId]| -> Result<NodeId> {
        let s = tape.constant(obs.clone());
        let q = build_latent_q_graph(tape, latent_critic, s, params[0], None);
        Ok(tape.sum_all(q))
    };

    let mut cells = Vec::with_capacity(grid * grid);
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut defined = 0usize;
    for iy in 0..grid {
        for ix in 0..grid {
            let x = -span + 2.0 * span * ix as f64 / (grid - 1) as f64;
            let y = -span + 2.0 * span * iy as f64 / (grid - 1) as f64;
            let z = Tensor::<f32>::from_vec(1, 2, vec![x as f32, y as f32]);
            let g_true = grad_wrt_z(&composed, &z)?;
            let g_lat = if self_test { g_true.clone() } else { grad_wrt_z(&distilled, &z)? };
            let nt = g_true.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nl = g_lat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nt < 1e-12 || nl < 1e-12 {
                cells.push(CosineCell { z: [x, y], cos: 0.0, defined: false });
                continue;
            }
            let cos = (g_true[0] * g_lat[0] + g_true[1] * g_lat[1]) / (nt * nl);
            sum += cos;
            min = min.min(cos);
            defined += 1;
            cells.push(CosineCell { z: [x, y], cos, defined: true });
        }
    }
    if defined == 0 {
        return Err(LpsError::InvalidArgument(
            "every grid cell had a vanishing gradient; nothing to compare".into(),
        ));
    }
    Ok(CosineGridReport {
        grid,
        span,
        mean_cos: sum / defined as f64,
        min_cos: min,
        undefined: grid * grid - defined,
        cells,
    })
}

// ---------------------------------------------------------------------------
// summaries

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n: usize,
    pub resamples: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Seeded percentile-bootstrap 95% interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64) -> Result<BootstrapSummary> {
    if values.is_empty() {
        return Err(LpsError::Empty { what: "bootstrap sample" });
    }
    if resamples == 0 {
        return Err(LpsError::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut rng = rng::stream(seed, 0);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..values.len() {
            acc += values[rng.gen_range(0..values.len())];
        }
        means.push(acc / values.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap means are finite"));
    let pick = |p: f64| -> f64 {
        let idx = (p * (means.len() - 1) as f64).round() as usize;
        means[idx]
    };
    Ok(BootstrapSummary { n: values.len(), resamples, mean, lo: pick(0.025), hi: pick(0.975) })
}
