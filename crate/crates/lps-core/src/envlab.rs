//! Toy environments, scripted demonstrators, offline datasets, chunk
//! sampling, and open-loop evaluation.
//!
//! Two environments, both with actions in [-1, 1]^2:
//!
//! * `pointmass_nav`: a point robot on the unit square integrates clipped
//!   velocity commands (dt = 0.1) toward a goal disc; reward is -1 per step
//!   and 0 on success (semi-sparse), episodes time out at the horizon.
//! * `corner_bandit`: a stateless repeated bandit whose per-step reward is a
//!   Gaussian bump peaked at the action-space corner (1, 1). Offline data
//!   comes from a mixture of action clusters whose support stays well away
//!   from the peak, so improving on the data requires moving toward the
//!   corner -- and staying on-support requires not moving far. Episodes are
//!   terminal at the horizon.
//!
//! Environment math runs in f64; datasets store f32 (the file format below).

use crate::error::{LpsError, Result};
use crate::exec;
use crate::rng::{self, LabRng};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    CornerBandit,
    PointmassNav,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    SemiSparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub dt: f64,
    pub reward_mode: RewardMode,
}

impl EnvSpec {
    pub fn pointmass_nav() -> Self {
        EnvSpec {
            kind: EnvKind::PointmassNav,
            obs_dim: 2,
            action_dim: 2,
            horizon: 100,
            goal: [0.8, 0.8],
            goal_radius: 0.1,
            dt: 0.1,
            reward_mode: RewardMode::SemiSparse,
        }
    }

    /// Repeated bandit: long enough that most sampled chunks bootstrap.
    pub fn corner_bandit() -> Self {
        EnvSpec {
            kind: EnvKind::CornerBandit,
            obs_dim: 2,
            action_dim: 2,
            horizon: 20,
            goal: [1.0, 1.0],
            goal_radius: 0.0,
            dt: 1.0,
            reward_mode: RewardMode::SemiSparse,
        }
    }

    /// One-shot bandit variant: every chunk is terminal, so critics are fit
    /// purely to observed rewards. Used for latent-space diagnostics where a
    /// 2-D latent grid should correspond to a single action.
    pub fn corner_bandit_h1() -> Self {
        let mut spec = Self::corner_bandit();
        spec.horizon = 1;
        spec
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pointmass-nav" => Ok(Self::pointmass_nav()),
            "corner-bandit" => Ok(Self::corner_bandit()),
            "corner-bandit-h1" => Ok(Self::corner_bandit_h1()),
            other => Err(LpsError::Config(format!(
                "unknown environment '{other}' (expected pointmass-nav, corner-bandit, or corner-bandit-h1)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.kind, self.horizon) {
            (EnvKind::PointmassNav, _) => "pointmass-nav",
            (EnvKind::CornerBandit, 1) => "corner-bandit-h1",
            (EnvKind::CornerBandit, _) => "corner-bandit",
        }
    }
}

fn clip_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// One pointmass transition: s' = clip(s + dt * a), reward -1 per step or 0
/// with done on reaching the goal disc. Horizon timeouts are the caller's
/// bookkeeping (a timeout is truncation, not a terminal state).
pub fn pointmass_step(state: [f64; 2], action: [f64; 2], spec: &EnvSpec) -> ([f64; 2], f64, bool) {
    let a = [clip_unit(action[0]), clip_unit(action[1])];
    let next = [
        clip_unit(state[0] + spec.dt * a[0]),
        clip_unit(state[1] + spec.dt * a[1]),
    ];
    let dx = next[0] - spec.goal[0];
    let dy = next[1] - spec.goal[1];
    if (dx * dx + dy * dy).sqrt() <= spec.goal_radius {
        (next, 0.0, true)
    } else {
        (next, -1.0, false)
    }
}

/// Bandit reward: a Gaussian bump of width 0.5 peaked at the corner (1, 1).
pub fn corner_bandit_eval(action: [f64; 2]) -> f64 {
    let dx = action[0] - 1.0;
    let dy = action[1] - 1.0;
    (-(dx * dx + dy * dy) / 0.5).exp()
}

// ---------------------------------------------------------------------------
// datasets

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Row-major [len, obs_dim]; the observation *before* each action.
    pub observations: Vec<f32>,
    /// Row-major [len, action_dim].
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    /// True when the episode ended in a terminal state (success), false on
    /// timeout truncation.
    pub success: bool,
}

/// Flattened episode store. Episode boundaries are implied by the length
/// table; all per-step arrays are concatenated in episode order.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub episode_lengths: Vec<u32>,
    pub observations: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub success: Vec<u8>,
}

impl OfflineDataset {
    pub fn from_episodes(obs_dim: usize, action_dim: usize, episodes: &[Episode]) -> Result<Self> {
        let mut ds = OfflineDataset {
            obs_dim,
            action_dim,
            episode_lengths: Vec::new(),
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            success: Vec::new(),
        };
        for ep in episodes {
            let len = ep.rewards.len();
            if len == 0 {
                return Err(LpsError::Empty { what: "episode" });
            }
            if ep.observations.len() != len * obs_dim || ep.actions.len() != len * action_dim {
                return Err(LpsError::ShapeMismatch {
                    context: "episode arrays",
                    expected: format!("{} obs / {} action values", len * obs_dim, len * action_dim),
                    got: format!("{} / {}", ep.observations.len(), ep.actions.len()),
                });
            }
            if ep.actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
                return Err(LpsError::InvalidArgument(
                    "episode contains an action outside [-1, 1]".into(),
                ));
            }
            ds.episode_lengths.push(len as u32);
            ds.observations.extend_from_slice(&ep.observations);
            ds.actions.extend_from_slice(&ep.actions);
            ds.rewards.extend_from_slice(&ep.rewards);
            ds.success.push(ep.success as u8);
        }
        if ds.episode_lengths.is_empty() {
            return Err(LpsError::Empty { what: "dataset" });
        }
        Ok(ds)
    }

    pub fn n_episodes(&self) -> usize {
        self.episode_lengths.len()
    }

    pub fn n_steps(&self) -> usize {
        self.episode_lengths.iter().map(|&l| l as usize).sum()
    }

    /// Step offsets of each episode start, plus the total as a sentinel.
    pub fn episode_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.n_episodes() + 1);
        let mut acc = 0usize;
        for &l in &self.episode_lengths {
            starts.push(acc);
            acc += l as usize;
        }
        starts.push(acc);
        starts
    }

    pub fn obs_row(&self, step: usize) -> &[f32] {
        &self.observations[step * self.obs_dim..(step + 1) * self.obs_dim]
    }

    pub fn action_row(&self, step: usize) -> &[f32] {
        &self.actions[step * self.action_dim..(step + 1) * self.action_dim]
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"LPS1";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &OfflineDataset) -> Result<()> {
    let n_steps = ds.n_steps();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.obs_dim as u32).to_le_bytes())?;
    w.write_all(&(ds.action_dim as u32).to_le_bytes())?;
    w.write_all(&(n_steps as u64).to_le_bytes())?;
    w.write_all(&(ds.n_episodes() as u64).to_le_bytes())?;
    for &l in &ds.episode_lengths {
        w.write_all(&l.to_le_bytes())?;
    }
    for chunk in [&ds.observations, &ds.actions, &ds.rewards] {
        for v in chunk.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&ds.success)?;
    Ok(())
}

pub fn save_dataset(path: &Path, ds: &OfflineDataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset_to(&mut f, ds)?;
    f.flush()?;
    Ok(())
}

fn format_err(path: &Path, reason: impl Into<String>) -> LpsError {
    LpsError::Format { path: path.display().to_string(), reason: reason.into() }
}

pub fn read_dataset_from<R: Read>(r: &mut R, path: &Path) -> Result<OfflineDataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "file too short for header"))?;
    if &magic != DATASET_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut R, what: &str| -> Result<u32> {
        r.read_exact(&mut u32buf).map_err(|_| format_err(path, format!("truncated {what}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(r, "version")?;
    if version != DATASET_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let obs_dim = read_u32(r, "obs_dim")? as usize;
    let action_dim = read_u32(r, "action_dim")? as usize;
    let mut read_u64 = |r: &mut R, what: &str| -> Result<u64> {
        r.read_exact(&mut u64buf).map_err(|_| format_err(path, format!("truncated {what}")))?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let n_steps = read_u64(r, "n_steps")? as usize;
    let n_episodes = read_u64(r, "n_episodes")? as usize;
    const CAP: usize = 1 << 30;
    if obs_dim == 0
        || action_dim == 0
        || n_steps == 0
        || n_episodes == 0
        || n_steps.saturating_mul(obs_dim.max(action_dim)) > CAP
    {
        return Err(format_err(path, "implausible dimensions in header"));
    }
    let mut episode_lengths = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| format_err(path, "truncated episode table"))?;
        episode_lengths.push(u32::from_le_bytes(b));
    }
    let total: usize = episode_lengths.iter().map(|&l| l as usize).sum();
    if total != n_steps {
        return Err(format_err(path, "episode lengths do not sum to n_steps"));
    }
    let read_f32s = |r: &mut R, count: usize, what: &str| -> Result<Vec<f32>> {
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw).map_err(|_| format_err(path, format!("truncated {what}")))?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let observations = read_f32s(r, n_steps * obs_dim, "observations")?;
    let actions = read_f32s(r, n_steps * action_dim, "actions")?;
    let rewards = read_f32s(r, n_steps, "rewards")?;
    let mut success = vec![0u8; n_episodes];
    r.read_exact(&mut success).map_err(|_| format_err(path, "truncated success flags"))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(format_err(path, "trailing bytes after dataset payload"));
    }
    Ok(OfflineDataset { obs_dim, action_dim, episode_lengths, observations, actions, rewards, success })
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset_from(&mut f, path)
}

// ---------------------------------------------------------------------------
// scripted demonstrators

/// Suboptimality knobs for the scripted pointmass demonstrator: Gaussian
/// action noise, random pauses (zero action for a few steps), and a detour
/// waypoint, mimicking hesitant and indirect human demonstrations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ArtifactProfile {
    pub noise_sigma: f64,
    pub pause_prob: f64,
    pub pause_min: usize,
    pub pause_max: usize,
    pub detour: bool,
}

impl Default for ArtifactProfile {
    fn default() -> Self {
        ArtifactProfile { noise_sigma: 0.1, pause_prob: 0.05, pause_min: 1, pause_max: 5, detour: true }
    }
}

impl ArtifactProfile {
    pub fn clean() -> Self {
        ArtifactProfile { noise_sigma: 0.0, pause_prob: 0.0, pause_min: 1, pause_max: 1, detour: false }
    }
}

/// Action-cluster mixture behind the bandit datasets, and the reference for
/// the out-of-distribution measurement (distance in units of cluster sigma).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BanditClusters {
    pub means: Vec<[f64; 2]>,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl BanditClusters {
    /// The named preset: three clusters between the origin and the reward
    /// corner, none closer than ~3.7 sigma to the peak at (1, 1).
    pub fn preset() -> Self {
        BanditClusters {
            means: vec![[0.55, 0.55], [-0.55, 0.55], [0.55, -0.55]],
            sigma: 0.12,
            weights: vec![0.4, 0.3, 0.3],
        }
    }

    /// Distance from `a` to the nearest cluster mean, in sigma units.
    pub fn nearest_sigma_distance(&self, a: [f64; 2]) -> f64 {
        self.means
            .iter()
            .map(|m| {
                let dx = a[0] - m[0];
                let dy = a[1] - m[1];
                (dx * dx + dy * dy).sqrt() / self.sigma
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn sample_action(&self, rng: &mut LabRng) -> [f64; 2] {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let mut n = [0.0f64; 2];
        rng::fill_standard_normal(rng, &mut n);
        [
            clip_unit(self.means[idx][0] + self.sigma * n[0]),
            clip_unit(self.means[idx][1] + self.sigma * n[1]),
        ]
    }
}

/// Fraction of 2-D actions farther than `k_sigma` from every cluster.
pub fn ood_fraction(actions: &[f32], clusters: &BanditClusters, k_sigma: f64) -> f64 {
    assert!(actions.len() % 2 == 0, "ood_fraction expects flattened 2-D actions");
    let n = actions.len() / 2;
    if n == 0 {
        return 0.0;
    }
    let ood = actions
        .chunks_exact(2)
        .filter(|a| clusters.nearest_sigma_distance([a[0] as f64, a[1] as f64]) > k_sigma)
        .count();
    ood as f64 / n as f64
}

const DEMO_MAX_ATTEMPTS: usize = 200;

fn pointmass_demo_episode(spec: &EnvSpec, profile: &ArtifactProfile, rng: &mut LabRng) -> Result<Episode> {
    for _ in 0..DEMO_MAX_ATTEMPTS {
        let mut s = [
            -0.9 + 0.2 * rng.gen::<f64>(),
            -0.9 + 0.2 * rng.gen::<f64>(),
        ];
        let mut waypoints: Vec<[f64; 2]> = Vec::new();
        if profile.detour {
            waypoints.push([-0.6 + 1.2 * rng.gen::<f64>(), -0.6 + 1.2 * rng.gen::<f64>()]);
        }
        waypoints.push(spec.goal);
        let mut wp_idx = 0usize;
        let mut pause_left = 0usize;
        let mut ep = Episode {
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            success: false,
        };
        for _ in 0..spec.horizon {
            // draws happen in a fixed order per step: pause gate, pause
            // length when triggered, then the two noise components
            let mut a = [0.0f64; 2];
            if pause_left == 0 && profile.pause_prob > 0.0 && rng.gen::<f64>() < profile.pause_prob {
                pause_left = profile.pause_min
                    + (rng.gen::<f64>() * (profile.pause_max - profile.pause_min + 1) as f64) as usize;
                pause_left = pause_left.min(profile.pause_max);
            }
            if pause_left > 0 {
                pause_left -= 1;
            } else {
                let wp = waypoints[wp_idx];
                a = [clip_unit((wp[0] - s[0]) / spec.dt), clip_unit((wp[1] - s[1]) / spec.dt)];
            }
            if profile.noise_sigma > 0.0 {
                let mut n = [0.0f64; 2];
                rng::fill_standard_normal(rng, &mut n);
                a[0] = clip_unit(a[0] + profile.noise_sigma * n[0]);
                a[1] = clip_unit(a[1] + profile.noise_sigma * n[1]);
            }
            let (next, reward, done) = pointmass_step(s, a, spec);
            ep.observations.extend_from_slice(&[s[0] as f32, s[1] as f32]);
            ep.actions.extend_from_slice(&[a[0] as f32, a[1] as f32]);
            ep.rewards.push(reward as f32);
            s = next;
            if wp_idx + 1 < waypoints.len() {
                let wp = waypoints[wp_idx];
                let d = ((s[0] - wp[0]).powi(2) + (s[1] - wp[1]).powi(2)).sqrt();
                if d <= 0.1 {
                    wp_idx += 1;
                }
            }
            if done {
                ep.success = true;
                return Ok(ep);
            }
        }
        // timeout: fall through and regenerate so the dataset stays all-success
    }
    Err(LpsError::InvalidArgument(format!(
        "demonstrator failed to reach the goal in {DEMO_MAX_ATTEMPTS} attempts; profile too noisy for the horizon"
    )))
}

fn bandit_demo_episode(spec: &EnvSpec, clusters: &BanditClusters, rng: &mut LabRng) -> Episode {
    let mut ep = Episode {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        success: true, // the bandit genuinely terminates at its horizon
    };
    for _ in 0..spec.horizon {
        let a = clusters.sample_action(rng);
        ep.observations.extend_from_slice(&[0.0, 0.0]);
        ep.actions.extend_from_slice(&[a[0] as f32, a[1] as f32]);
        ep.rewards.push(corner_bandit_eval(a) as f32);
    }
    ep
}

/// Scripted demonstrations, one RNG stream per episode so generation is
/// reproducible independent of thread count. Pointmass datasets contain only
/// successful episodes (failed attempts are resampled); bandit datasets draw
/// from the cluster preset.
pub fn generate_demos(
    spec: &EnvSpec,
    n_episodes: usize,
    profile: &ArtifactProfile,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(LpsError::Empty { what: "demo request" });
    }
    let clusters = BanditClusters::preset();
    let episodes: Vec<Result<Episode>> = exec::map_indexed(n_episodes, |i| {
        let mut rng = rng::stream(seed, i as u64);
        match spec.kind {
            EnvKind::PointmassNav => pointmass_demo_episode(spec, profile, &mut rng),
            EnvKind::CornerBandit => Ok(bandit_demo_episode(spec, &clusters, &mut rng)),
        }
    });
    let episodes: Vec<Episode> = episodes.into_iter().collect::<Result<_>>()?;
    OfflineDataset::from_episodes(spec.obs_dim, spec.action_dim, &episodes)
}

/// Synthetic one-step dataset whose actions concentrate at -0.5 and +0.5:
/// the two-mode sampler-fidelity benchmark. Observations are a constant 0.
pub fn two_mode_1d(n_episodes: usize, mode_sigma: f64, seed: u64) -> Result<OfflineDataset> {
    let episodes: Vec<Episode> = exec::map_indexed(n_episodes, |i| {
        let mut rng = rng::stream(seed, i as u64);
        let mode = if rng.gen::<f64>() < 0.5 { -0.5 } else { 0.5 };
        let mut n = [0.0f64; 2];
        rng::fill_standard_normal(&mut rng, &mut n);
        Episode {
            observations: vec![0.0],
            actions: vec![clip_unit(mode + mode_sigma * n[0]) as f32],
            rewards: vec![0.0],
            success: true,
        }
    });
    OfflineDataset::from_episodes(1, 1, &episodes)
}

// ---------------------------------------------------------------------------
// chunk sampling

/// One training batch of h-step chunks. `chunks` flattens the h actions of
/// each sample into a single row; `rewards` keeps the h per-step rewards;
/// `masks` is 0 where the episode terminates at the chunk end (no bootstrap)
/// and 1 otherwise. `next_states` is the observation h steps ahead; for
/// chunks flush against an episode end it falls back to the last stored
/// observation of the episode.
#[derive(Clone, Debug)]
pub struct ChunkBatch<F> {
    pub states: Tensor<F>,
    pub chunks: Tensor<F>,
    pub rewards: Tensor<F>,
    pub next_states: Tensor<F>,
    pub masks: Tensor<F>,
}

/// All (episode, start) pairs with the whole chunk inside one episode.
fn valid_starts(ds: &OfflineDataset, h: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ep, &len) in ds.episode_lengths.iter().enumerate() {
        let len = len as usize;
        if len >= h {
            for t in 0..=(len - h) {
                out.push((ep, t));
            }
        }
    }
    out
}

/// Uniform batch over every in-episode chunk start. One index draw per
/// sample, so consumption of the RNG stream is fixed by `batch_size`.
pub fn sample_chunk_batch<F: Real>(
    ds: &OfflineDataset,
    h: usize,
    batch_size: usize,
    rng: &mut LabRng,
) -> Result<ChunkBatch<F>> {
    if h == 0 || batch_size == 0 {
        return Err(LpsError::InvalidArgument("chunk sampler needs h >= 1 and batch_size >= 1".into()));
    }
    let starts = valid_starts(ds, h);
    if starts.is_empty() {
        return Err(LpsError::Empty { what: "valid chunk starts (every episode shorter than h)" });
    }
    let ep_starts = ds.episode_starts();
    let mut states = Tensor::zeros(batch_size, ds.obs_dim);
    let mut chunks = Tensor::zeros(batch_size, h * ds.action_dim);
    let mut rewards = Tensor::zeros(batch_size, h);
    let mut next_states = Tensor::zeros(batch_size, ds.obs_dim);
    let mut masks = Tensor::zeros(batch_size, 1);
    for b in 0..batch_size {
        let (ep, t) = starts[rng.gen_range(0..starts.len())];
        let len = ds.episode_lengths[ep] as usize;
        let base = ep_starts[ep];
        for (dst, &src) in states.row_mut(b).iter_mut().zip(ds.obs_row(base + t)) {
            *dst = F::from_f64(src as f64);
        }
        for i in 0..h {
            let a = ds.action_row(base + t + i);
            let row = chunks.row_mut(b);
            for (j, &v) in a.iter().enumerate() {
                row[i * ds.action_dim + j] = F::from_f64(v as f64);
            }
            rewards.row_mut(b)[i] = F::from_f64(ds.rewards[base + t + i] as f64);
        }
        let terminal_at_end = ds.success[ep] == 1 && t + h == len;
        masks.row_mut(b)[0] = if terminal_at_end { F::zero() } else { F::one() };
        let next_idx = if t + h < len { base + t + h } else { base + len - 1 };
        for (dst, &src) in next_states.row_mut(b).iter_mut().zip(ds.obs_row(next_idx)) {
            *dst = F::from_f64(src as f64);
        }
    }
    Ok(ChunkBatch { states, chunks, rewards, next_states, masks })
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episode_returns: Vec<f64>,
    pub episode_success: Vec<bool>,
    /// All executed (clipped) actions, flattened, for support analysis.
    pub actions: Vec<f32>,
}

fn env_reset(spec: &EnvSpec, rng: &mut LabRng) -> Vec<f64> {
    match spec.kind {
        EnvKind::PointmassNav => vec![-0.9 + 0.2 * rng.gen::<f64>(), -0.9 + 0.2 * rng.gen::<f64>()],
        EnvKind::CornerBandit => vec![0.0, 0.0],
    }
}

fn env_step(spec: &EnvSpec, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
    match spec.kind {
        EnvKind::PointmassNav => {
            let (next, r, done) = pointmass_step([state[0], state[1]], [action[0], action[1]], spec);
            (next.to_vec(), r, done)
        }
        EnvKind::CornerBandit => {
            let a = [clip_unit(action[0]), clip_unit(action[1])];
            (state.to_vec(), corner_bandit_eval(a), false)
        }
    }
}

/// Open-loop rollouts: the policy is queried once every h steps and the
/// returned chunk is executed verbatim (clipped to the action box). Episodes
/// run in parallel, each on its own RNG stream, so reports are independent
/// of thread count. The policy closure receives the observation and the
/// episode's RNG (for stochastic policies) and returns a flattened chunk of
/// h * action_dim values.
pub fn evaluate_policy<F, P>(
    spec: &EnvSpec,
    h: usize,
    n_episodes: usize,
    seed: u64,
    policy: &P,
) -> Result<EvalReport>
where
    F: Real,
    P: Fn(&[F], &mut LabRng) -> Result<Vec<F>> + Sync,
{
    if n_episodes == 0 || h == 0 {
        return Err(LpsError::InvalidArgument("evaluation needs n_episodes >= 1 and h >= 1".into()));
    }
    let per_episode: Vec<Result<(f64, bool, Vec<f32>)>> = exec::map_indexed(n_episodes, |i| {
        let mut rng = rng::stream(seed, i as u64);
        let mut state = env_reset(spec, &mut rng);
        let mut ret = 0.0;
        let mut success = false;
        let mut actions = Vec::with_capacity(spec.horizon * spec.action_dim);
        let mut chunk: Vec<F> = Vec::new();
        for t in 0..spec.horizon {
            if t % h == 0 {
                let obs: Vec<F> = state.iter().map(|&v| F::from_f64(v)).collect();
                chunk = policy(&obs, &mut rng)?;
                if chunk.len() != h * spec.action_dim {
                    return Err(LpsError::ShapeMismatch {
                        context: "policy chunk",
                        expected: format!("{} values", h * spec.action_dim),
                        got: format!("{}", chunk.len()),
                    });
                }
            }
            let off = (t % h) * spec.action_dim;
            let action: Vec<f64> = chunk[off..off + spec.action_dim]
                .iter()
                .map(|&v| clip_unit(v.as_f64()))
                .collect();
            for &a in &action {
                actions.push(a as f32);
            }
            let (next, r, done) = env_step(spec, &state, &action);
            ret += r;
            state = next;
            if done {
                success = true;
                break;
            }
        }
        if spec.kind == EnvKind::CornerBandit {
            success = true; // terminal at horizon by construction
        }
        Ok((ret, success, actions))
    });
    let mut report = EvalReport::default();
    for r in per_episode {
        let (ret, success, actions) = r?;
        report.episode_returns.push(ret);
        report.episode_success.push(success);
        report.actions.extend_from_slice(&actions);
    }
    report.mean_return =
        report.episode_returns.iter().sum::<f64>() / report.episode_returns.len() as f64;
    report.success_rate = report.episode_success.iter().filter(|&&s| s).count() as f64
        / report.episode_success.len() as f64;
    Ok(report)
}
