//! Policy-extraction agents sharing one chunk-critic design.
//!
//! Every agent owns a generative base policy trained by behavior cloning on
//! action chunks. They differ in how (and whether) a second policy extracts
//! value from the critic:
//!
//! * `Lps` -- a deterministic latent actor proposes a point on the latent
//!   prior manifold; the action is the frozen base policy's one-step decode
//!   of that latent, and the critic is maximized by backpropagating through
//!   the decode into the actor only.
//! * `Lpsd` -- the stochastic variant: the actor takes prior noise as an
//!   extra input, and an action-space distillation term keeps its decoded
//!   actions close to the base policy's own samples.
//! * `QcMfql` / `QcFql` -- classic noise-conditioned extraction in action
//!   space: the actor outputs the chunk directly, trading critic value
//!   against an explicit behavior-cloning regularizer of weight alpha
//!   (one-step and 10-step-Euler behavior samples respectively).
//! * `DsrlNa` -- distills the composed action-space value into a latent
//!   critic, then steers a latent actor against the distilled critic.
//! * `BcMf` / `BcFm` -- base policy only; the behavior-cloning floor.
//!
//! The training step runs base -> actor -> critic, one gradient step each,
//! each phase touching only its own parameter set. Critic targets bootstrap
//! from the agent's own next-state actions with polyak-averaged target
//! heads.

use crate::autodiff::{reverse_grad, NodeId, Tape};
use crate::critic::{
    build_q_agg_graph, critic_loss_core, td_targets, Aggregation, CriticEnsemble,
};
use crate::envlab::ChunkBatch;
use crate::error::{LpsError, Result};
use crate::latent::{actor_head, build_actor_head, sample_prior, Geometry};
use crate::meanflow::{
    build_mlp_graph, build_regression_loss, build_u_graph, draw_rt, fm_loss_core,
    meanflow_loss_core, Backbone, BasePolicy,
};
use crate::nn::{
    read_params_from, write_params_to, Adam, Mlp, MlpSpec, ParamArray,
};
use crate::rng::{self, LabRng};
use crate::tensor::{Real, Tensor};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Lps,
    Lpsd,
    QcMfql,
    QcFql,
    DsrlNa,
    BcMf,
    BcFm,
}

impl AgentKind {
    pub const ALL: [AgentKind; 7] = [
        AgentKind::Lps,
        AgentKind::Lpsd,
        AgentKind::QcMfql,
        AgentKind::QcFql,
        AgentKind::DsrlNa,
        AgentKind::BcMf,
        AgentKind::BcFm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Lps => "lps",
            AgentKind::Lpsd => "lpsd",
            AgentKind::QcMfql => "qc-mfql",
            AgentKind::QcFql => "qc-fql",
            AgentKind::DsrlNa => "dsrl-na",
            AgentKind::BcMf => "bc-mf",
            AgentKind::BcFm => "bc-fm",
        }
    }

    pub fn is_bc(&self) -> bool {
        matches!(self, AgentKind::BcMf | AgentKind::BcFm)
    }

    /// Latent-steering kinds whose actor output lives on the prior manifold.
    pub fn steers_latents(&self) -> bool {
        matches!(self, AgentKind::Lps | AgentKind::Lpsd | AgentKind::DsrlNa)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = LpsError;

    fn from_str(s: &str) -> Result<Self> {
        AgentKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LpsError::Config(format!("unknown agent kind '{s}'")))
    }
}

/// Training-time hyperparameters, a pure-data snapshot carried inside
/// [`TrainState`] and its checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentHyper {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Chunk length: actions per policy query.
    pub h: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Regularizer weight for QcMfql/QcFql/Lpsd.
    pub alpha: f64,
    /// Probability that the average-velocity interval degenerates to a point.
    pub p_equal: f64,
    /// Euler steps for FlowMatching-backbone sampling.
    pub flow_steps: usize,
    /// Multiplier on the base-policy loss (sweep protocol for latent kinds).
    pub base_loss_scale: f64,
    pub geometry: Geometry,
    pub base_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Critic ensemble size.
    pub k: usize,
    pub target_agg: Aggregation,
    pub actor_agg: Aggregation,
    /// Divide actor Q terms by the stop-gradient batch mean of |Q|.
    pub normalize_q: bool,
}

impl AgentHyper {
    pub fn toy(obs_dim: usize, action_dim: usize) -> Self {
        AgentHyper {
            obs_dim,
            action_dim,
            h: 5,
            lr: 3e-4,
            gamma: 0.99,
            tau: 5e-3,
            alpha: 1.0,
            p_equal: 0.5,
            flow_steps: 10,
            base_loss_scale: 1.0,
            geometry: Geometry::Sphere,
            base_hidden: vec![64, 64],
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            k: 2,
            target_agg: Aggregation::Min,
            actor_agg: Aggregation::Mean,
            normalize_q: true,
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.h * self.action_dim
    }

    pub fn validate(&self, kind: AgentKind) -> Result<()> {
        if self.h == 0 || self.obs_dim == 0 || self.action_dim == 0 || self.k == 0 {
            return Err(LpsError::Config("h, obs_dim, action_dim, k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_equal) {
            return Err(LpsError::Config(format!("p_equal {} outside [0, 1]", self.p_equal)));
        }
        let uses_alpha = matches!(kind, AgentKind::QcMfql | AgentKind::QcFql | AgentKind::Lpsd);
        if uses_alpha && self.alpha <= 0.0 {
            return Err(LpsError::Config(format!(
                "alpha must be positive for {kind}, got {}",
                self.alpha
            )));
        }
        if self.flow_steps == 0 {
            return Err(LpsError::Config("flow_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Steering/extraction head: an MLP from the observation (plus prior noise
/// for stochastic kinds) through a geometry head. For latent-steering agents
/// the output is a latent on the prior manifold; for the QC extraction
/// agents it is the action chunk itself (identity head).
#[derive(Clone, Debug)]
pub struct LatentActor<F> {
    pub net: Mlp<F>,
    pub geometry: Geometry,
    pub stochastic: bool,
    pub latent_dim: usize,
}

impl<F: Real> LatentActor<F> {
    pub fn new(
        obs_dim: usize,
        latent_dim: usize,
        hidden: Vec<usize>,
        geometry: Geometry,
        stochastic: bool,
        rng: &mut LabRng,
    ) -> Self {
        let input_dim = obs_dim + if stochastic { latent_dim } else { 0 };
        LatentActor {
            net: Mlp::init(MlpSpec::new(input_dim, hidden, latent_dim), rng),
            geometry,
            stochastic,
            latent_dim,
        }
    }

    /// Head output for a batch of observations. Stochastic actors require
    /// the noise batch, deterministic ones forbid it.
    pub fn output(&self, states: &Tensor<F>, noise: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let x = match (self.stochastic, noise) {
            (false, None) => states.clone(),
            (true, Some(z)) => Tensor::hcat(&[states, z]),
            (true, None) => {
                return Err(LpsError::InvalidArgument(
                    "stochastic actor needs a noise batch".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(LpsError::InvalidArgument(
                    "deterministic actor takes no noise".into(),
                ))
            }
        };
        let logits = self.net.forward(&x)?;
        actor_head(&logits, self.geometry)
    }

    /// Same map on a tape from explicit parameter nodes.
    pub fn build_graph(
        &self,
        tape: &mut Tape<F>,
        params: &[NodeId],
        states: NodeId,
        noise: Option<NodeId>,
    ) -> Result<NodeId> {
        let x = match (self.stochastic, noise) {
            (false, None) => states,
            (true, Some(z)) => tape.concat_cols(&[states, z]),
            _ => {
                return Err(LpsError::InvalidArgument(
                    "actor graph noise input does not match stochastic flag".into(),
                ))
            }
        };
        let logits = build_mlp_graph(tape, &self.net.spec, params, x);
        build_actor_head(tape, logits, self.latent_dim, self.geometry)
    }
}

/// One-step decode of the (frozen) base policy on a tape: gradients flow
/// through it into whatever produces `z`, never into the base parameters.
pub fn build_one_step_graph<F: Real>(
    tape: &mut Tape<F>,
    base: &BasePolicy<F>,
    s: NodeId,
    z: NodeId,
) -> Result<NodeId> {
    if base.backbone != Backbone::MeanFlow {
        return Err(LpsError::InvalidArgument(
            "one-step decode graph requires the MeanFlow backbone".into(),
        ));
    }
    let n = tape.value(s).rows();
    let r = tape.constant(Tensor::zeros(n, 1));
    let t = tape.constant(Tensor::filled(n, 1, F::one()));
    if base.reformulated {
        let x = tape.concat_cols(&[s, z, r, t]);
        Ok(base.net.build_forward(tape, x, false).0)
    } else {
        let pids: Vec<NodeId> =
            base.net.params().iter().map(|p| tape.constant((*p).clone())).collect();
        let u = build_u_graph(tape, &base.net.spec, false, &pids, s, z, r, t);
        Ok(tape.sub(z, u))
    }
}

fn q_normalizer<F: Real>(q: &Tensor<F>, enabled: bool) -> f64 {
    if !enabled {
        return 1.0;
    }
    let m = q.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / q.len() as f64;
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}

fn row_sq_norm_stats<F: Real>(z: &Tensor<F>) -> (f64, f64, f64) {
    let mut mean = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for i in 0..z.rows() {
        let sq: f64 = z.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum();
        mean += sq;
        min = min.min(sq);
        max = max.max(sq);
    }
    (mean / z.rows() as f64, min, max)
}

/// Result of one actor-phase gradient computation.
#[derive(Clone, Debug)]
pub struct ActorUpdate<F> {
    pub loss: F,
    pub grads: Vec<Tensor<F>>,
    pub q_mean: f64,
    /// Mean / max squared row norm of the steering output on this batch.
    pub z_sq_mean: f64,
    pub z_sq_min: f64,
    pub z_sq_max: f64,
}

/// The exact differentiable program behind the latent-steering objective:
/// actor -> one-step decode -> aggregated critic, with the normalizer
/// frozen. Exposed so gradient-fidelity checks probe the very code path the
/// optimizer uses.
pub fn lps_program<'a, F: Real>(
    actor: &'a LatentActor<F>,
    base: &'a BasePolicy<F>,
    critic: &'a CriticEnsemble<F>,
    actor_agg: Aggregation,
    normalizer: f64,
    states: &'a Tensor<F>,
    noise: Option<&'a Tensor<F>>,
) -> impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId> + 'a {
    move |tape, params, _| {
        let s = tape.constant(states.clone());
        let noise_id = noise.map(|nz| tape.constant(nz.clone()));
        let z = actor.build_graph(tape, params, s, noise_id)?;
        let a = build_one_step_graph(tape, base, s, z)?;
        let q = build_q_agg_graph(tape, critic, false, s, a, actor_agg);
        let total = tape.sum_all(q);
        Ok(tape.scale(total, -1.0 / (states.rows() as f64 * normalizer)))
    }
}

/// Deterministic latent steering: maximize the critic through the frozen
/// one-step decoder, normalized by the stop-gradient batch mean of |Q|.
pub fn lps_actor_loss<F: Real>(
    actor: &LatentActor<F>,
    base: &BasePolicy<F>,
    critic: &CriticEnsemble<F>,
    hyper: &AgentHyper,
    states: &Tensor<F>,
) -> Result<ActorUpdate<F>> {
    let z = actor.output(states, None)?;
    let a = base.one_step_action(states, &z)?;
    let q = critic.q_agg(false, states, &a, hyper.actor_agg)?;
    let normalizer = q_normalizer(&q, hyper.normalize_q);
    let q_mean = q.mean().as_f64();
    let (z_sq_mean, z_sq_min, z_sq_max) = row_sq_norm_stats(&z);
    let params: Vec<Tensor<F>> = actor.net.params().into_iter().cloned().collect();
    let program = lps_program(actor, base, critic, hyper.actor_agg, normalizer, states, None);
    let (loss, grads) = reverse_grad(program, &params, &[])?;
    Ok(ActorUpdate { loss, grads, q_mean, z_sq_mean, z_sq_min, z_sq_max })
}

/// Program for noise-conditioned extraction in action space: value term plus
/// alpha-weighted squared distance to a frozen behavior sample.
pub fn qc_program<'a, F: Real>(
    actor: &'a LatentActor<F>,
    critic: &'a CriticEnsemble<F>,
    actor_agg: Aggregation,
    normalizer: f64,
    alpha: f64,
    states: &'a Tensor<F>,
    z_prior: &'a Tensor<F>,
    behavior: &'a Tensor<F>,
) -> impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId> + 'a {
    move |tape, params, _| {
        let n = states.rows() as f64;
        let s = tape.constant(states.clone());
        let z = tape.constant(z_prior.clone());
        let a = actor.build_graph(tape, params, s, Some(z))?;
        let q = build_q_agg_graph(tape, critic, false, s, a, actor_agg);
        let q_sum = tape.sum_all(q);
        let q_term = tape.scale(q_sum, -1.0 / (n * normalizer));
        let b = tape.constant(behavior.clone());
        let diff = tape.sub(a, b);
        let sq = tape.square(diff);
        let sq_sum = tape.sum_all(sq);
        let reg = tape.scale(sq_sum, alpha / n);
        Ok(tape.add(q_term, reg))
    }
}

/// Regularized extraction: the behavior sample is the base policy decoded
/// from the same prior noise (one evaluation for the MeanFlow backbone,
/// an Euler walk for FlowMatching), treated as a constant.
pub fn qc_actor_loss<F: Real>(
    actor: &LatentActor<F>,
    base: &BasePolicy<F>,
    critic: &CriticEnsemble<F>,
    hyper: &AgentHyper,
    states: &Tensor<F>,
    z_prior: &Tensor<F>,
) -> Result<ActorUpdate<F>> {
    let behavior = match base.backbone {
        Backbone::MeanFlow => base.one_step_action(states, z_prior)?,
        Backbone::FlowMatching => base.fm_sample_euler(states, z_prior, hyper.flow_steps)?,
    };
    let a = actor.output(states, Some(z_prior))?;
    let q = critic.q_agg(false, states, &a, hyper.actor_agg)?;
    let normalizer = q_normalizer(&q, hyper.normalize_q);
    let q_mean = q.mean().as_f64();
    let (z_sq_mean, z_sq_min, z_sq_max) = row_sq_norm_stats(&a);
    let params: Vec<Tensor<F>> = actor.net.params().into_iter().cloned().collect();
    let program = qc_program(
        actor,
        critic,
        hyper.actor_agg,
        normalizer,
        hyper.alpha,
        states,
        z_prior,
        &behavior,
    );
    let (loss, grads) = reverse_grad(program, &params, &[])?;
    Ok(ActorUpdate { loss, grads, q_mean, z_sq_mean, z_sq_min, z_sq_max })
}

/// Latent-critic graph: Q_lat(s, z) with the critic parameters as explicit
/// nodes (trainable for distillation, constants when steering the actor).
pub fn build_latent_q_graph<F: Real>(
    tape: &mut Tape<F>,
    latent_critic: &Mlp<F>,
    s: NodeId,
    z: NodeId,
    trainable_params: Option<&[NodeId]>,
) -> NodeId {
    let x = tape.concat_cols(&[s, z]);
    match trainable_params {
        Some(p) => build_mlp_graph(tape, &latent_critic.spec, p, x),
        None => latent_critic.build_forward(tape, x, false).0,
    }
}

/// Distillation regression: Q_lat(s, z) toward a frozen target batch (the
/// composed action-space value at the same prior noise).
pub fn dsrl_distill_program<'a, F: Real>(
    latent_critic: &'a Mlp<F>,
    states: &'a Tensor<F>,
    z_prior: &'a Tensor<F>,
    q_composed: &'a Tensor<F>,
) -> impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId> + 'a {
    move |tape, params, _| {
        let s = tape.constant(states.clone());
        let z = tape.constant(z_prior.clone());
        let q_lat = build_latent_q_graph(tape, latent_critic, s, z, Some(params));
        let tgt = tape.constant(q_composed.clone());
        Ok(build_regression_loss(tape, q_lat, tgt))
    }
}

/// Latent-actor steering against the distilled critic alone: the base
/// policy appears nowhere in this graph.
pub fn dsrl_actor_program<'a, F: Real>(
    actor: &'a LatentActor<F>,
    latent_critic: &'a Mlp<F>,
    normalizer: f64,
    states: &'a Tensor<F>,
) -> impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId> + 'a {
    move |tape, params, _| {
        let s = tape.constant(states.clone());
        let z = actor.build_graph(tape, params, s, None)?;
        let q_lat = build_latent_q_graph(tape, latent_critic, s, z, None);
        let total = tape.sum_all(q_lat);
        Ok(tape.scale(total, -1.0 / (states.rows() as f64 * normalizer)))
    }
}

/// Distillation pass: fit Q_lat(s, z) to the frozen composition
/// Q(s, decode(s, z)) on prior noise, then steer the latent actor against
/// Q_lat alone. Returns (distill loss + latent-critic grads, actor update).
pub fn dsrl_losses<F: Real>(
    actor: &LatentActor<F>,
    base: &BasePolicy<F>,
    critic: &CriticEnsemble<F>,
    latent_critic: &Mlp<F>,
    hyper: &AgentHyper,
    states: &Tensor<F>,
    z_prior: &Tensor<F>,
) -> Result<((F, Vec<Tensor<F>>), ActorUpdate<F>)> {
    // distill target: the composed action-space value, stop-gradient
    let decoded = base.one_step_action(states, z_prior)?;
    let q_composed = critic.q_agg(false, states, &decoded, hyper.actor_agg)?;
    let lc_params: Vec<Tensor<F>> = latent_critic.params().into_iter().cloned().collect();
    let distill = reverse_grad(
        dsrl_distill_program(latent_critic, states, z_prior, &q_composed),
        &lc_params,
        &[],
    )?;

    let z_actor = actor.output(states, None)?;
    let q_lat_now = latent_critic.forward(&Tensor::hcat(&[states, &z_actor]))?;
    let normalizer = q_normalizer(&q_lat_now, hyper.normalize_q);
    let q_mean = q_lat_now.mean().as_f64();
    let (z_sq_mean, z_sq_min, z_sq_max) = row_sq_norm_stats(&z_actor);
    let actor_params: Vec<Tensor<F>> = actor.net.params().into_iter().cloned().collect();
    let (loss, grads) = reverse_grad(
        dsrl_actor_program(actor, latent_critic, normalizer, states),
        &actor_params,
        &[],
    )?;
    Ok((distill, ActorUpdate { loss, grads, q_mean, z_sq_mean, z_sq_min, z_sq_max }))
}

/// Program for the stochastic latent-steering objective: the LPS value term
/// at the actor's noise-conditioned latent, plus alpha times the squared
/// action-space gap to the base policy's own decode of the same noise.
pub fn lpsd_program<'a, F: Real>(
    actor: &'a LatentActor<F>,
    base: &'a BasePolicy<F>,
    critic: &'a CriticEnsemble<F>,
    actor_agg: Aggregation,
    normalizer: f64,
    alpha: f64,
    states: &'a Tensor<F>,
    z_noise: &'a Tensor<F>,
    behavior: &'a Tensor<F>,
) -> impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId> + 'a {
    move |tape, params, _| {
        let n = states.rows() as f64;
        let s = tape.constant(states.clone());
        let zn = tape.constant(z_noise.clone());
        let z = actor.build_graph(tape, params, s, Some(zn))?;
        let a = build_one_step_graph(tape, base, s, z)?;
        let q = build_q_agg_graph(tape, critic, false, s, a, actor_agg);
        let q_sum = tape.sum_all(q);
        let q_term = tape.scale(q_sum, -1.0 / (n * normalizer));
        let b = tape.constant(behavior.clone());
        let diff = tape.sub(a, b);
        let sq = tape.square(diff);
        let sq_sum = tape.sum_all(sq);
        let reg = tape.scale(sq_sum, alpha / n);
        Ok(tape.add(q_term, reg))
    }
}

pub fn lpsd_actor_loss<F: Real>(
    actor: &LatentActor<F>,
    base: &BasePolicy<F>,
    critic: &CriticEnsemble<F>,
    hyper: &AgentHyper,
    states: &Tensor<F>,
    z_noise: &Tensor<F>,
) -> Result<ActorUpdate<F>> {
    let behavior = base.one_step_action(states, z_noise)?; // frozen reference
    let z = actor.output(states, Some(z_noise))?;
    let a = base.one_step_action(states, &z)?;
    let q = critic.q_agg(false, states, &a, hyper.actor_agg)?;
    let normalizer = q_normalizer(&q, hyper.normalize_q);
    let q_mean = q.mean().as_f64();
    let (z_sq_mean, z_sq_min, z_sq_max) = row_sq_norm_stats(&z);
    let params: Vec<Tensor<F>> = actor.net.params().into_iter().cloned().collect();
    let program = lpsd_program(
        actor,
        base,
        critic,
        hyper.actor_agg,
        normalizer,
        hyper.alpha,
        states,
        z_noise,
        &behavior,
    );
    let (loss, grads) = reverse_grad(program, &params, &[])?;
    Ok(ActorUpdate { loss, grads, q_mean, z_sq_mean, z_sq_min, z_sq_max })
}

// ---------------------------------------------------------------------------
// train state

#[derive(Clone, Debug)]
pub struct TrainState<F> {
    pub kind: AgentKind,
    pub hyper: AgentHyper,
    pub base: BasePolicy<F>,
    pub base_opt: Adam<F>,
    pub actor: Option<LatentActor<F>>,
    pub actor_opt: Option<Adam<F>>,
    pub critic: Option<CriticEnsemble<F>>,
    pub critic_opt: Option<Adam<F>>,
    pub latent_critic: Option<Mlp<F>>,
    pub latent_critic_opt: Option<Adam<F>>,
    pub step: u64,
    pub rng: LabRng,
    pub config_hash: u64,
}

/// RNG stream indices within a run seed.
const STREAM_PARAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;

impl<F: Real> TrainState<F> {
    pub fn new(kind: AgentKind, hyper: AgentHyper, seed: u64, config_hash: u64) -> Result<Self> {
        hyper.validate(kind)?;
        let d = hyper.chunk_dim();
        let mut init = rng::stream(seed, STREAM_PARAM_INIT);
        let (backbone, reformulated) = match kind {
            AgentKind::QcFql | AgentKind::BcFm => (Backbone::FlowMatching, false),
            _ => (Backbone::MeanFlow, true),
        };
        let base = BasePolicy::new(
            backbone,
            hyper.obs_dim,
            d,
            hyper.base_hidden.clone(),
            reformulated,
            hyper.geometry,
            &mut init,
        );
        let base_opt = Adam::for_params(hyper.lr, &base.net.params());

        let actor = match kind {
            AgentKind::Lps => Some(LatentActor::new(
                hyper.obs_dim, d, hyper.actor_hidden.clone(), hyper.geometry, false, &mut init,
            )),
            AgentKind::Lpsd => Some(LatentActor::new(
                hyper.obs_dim, d, hyper.actor_hidden.clone(), hyper.geometry, true, &mut init,
            )),
            AgentKind::DsrlNa => Some(LatentActor::new(
                hyper.obs_dim, d, hyper.actor_hidden.clone(), hyper.geometry, false, &mut init,
            )),
            // action-space extraction: noise-conditioned, no manifold head
            AgentKind::QcMfql | AgentKind::QcFql => Some(LatentActor::new(
                hyper.obs_dim, d, hyper.actor_hidden.clone(), Geometry::Normal, true, &mut init,
            )),
            AgentKind::BcMf | AgentKind::BcFm => None,
        };
        let actor_opt = actor.as_ref().map(|a| Adam::for_params(hyper.lr, &a.net.params()));

        let (critic, critic_opt) = if kind.is_bc() {
            (None, None)
        } else {
            let c = CriticEnsemble::new(hyper.obs_dim, d, hyper.critic_hidden.clone(), hyper.k, &mut init);
            let params: Vec<&Tensor<F>> =
                c.heads.iter().flat_map(|h| h.params()).collect();
            let opt = Adam::for_params(hyper.lr, &params);
            (Some(c), Some(opt))
        };

        let (latent_critic, latent_critic_opt) = if kind == AgentKind::DsrlNa {
            let net = Mlp::init(
                MlpSpec::new(hyper.obs_dim + d, hyper.critic_hidden.clone(), 1),
                &mut init,
            );
            let opt = Adam::for_params(hyper.lr, &net.params());
            (Some(net), Some(opt))
        } else {
            (None, None)
        };

        Ok(TrainState {
            kind,
            hyper,
            base,
            base_opt,
            actor,
            actor_opt,
            critic,
            critic_opt,
            latent_critic,
            latent_critic_opt,
            step: 0,
            rng: rng::stream(seed, STREAM_TRAIN),
            config_hash,
        })
    }

    /// Batched action chunks for a batch of observations. Deterministic for
    /// `Lps` and `DsrlNa`; other kinds draw prior noise from `rng`.
    pub fn act(&self, obs: &Tensor<F>, rng: &mut LabRng) -> Result<Tensor<F>> {
        let d = self.hyper.chunk_dim();
        match self.kind {
            AgentKind::Lps | AgentKind::DsrlNa => {
                let actor = self.actor.as_ref().expect("latent kinds carry an actor");
                let z = actor.output(obs, None)?;
                self.base.one_step_action(obs, &z)
            }
            AgentKind::Lpsd => {
                let actor = self.actor.as_ref().expect("lpsd carries an actor");
                let noise = sample_prior(rng, obs.rows(), d, self.hyper.geometry);
                let z = actor.output(obs, Some(&noise))?;
                self.base.one_step_action(obs, &z)
            }
            AgentKind::QcMfql | AgentKind::QcFql => {
                let actor = self.actor.as_ref().expect("qc kinds carry an actor");
                let noise = sample_prior(rng, obs.rows(), d, self.hyper.geometry);
                actor.output(obs, Some(&noise))
            }
            AgentKind::BcMf | AgentKind::BcFm => {
                self.base.sample_actions(obs, rng, self.hyper.flow_steps)
            }
        }
    }

    /// Next-chunk proposals for critic bootstrapping, using the agent's own
    /// policy (fresh prior noise for the stochastic kinds).
    fn next_actions(&mut self, next_states: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.hyper.chunk_dim();
        match self.kind {
            AgentKind::Lps | AgentKind::DsrlNa => {
                let actor = self.actor.as_ref().expect("latent kinds carry an actor");
                let z = actor.output(next_states, None)?;
                self.base.one_step_action(next_states, &z)
            }
            AgentKind::Lpsd => {
                let noise = sample_prior(&mut self.rng, next_states.rows(), d, self.hyper.geometry);
                let actor = self.actor.as_ref().expect("lpsd carries an actor");
                let z = actor.output(next_states, Some(&noise))?;
                self.base.one_step_action(next_states, &z)
            }
            AgentKind::QcMfql | AgentKind::QcFql => {
                let noise = sample_prior(&mut self.rng, next_states.rows(), d, self.hyper.geometry);
                let actor = self.actor.as_ref().expect("qc kinds carry an actor");
                actor.output(next_states, Some(&noise))
            }
            AgentKind::BcMf | AgentKind::BcFm => unreachable!("bc kinds skip the critic phase"),
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        let check = |net: &Mlp<F>, what: &str| -> Result<()> {
            for p in net.params() {
                p.ensure_finite(what)?;
            }
            Ok(())
        };
        check(&self.base.net, "base policy parameters")?;
        if let Some(a) = &self.actor {
            check(&a.net, "actor parameters")?;
        }
        if let Some(c) = &self.critic {
            for h in c.heads.iter().chain(&c.targets) {
                check(h, "critic parameters")?;
            }
        }
        if let Some(lc) = &self.latent_critic {
            check(lc, "latent critic parameters")?;
        }
        Ok(())
    }
}

/// Per-step scalars for metrics.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub base_loss: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub distill_loss: Option<f64>,
    pub q_mean: Option<f64>,
    pub z_sq_mean: Option<f64>,
    pub z_sq_min: Option<f64>,
    pub z_sq_max: Option<f64>,
}

fn nan_guard<T>(step: u64, phase: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        LpsError::NonFinite { .. } => LpsError::NanAbort { step, phase },
        other => other,
    })
}

/// One full optimization step: (1) base-policy behavior cloning, (2) the
/// agent's extraction update, (3) critic TD update plus polyak averaging.
/// Each phase steps only its own Adam state; BC kinds run phase (1) only.
pub fn train_step<F: Real>(state: &mut TrainState<F>, batch: &ChunkBatch<F>) -> Result<StepReport> {
    let step = state.step;
    let d = state.hyper.chunk_dim();
    let b = batch.states.rows();
    let mut report = StepReport::default();

    // phase 1: base policy
    {
        let noise = sample_prior(&mut state.rng, b, d, state.hyper.geometry);
        let (loss, mut grads) = nan_guard(
            step,
            "base",
            match state.base.backbone {
                Backbone::MeanFlow => {
                    let (r, t) = draw_rt(&mut state.rng, b, state.hyper.p_equal);
                    meanflow_loss_core(&state.base, &batch.states, &batch.chunks, &noise, &r, &t)
                }
                Backbone::FlowMatching => {
                    let mut t = Tensor::zeros(b, 1);
                    for v in t.data_mut() {
                        *v = rng::uniform(&mut state.rng);
                    }
                    fm_loss_core(&state.base, &batch.states, &batch.chunks, &noise, &t)
                }
            },
        )?;
        if state.hyper.base_loss_scale != 1.0 {
            let s = F::from_f64(state.hyper.base_loss_scale);
            for g in &mut grads {
                *g = g.scale(s);
            }
        }
        let mut params = state.base.net.params_mut();
        nan_guard(step, "base", state.base_opt.apply(&mut params, &grads))?;
        report.base_loss = loss.as_f64();
    }

    // phase 2: extraction / steering
    if !state.kind.is_bc() {
        let critic = state.critic.as_ref().expect("rl kinds carry a critic");
        let update = match state.kind {
            AgentKind::Lps => nan_guard(
                step,
                "actor",
                lps_actor_loss(
                    state.actor.as_ref().unwrap(),
                    &state.base,
                    critic,
                    &state.hyper,
                    &batch.states,
                ),
            )?,
            AgentKind::Lpsd => {
                let z_noise = sample_prior(&mut state.rng, b, d, state.hyper.geometry);
                nan_guard(
                    step,
                    "actor",
                    lpsd_actor_loss(
                        state.actor.as_ref().unwrap(),
                        &state.base,
                        critic,
                        &state.hyper,
                        &batch.states,
                        &z_noise,
                    ),
                )?
            }
            AgentKind::QcMfql | AgentKind::QcFql => {
                let z_prior = sample_prior(&mut state.rng, b, d, state.hyper.geometry);
                nan_guard(
                    step,
                    "actor",
                    qc_actor_loss(
                        state.actor.as_ref().unwrap(),
                        &state.base,
                        critic,
                        &state.hyper,
                        &batch.states,
                        &z_prior,
                    ),
                )?
            }
            AgentKind::DsrlNa => {
                let z_prior = sample_prior(&mut state.rng, b, d, state.hyper.geometry);
                let (distill, update) = nan_guard(
                    step,
                    "actor",
                    dsrl_losses(
                        state.actor.as_ref().unwrap(),
                        &state.base,
                        critic,
                        state.latent_critic.as_ref().unwrap(),
                        &state.hyper,
                        &batch.states,
                        &z_prior,
                    ),
                )?;
                let (dloss, dgrads) = distill;
                let lc = state.latent_critic.as_mut().unwrap();
                let mut lc_params = lc.params_mut();
                nan_guard(
                    step,
                    "actor",
                    state.latent_critic_opt.as_mut().unwrap().apply(&mut lc_params, &dgrads),
                )?;
                report.distill_loss = Some(dloss.as_f64());
                update
            }
            AgentKind::BcMf | AgentKind::BcFm => unreachable!(),
        };
        let actor = state.actor.as_mut().unwrap();
        let mut params = actor.net.params_mut();
        nan_guard(step, "actor", state.actor_opt.as_mut().unwrap().apply(&mut params, &update.grads))?;
        report.actor_loss = Some(update.loss.as_f64());
        report.q_mean = Some(update.q_mean);
        report.z_sq_mean = Some(update.z_sq_mean);
        report.z_sq_min = Some(update.z_sq_min);
        report.z_sq_max = Some(update.z_sq_max);
    }

    // phase 3: critic TD update + polyak
    if !state.kind.is_bc() {
        let next_chunks = nan_guard(step, "critic", state.next_actions(&batch.next_states))?;
        let critic = state.critic.as_mut().expect("rl kinds carry a critic");
        let y = nan_guard(
            step,
            "critic",
            td_targets(
                critic,
                &batch.rewards,
                &batch.masks,
                &batch.next_states,
                &next_chunks,
                state.hyper.gamma,
                state.hyper.target_agg,
            ),
        )?;
        let (loss, head_grads) = nan_guard(
            step,
            "critic",
            critic_loss_core(critic, &batch.states, &batch.chunks, &y),
        )?;
        let flat_grads: Vec<Tensor<F>> = head_grads.into_iter().flatten().collect();
        let mut params: Vec<&mut Tensor<F>> =
            critic.heads.iter_mut().flat_map(|h| h.params_mut()).collect();
        nan_guard(step, "critic", state.critic_opt.as_mut().unwrap().apply(&mut params, &flat_grads))?;
        critic.polyak(state.hyper.tau);
        report.critic_loss = Some(loss.as_f64());
    }

    state.step += 1;
    Ok(report)
}

// ---------------------------------------------------------------------------
// checkpointing

pub const STATE_MAGIC: &[u8; 4] = b"LPST";
pub const STATE_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)?;
    Ok(())
}

fn write_section<W: Write>(w: &mut W, name: &str, aux: u64, arrays: &[ParamArray]) -> Result<()> {
    write_bytes(w, name.as_bytes())?;
    write_u64(w, aux)?;
    write_params_to(w, arrays)
}

fn mlps_to_arrays<'a, F: Real>(nets: impl Iterator<Item = &'a Mlp<F>>) -> Vec<ParamArray>
where
    F: 'a,
{
    nets.flat_map(|n| n.to_arrays()).collect()
}

pub fn write_train_state<W: Write, F: Real>(w: &mut W, state: &TrainState<F>) -> Result<()> {
    w.write_all(STATE_MAGIC)?;
    write_u32(w, STATE_VERSION)?;
    write_bytes(w, state.kind.as_str().as_bytes())?;
    write_u64(w, state.step)?;
    write_u64(w, state.config_hash)?;
    write_bytes(w, &serde_json::to_vec(&state.hyper)?)?;
    w.write_all(&state.rng.get_seed())?;
    write_u64(w, state.rng.get_stream())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;

    let mut sections: Vec<(String, u64, Vec<ParamArray>)> = vec![
        ("base".into(), 0, state.base.net.to_arrays()),
        ("base_opt".into(), state.base_opt.step, state.base_opt.moment_arrays()),
    ];
    if let (Some(actor), Some(opt)) = (&state.actor, &state.actor_opt) {
        sections.push(("actor".into(), 0, actor.net.to_arrays()));
        sections.push(("actor_opt".into(), opt.step, opt.moment_arrays()));
    }
    if let (Some(critic), Some(opt)) = (&state.critic, &state.critic_opt) {
        sections.push(("critic_heads".into(), 0, mlps_to_arrays(critic.heads.iter())));
        sections.push(("critic_targets".into(), 0, mlps_to_arrays(critic.targets.iter())));
        sections.push(("critic_opt".into(), opt.step, opt.moment_arrays()));
    }
    if let (Some(lc), Some(opt)) = (&state.latent_critic, &state.latent_critic_opt) {
        sections.push(("latent_critic".into(), 0, lc.to_arrays()));
        sections.push(("latent_critic_opt".into(), opt.step, opt.moment_arrays()));
    }
    write_u32(w, sections.len() as u32)?;
    for (name, aux, arrays) in &sections {
        write_section(w, name, *aux, arrays)?;
    }
    Ok(())
}

pub fn save_train_state<F: Real>(path: &Path, state: &TrainState<F>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_train_state(&mut f, state)?;
    f.flush()?;
    Ok(())
}

struct SectionReader<'r, R: Read> {
    r: &'r mut R,
    path: String,
    remaining: u32,
}

impl<R: Read> SectionReader<'_, R> {
    fn next(&mut self, expected: &str) -> Result<(u64, Vec<ParamArray>)> {
        if self.remaining == 0 {
            return Err(LpsError::Format {
                path: self.path.clone(),
                reason: format!("missing checkpoint section '{expected}'"),
            });
        }
        self.remaining -= 1;
        let name = read_lp_bytes(self.r, &self.path, "section name")?;
        let name = String::from_utf8(name).map_err(|_| LpsError::Format {
            path: self.path.clone(),
            reason: "section name is not utf-8".into(),
        })?;
        if name != expected {
            return Err(LpsError::Format {
                path: self.path.clone(),
                reason: format!("expected section '{expected}', found '{name}'"),
            });
        }
        let aux = read_u64(self.r, &self.path, "section aux")?;
        let arrays = read_params_from(self.r, &self.path)?;
        Ok((aux, arrays))
    }
}

fn read_u32<R: Read>(r: &mut R, path: &str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| LpsError::Format {
        path: path.to_string(),
        reason: format!("truncated {what}"),
    })?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, path: &str, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| LpsError::Format {
        path: path.to_string(),
        reason: format!("truncated {what}"),
    })?;
    Ok(u64::from_le_bytes(b))
}

fn read_lp_bytes<R: Read>(r: &mut R, path: &str, what: &str) -> Result<Vec<u8>> {
    let len = read_u32(r, path, what)? as usize;
    if len > (1 << 20) {
        return Err(LpsError::Format {
            path: path.to_string(),
            reason: format!("implausible {what} length {len}"),
        });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| LpsError::Format {
        path: path.to_string(),
        reason: format!("truncated {what}"),
    })?;
    Ok(buf)
}

fn mlp_from_array_run<F: Real>(
    spec: MlpSpec,
    arrays: &[ParamArray],
    offset: &mut usize,
) -> Result<Mlp<F>> {
    let take = spec.layer_dims().len() * 2;
    let slice = arrays.get(*offset..*offset + take).ok_or_else(|| {
        LpsError::InvalidArgument("checkpoint section has too few arrays".into())
    })?;
    *offset += take;
    Mlp::from_arrays(spec, slice)
}

pub fn read_train_state<R: Read, F: Real>(r: &mut R, path: &str) -> Result<TrainState<F>> {
    let bad = |reason: String| LpsError::Format { path: path.to_string(), reason };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != STATE_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, path, "version")?;
    if version != STATE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind_bytes = read_lp_bytes(r, path, "agent kind")?;
    let kind: AgentKind = std::str::from_utf8(&kind_bytes)
        .map_err(|_| bad("agent kind is not utf-8".into()))?
        .parse()?;
    let step = read_u64(r, path, "step")?;
    let config_hash = read_u64(r, path, "config hash")?;
    let hyper_bytes = read_lp_bytes(r, path, "hyperparameters")?;
    let hyper: AgentHyper = serde_json::from_slice(&hyper_bytes)?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(|_| bad("truncated rng seed".into()))?;
    let stream = read_u64(r, path, "rng stream")?;
    let mut wp = [0u8; 16];
    r.read_exact(&mut wp).map_err(|_| bad("truncated rng position".into()))?;
    let word_pos = u128::from_le_bytes(wp);

    let mut state = TrainState::<F>::new(kind, hyper, 0, config_hash)?;
    state.step = step;
    let mut rng = LabRng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;

    let n_sections = read_u32(r, path, "section count")?;
    let mut sections = SectionReader { r, path: path.to_string(), remaining: n_sections };

    let (_, base_arrays) = sections.next("base")?;
    state.base.net = Mlp::from_arrays(state.base.net.spec.clone(), &base_arrays)?;
    let (base_step, base_moments) = sections.next("base_opt")?;
    state.base_opt.restore_moments(&base_moments, base_step)?;

    if state.actor.is_some() {
        let (_, arrays) = sections.next("actor")?;
        let actor = state.actor.as_mut().unwrap();
        actor.net = Mlp::from_arrays(actor.net.spec.clone(), &arrays)?;
        let (opt_step, moments) = sections.next("actor_opt")?;
        state.actor_opt.as_mut().unwrap().restore_moments(&moments, opt_step)?;
    }
    if state.critic.is_some() {
        let (_, heads) = sections.next("critic_heads")?;
        let (_, targets) = sections.next("critic_targets")?;
        let critic = state.critic.as_mut().unwrap();
        let mut off = 0;
        for h in &mut critic.heads {
            *h = mlp_from_array_run(h.spec.clone(), &heads, &mut off)?;
        }
        let mut off = 0;
        for t in &mut critic.targets {
            *t = mlp_from_array_run(t.spec.clone(), &targets, &mut off)?;
        }
        let (opt_step, moments) = sections.next("critic_opt")?;
        state.critic_opt.as_mut().unwrap().restore_moments(&moments, opt_step)?;
    }
    if state.latent_critic.is_some() {
        let (_, arrays) = sections.next("latent_critic")?;
        let lc = state.latent_critic.as_mut().unwrap();
        *lc = Mlp::from_arrays(lc.spec.clone(), &arrays)?;
        let (opt_step, moments) = sections.next("latent_critic_opt")?;
        state.latent_critic_opt.as_mut().unwrap().restore_moments(&moments, opt_step)?;
    }
    if sections.remaining != 0 {
        return Err(bad("unexpected trailing checkpoint sections".into()));
    }
    state.validate_finite()?;
    Ok(state)
}

pub fn load_train_state<F: Real>(path: &Path) -> Result<TrainState<F>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_train_state(&mut f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdMode, FD_DEFAULT_STEP};
    use crate::envlab::{generate_demos, sample_chunk_batch, ArtifactProfile, EnvSpec};
    use crate::rng;

    fn tiny_hyper(obs: usize, act: usize, h: usize) -> AgentHyper {
        let mut hy = AgentHyper::toy(obs, act);
        hy.h = h;
        hy.base_hidden = vec![8];
        hy.actor_hidden = vec![8];
        hy.critic_hidden = vec![8];
        hy
    }

    fn normal_states<F: Real>(rng: &mut LabRng, n: usize, dim: usize) -> Tensor<F> {
        rng::standard_normal_tensor(rng, n, dim)
    }

    /// Single-layer critic reading only the given input weights.
    fn linear_critic(weights: Vec<f64>, bias: f64, state_dim: usize, chunk_dim: usize) -> CriticEnsemble<f64> {
        let input = state_dim + chunk_dim;
        assert_eq!(weights.len(), input);
        let spec = MlpSpec::new(input, vec![], 1);
        let mut rng = rng::root(0);
        let mut head = Mlp::<f64>::init(spec, &mut rng);
        head.weights[0] = Tensor::from_vec(1, input, weights);
        head.biases[0].data_mut()[0] = bias;
        CriticEnsemble { heads: vec![head.clone()], targets: vec![head], state_dim, chunk_dim }
    }

    fn net_bits<F: Real>(net: &Mlp<F>) -> Vec<u64> {
        net.params().iter().flat_map(|p| p.data().iter().map(|v| v.as_f64().to_bits())).collect()
    }

    fn grad_bits<F: Real>(grads: &[Tensor<F>]) -> Vec<u64> {
        grads.iter().flat_map(|g| g.data().iter().map(|v| v.as_f64().to_bits())).collect()
    }

    fn state_bytes<F: Real>(state: &TrainState<F>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_train_state(&mut buf, state).unwrap();
        buf
    }

    fn demo_batch(h: usize, batch: usize, seed: u64) -> ChunkBatch<f32> {
        let ds = generate_demos(&EnvSpec::pointmass_nav(), 8, &ArtifactProfile::default(), 91)
            .unwrap();
        let mut rng = rng::stream(seed, 40);
        sample_chunk_batch(&ds, h, batch, &mut rng).unwrap()
    }

    #[test]
    fn value_term_is_mean_q_over_frozen_mean_abs_q() {
        let hyper = tiny_hyper(2, 1, 2);
        let mut rng = rng::root(11);
        let actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Sphere, false, &mut rng);
        let base = BasePolicy::<f64>::new(
            Backbone::MeanFlow, 2, 2, vec![8], true, Geometry::Sphere, &mut rng,
        );
        // Q depends on the state only: rows (1,0) and (0,1) read -2 and -4.
        let critic = linear_critic(vec![-2.0, -4.0, 0.0, 0.0], 0.0, 2, 2);
        let states = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);

        let upd = lps_actor_loss(&actor, &base, &critic, &hyper, &states).unwrap();
        assert!((upd.loss - 1.0).abs() < 1e-12, "loss {}", upd.loss);
        assert!((upd.q_mean + 3.0).abs() < 1e-12);
        // the critic ignores the action, so nothing reaches the actor
        for g in &upd.grads {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }

        // constant positive critic: loss is -sign(c) with zero gradients
        let critic = linear_critic(vec![0.0; 4], 5.0, 2, 2);
        let upd = lps_actor_loss(&actor, &base, &critic, &hyper, &states).unwrap();
        assert!((upd.loss + 1.0).abs() < 1e-12, "loss {}", upd.loss);
        for g in &upd.grads {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }

        // normalizer off: the raw mean survives
        let mut raw = hyper.clone();
        raw.normalize_q = false;
        let upd = lps_actor_loss(&actor, &base, &critic, &raw, &states).unwrap();
        assert!((upd.loss + 5.0).abs() < 1e-12, "loss {}", upd.loss);
    }

    #[test]
    fn all_zero_q_batch_uses_unit_normalizer() {
        let hyper = tiny_hyper(2, 1, 2);
        let mut rng = rng::root(12);
        let actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Sphere, false, &mut rng);
        let base = BasePolicy::<f64>::new(
            Backbone::MeanFlow, 2, 2, vec![8], true, Geometry::Sphere, &mut rng,
        );
        let critic = linear_critic(vec![0.0; 4], 0.0, 2, 2);
        let states = normal_states(&mut rng, 3, 2);
        let upd = lps_actor_loss(&actor, &base, &critic, &hyper, &states).unwrap();
        assert_eq!(upd.loss, 0.0);
        for g in &upd.grads {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn alpha_plays_no_role_in_deterministic_steering() {
        let mut rng = rng::root(13);
        let actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Sphere, false, &mut rng);
        let base = BasePolicy::<f64>::new(
            Backbone::MeanFlow, 2, 2, vec![8], true, Geometry::Sphere, &mut rng,
        );
        let critic = CriticEnsemble::<f64>::new(2, 2, vec![8], 2, &mut rng);
        let states = normal_states(&mut rng, 4, 2);
        let mut a = tiny_hyper(2, 1, 2);
        let mut b = tiny_hyper(2, 1, 2);
        a.alpha = 1.0;
        b.alpha = 512.0;
        let ua = lps_actor_loss(&actor, &base, &critic, &a, &states).unwrap();
        let ub = lps_actor_loss(&actor, &base, &critic, &b, &states).unwrap();
        assert_eq!(ua.loss.to_bits(), ub.loss.to_bits());
        assert_eq!(grad_bits(&ua.grads), grad_bits(&ub.grads));
    }

    #[test]
    fn steering_gradients_match_finite_differences() {
        let hyper = tiny_hyper(2, 1, 2);
        let mut rng = rng::root(14);
        let base = BasePolicy::<f64>::new(
            Backbone::MeanFlow, 2, 2, vec![8], true, Geometry::Sphere, &mut rng,
        );
        let critic = CriticEnsemble::<f64>::new(2, 2, vec![8], 2, &mut rng);
        let states = normal_states(&mut rng, 4, 2);

        // deterministic latent steering
        let actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Sphere, false, &mut rng);
        let z = actor.output(&states, None).unwrap();
        let a = base.one_step_action(&states, &z).unwrap();
        let q = critic.q_agg(false, &states, &a, hyper.actor_agg).unwrap();
        let norm = super::q_normalizer(&q, true);
        let params: Vec<Tensor<f64>> = actor.net.params().into_iter().cloned().collect();
        let program = lps_program(&actor, &base, &critic, hyper.actor_agg, norm, &states, None);
        let err =
            finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "lps fd err {err}");

        // noise-conditioned action-space extraction
        let qc_actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Normal, true, &mut rng);
        let z_prior = sample_prior(&mut rng, 4, 2, Geometry::Sphere);
        let behavior = base.one_step_action(&states, &z_prior).unwrap();
        let params: Vec<Tensor<f64>> = qc_actor.net.params().into_iter().cloned().collect();
        let program = qc_program(
            &qc_actor, &critic, hyper.actor_agg, norm, 0.7, &states, &z_prior, &behavior,
        );
        let err =
            finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "qc fd err {err}");

        // stochastic latent steering with the action-space anchor
        let lpsd_actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Sphere, true, &mut rng);
        let params: Vec<Tensor<f64>> = lpsd_actor.net.params().into_iter().cloned().collect();
        let program = lpsd_program(
            &lpsd_actor, &base, &critic, hyper.actor_agg, norm, 0.7, &states, &z_prior, &behavior,
        );
        let err =
            finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "lpsd fd err {err}");

        // distilled latent critic: both the regression and the steering side
        let latent_critic =
            Mlp::<f64>::init(MlpSpec::new(4, vec![8], 1), &mut rng);
        let decoded = base.one_step_action(&states, &z_prior).unwrap();
        let q_composed = critic.q_agg(false, &states, &decoded, hyper.actor_agg).unwrap();
        let lc_params: Vec<Tensor<f64>> =
            latent_critic.params().into_iter().cloned().collect();
        let program = dsrl_distill_program(&latent_critic, &states, &z_prior, &q_composed);
        let err =
            finite_diff_check(&program, &lc_params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "distill fd err {err}");

        let params: Vec<Tensor<f64>> = actor.net.params().into_iter().cloned().collect();
        let program = dsrl_actor_program(&actor, &latent_critic, norm, &states);
        let err =
            finite_diff_check(&program, &params, &[], FdMode::Grad, FD_DEFAULT_STEP).unwrap();
        assert!(err < 1e-4, "dsrl actor fd err {err}");
    }

    #[test]
    fn distillation_fits_the_composed_value() {
        let hyper = tiny_hyper(2, 1, 2);
        let mut rng = rng::root(15);
        let actor =
            LatentActor::<f64>::new(2, 2, vec![8], Geometry::Sphere, false, &mut rng);
        let base = BasePolicy::<f64>::new(
            Backbone::MeanFlow, 2, 2, vec![8], true, Geometry::Sphere, &mut rng,
        );
        let critic = CriticEnsemble::<f64>::new(2, 2, vec![8], 2, &mut rng);
        let mut latent_critic = Mlp::<f64>::init(MlpSpec::new(4, vec![16], 1), &mut rng);
        let mut opt = Adam::for_params(1e-2, &latent_critic.params());
        let states = normal_states(&mut rng, 16, 2);
        let z_prior = sample_prior(&mut rng, 16, 2, Geometry::Sphere);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let ((dloss, dgrads), _) = dsrl_losses(
                &actor, &base, &critic, &latent_critic, &hyper, &states, &z_prior,
            )
            .unwrap();
            let mut p = latent_critic.params_mut();
            opt.apply(&mut p, &dgrads).unwrap();
            if first.is_none() {
                first = Some(dloss);
            }
            last = dloss;
        }
        let first = first.unwrap();
        assert!(
            last < 0.2 * first,
            "distill loss did not shrink: {first} -> {last}"
        );
    }

    #[test]
    fn actor_phase_touches_only_actor_parameters() {
        let hyper = tiny_hyper(2, 1, 2);
        let mut state = TrainState::<f64>::new(AgentKind::Lps, hyper, 21, 0).unwrap();
        let states = normal_states(&mut rng::root(22), 8, 2);

        let base_before = net_bits(&state.base.net);
        let heads_before: Vec<Vec<u64>> =
            state.critic.as_ref().unwrap().heads.iter().map(net_bits).collect();
        let targets_before: Vec<Vec<u64>> =
            state.critic.as_ref().unwrap().targets.iter().map(net_bits).collect();
        let actor_before = net_bits(&state.actor.as_ref().unwrap().net);

        let upd = lps_actor_loss(
            state.actor.as_ref().unwrap(),
            &state.base,
            state.critic.as_ref().unwrap(),
            &state.hyper,
            &states,
        )
        .unwrap();
        let actor = state.actor.as_mut().unwrap();
        let mut params = actor.net.params_mut();
        state.actor_opt.as_mut().unwrap().apply(&mut params, &upd.grads).unwrap();

        assert_eq!(net_bits(&state.base.net), base_before, "base moved in actor phase");
        let heads_after: Vec<Vec<u64>> =
            state.critic.as_ref().unwrap().heads.iter().map(net_bits).collect();
        let targets_after: Vec<Vec<u64>> =
            state.critic.as_ref().unwrap().targets.iter().map(net_bits).collect();
        assert_eq!(heads_after, heads_before, "critic heads moved in actor phase");
        assert_eq!(targets_after, targets_before, "critic targets moved in actor phase");
        assert_ne!(net_bits(&state.actor.as_ref().unwrap().net), actor_before);
    }

    #[test]
    fn full_step_moves_each_parameter_set_and_targets_only_by_polyak() {
        let hyper = tiny_hyper(2, 2, 5);
        let mut state = TrainState::<f32>::new(AgentKind::Lps, hyper, 23, 0).unwrap();
        let batch = demo_batch(5, 16, 24);

        let base_before = net_bits(&state.base.net);
        let actor_before = net_bits(&state.actor.as_ref().unwrap().net);
        let heads_before = state.critic.as_ref().unwrap().heads.clone();
        let targets_before = state.critic.as_ref().unwrap().targets.clone();

        let report = train_step(&mut state, &batch).unwrap();
        assert_eq!(state.step, 1);
        assert!(report.base_loss.is_finite());
        assert!(report.actor_loss.unwrap().is_finite());
        assert!(report.critic_loss.unwrap().is_finite());

        assert_ne!(net_bits(&state.base.net), base_before);
        assert_ne!(net_bits(&state.actor.as_ref().unwrap().net), actor_before);
        let critic = state.critic.as_ref().unwrap();
        for k in 0..critic.heads.len() {
            assert_ne!(net_bits(&critic.heads[k]), net_bits(&heads_before[k]));
            // targets moved exactly by the polyak rule applied to the
            // freshly updated heads
            let mut expect = targets_before[k].clone();
            {
                let mut tp = expect.params_mut();
                let op = critic.heads[k].params();
                crate::nn::polyak_update(&mut tp, &op, state.hyper.tau);
            }
            assert_eq!(net_bits(&critic.targets[k]), net_bits(&expect));
        }
    }

    #[test]
    fn bc_kinds_update_the_base_policy_only() {
        for kind in [AgentKind::BcMf, AgentKind::BcFm] {
            let hyper = tiny_hyper(2, 2, 5);
            let mut state = TrainState::<f32>::new(kind, hyper, 25, 0).unwrap();
            assert!(state.actor.is_none());
            assert!(state.critic.is_none());
            let batch = demo_batch(5, 16, 26);
            let before = net_bits(&state.base.net);
            let report = train_step(&mut state, &batch).unwrap();
            assert_ne!(net_bits(&state.base.net), before);
            assert!(report.actor_loss.is_none());
            assert!(report.critic_loss.is_none());
            assert!(report.q_mean.is_none());
        }
    }

    #[test]
    fn identical_states_and_batches_step_bitwise_identically() {
        for kind in [AgentKind::Lps, AgentKind::QcFql, AgentKind::DsrlNa] {
            let hyper = tiny_hyper(2, 2, 5);
            let state_a = TrainState::<f32>::new(kind, hyper, 31, 7).unwrap();
            let mut state_b = state_a.clone();
            let mut state_a = state_a;
            let ds = generate_demos(
                &EnvSpec::pointmass_nav(), 8, &ArtifactProfile::default(), 91,
            )
            .unwrap();
            let mut rng_a = rng::stream(32, 1);
            let mut rng_b = rng::stream(32, 1);
            for _ in 0..2 {
                let batch_a = sample_chunk_batch::<f32>(&ds, 5, 16, &mut rng_a).unwrap();
                let batch_b = sample_chunk_batch::<f32>(&ds, 5, 16, &mut rng_b).unwrap();
                train_step(&mut state_a, &batch_a).unwrap();
                train_step(&mut state_b, &batch_b).unwrap();
            }
            assert_eq!(state_bytes(&state_a), state_bytes(&state_b), "{kind} diverged");
        }
    }

    #[test]
    fn checkpoint_roundtrip_resumes_the_exact_trajectory() {
        let hyper = tiny_hyper(2, 2, 5);
        let mut state = TrainState::<f32>::new(AgentKind::DsrlNa, hyper, 41, 99).unwrap();
        let ds = generate_demos(&EnvSpec::pointmass_nav(), 8, &ArtifactProfile::default(), 91)
            .unwrap();
        let mut rng_batch = rng::stream(42, 1);
        for _ in 0..2 {
            let batch = sample_chunk_batch::<f32>(&ds, 5, 16, &mut rng_batch).unwrap();
            train_step(&mut state, &batch).unwrap();
        }
        let bytes = state_bytes(&state);
        let mut loaded: TrainState<f32> =
            read_train_state(&mut bytes.as_slice(), "mem").unwrap();
        assert_eq!(loaded.step, 2);
        assert_eq!(loaded.config_hash, 99);
        assert_eq!(state_bytes(&loaded), bytes, "rewrite changed the bytes");

        // both must continue identically, including RNG position
        let mut rng_c = rng_batch.clone();
        let batch_a = sample_chunk_batch::<f32>(&ds, 5, 16, &mut rng_batch).unwrap();
        let batch_b = sample_chunk_batch::<f32>(&ds, 5, 16, &mut rng_c).unwrap();
        train_step(&mut state, &batch_a).unwrap();
        train_step(&mut loaded, &batch_b).unwrap();
        assert_eq!(state_bytes(&state), state_bytes(&loaded));
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let hyper = tiny_hyper(2, 1, 2);
        let state = TrainState::<f32>::new(AgentKind::Lps, hyper, 43, 0).unwrap();
        let bytes = state_bytes(&state);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_train_state::<_, f32>(&mut bad.as_slice(), "mem").is_err());

        let truncated = &bytes[..bytes.len() - 7];
        assert!(read_train_state::<_, f32>(&mut &truncated[..], "mem").is_err());
    }

    #[test]
    fn poisoned_parameters_abort_with_the_failing_phase() {
        let hyper = tiny_hyper(2, 2, 5);
        let batch = demo_batch(5, 8, 51);

        let mut state = TrainState::<f32>::new(AgentKind::Lps, hyper.clone(), 52, 0).unwrap();
        state.critic.as_mut().unwrap().heads[0].weights[0].data_mut()[0] = f32::NAN;
        match train_step(&mut state, &batch) {
            Err(LpsError::NanAbort { step: 0, phase: "actor" }) => {}
            other => panic!("expected actor-phase abort, got {other:?}"),
        }

        let mut state = TrainState::<f32>::new(AgentKind::Lps, hyper, 53, 0).unwrap();
        state.base.net.weights[0].data_mut()[0] = f32::NAN;
        match train_step(&mut state, &batch) {
            Err(LpsError::NanAbort { step: 0, phase: "base" }) => {}
            other => panic!("expected base-phase abort, got {other:?}"),
        }
    }

    #[test]
    fn act_yields_chunk_shaped_outputs_per_kind() {
        let obs = Tensor::<f32>::from_vec(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.0, -0.5]);
        for kind in AgentKind::ALL {
            let hyper = tiny_hyper(2, 2, 5);
            let state = TrainState::<f32>::new(kind, hyper, 61, 0).unwrap();
            let mut rng = rng::root(62);
            let a = state.act(&obs, &mut rng).unwrap();
            assert_eq!(a.shape(), (3, 10), "{kind}");
            assert!(a.all_finite(), "{kind}");
        }
    }

    #[test]
    fn deterministic_kinds_ignore_the_action_rng() {
        let obs = Tensor::<f32>::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]);
        for kind in [AgentKind::Lps, AgentKind::DsrlNa] {
            let state = TrainState::<f32>::new(kind, tiny_hyper(2, 2, 5), 63, 0).unwrap();
            let a1 = state.act(&obs, &mut rng::root(1)).unwrap();
            let a2 = state.act(&obs, &mut rng::root(999)).unwrap();
            assert_eq!(
                a1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{kind}"
            );
        }
        // the stochastic kinds must depend on it
        for kind in [AgentKind::Lpsd, AgentKind::QcMfql, AgentKind::BcMf] {
            let state = TrainState::<f32>::new(kind, tiny_hyper(2, 2, 5), 63, 0).unwrap();
            let a1 = state.act(&obs, &mut rng::root(1)).unwrap();
            let a2 = state.act(&obs, &mut rng::root(999)).unwrap();
            assert_ne!(a1.data(), a2.data(), "{kind}");
        }
    }

    #[test]
    fn hyper_validation_rejects_misconfiguration() {
        let mut hy = AgentHyper::toy(2, 2);
        hy.alpha = 0.0;
        assert!(hy.validate(AgentKind::QcMfql).is_err());
        assert!(hy.validate(AgentKind::Lps).is_ok(), "alpha is not an lps knob");
        hy.alpha = 1.0;
        hy.p_equal = 1.5;
        assert!(hy.validate(AgentKind::Lps).is_err());
    }

    #[test]
    fn kind_names_roundtrip() {
        for kind in AgentKind::ALL {
            assert_eq!(kind.as_str().parse::<AgentKind>().unwrap(), kind);
        }
        assert!("qc_fql".parse::<AgentKind>().is_err());
    }
}
