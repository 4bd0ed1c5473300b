//! One-step generative base policies.
//!
//! The base policy models action chunks conditioned on state. Two backbones:
//!
//! * `MeanFlow`: the network represents the average velocity
//!   u(z_t, r, t) over the interval [r, t] of the linear interpolation path
//!   z_t = (1-t) a + t z. Training regresses u onto the stop-gradient
//!   target u_tgt = v - (t-r) du/dt, where du/dt is the total derivative of
//!   the network along the path, computed with a forward tangent sweep with
//!   seed (v, 0, 1) on (z_t, r, t). Sampling is a single evaluation:
//!   a = z - u(z, 0, 1).
//! * `FlowMatching`: the network represents the instantaneous velocity
//!   v(z_t, t); training is plain conditional flow matching and sampling is
//!   an Euler walk from t=1 to t=0. Used as the multi-step oracle and for
//!   the iterative-baseline agents.
//!
//! In the noise-to-action reformulation (default for MeanFlow) the network
//! outputs the action-space point directly and u(z_t, r, t) = z_t - net,
//! which makes the one-step sample literally the raw network output at
//! (z, 0, 1).

use crate::autodiff::{NodeId, Tape};
use crate::error::{LpsError, Result};
use crate::latent::Geometry;
use crate::nn::{Mlp, MlpSpec};
use crate::rng::{self, LabRng};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    MeanFlow,
    FlowMatching,
}

#[derive(Clone, Debug)]
pub struct BasePolicy<F> {
    pub net: Mlp<F>,
    pub backbone: Backbone,
    /// MeanFlow only: network predicts the action-space point and
    /// u = z_t - net(s, z_t, r, t).
    pub reformulated: bool,
    pub geometry: Geometry,
    pub state_dim: usize,
    pub latent_dim: usize,
}

pub fn flow_input_dim(backbone: Backbone, state_dim: usize, latent_dim: usize) -> usize {
    match backbone {
        Backbone::MeanFlow => state_dim + latent_dim + 2, // (s, z_t, r, t)
        Backbone::FlowMatching => state_dim + latent_dim + 1, // (s, z_t, t)
    }
}

impl<F: Real> BasePolicy<F> {
    pub fn new(
        backbone: Backbone,
        state_dim: usize,
        latent_dim: usize,
        hidden: Vec<usize>,
        reformulated: bool,
        geometry: Geometry,
        rng: &mut LabRng,
    ) -> Self {
        assert!(
            !reformulated || backbone == Backbone::MeanFlow,
            "the noise-to-action reformulation only applies to the MeanFlow backbone"
        );
        let spec = MlpSpec::new(
            flow_input_dim(backbone, state_dim, latent_dim),
            hidden,
            latent_dim,
        );
        BasePolicy {
            net: Mlp::init(spec, rng),
            backbone,
            reformulated,
            geometry,
            state_dim,
            latent_dim,
        }
    }

    fn check_batch(&self, states: &Tensor<F>, z: &Tensor<F>, context: &'static str) -> Result<()> {
        if states.cols() != self.state_dim
            || z.cols() != self.latent_dim
            || states.rows() != z.rows()
        {
            return Err(LpsError::ShapeMismatch {
                context,
                expected: format!("[n, {}] and [n, {}]", self.state_dim, self.latent_dim),
                got: format!("{:?} and {:?}", states.shape(), z.shape()),
            });
        }
        Ok(())
    }

    /// Average velocity u(s, z_t, r, t). MeanFlow backbone only.
    pub fn u(
        &self,
        states: &Tensor<F>,
        z_t: &Tensor<F>,
        r: &Tensor<F>,
        t: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        if self.backbone != Backbone::MeanFlow {
            return Err(LpsError::InvalidArgument(
                "u() is only defined for the MeanFlow backbone".into(),
            ));
        }
        self.check_batch(states, z_t, "u_of")?;
        let x = Tensor::hcat(&[states, z_t, r, t]);
        let out = self.net.forward(&x)?;
        Ok(if self.reformulated { z_t.sub(&out) } else { out })
    }

    /// One evaluation from noise to action chunk: a = z - u(z, 0, 1).
    ///
    /// Under the reformulation this is exactly the raw network output at
    /// (z, 0, 1) -- the subtraction cancels algebraically, and we return the
    /// network output directly so the identity holds bitwise.
    pub fn one_step_action(&self, states: &Tensor<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        if self.backbone != Backbone::MeanFlow {
            return Err(LpsError::InvalidArgument(
                "one_step_action requires the MeanFlow backbone; use fm_sample_euler".into(),
            ));
        }
        self.check_batch(states, z, "one_step_action")?;
        let n = states.rows();
        let r = Tensor::zeros(n, 1);
        let t = Tensor::filled(n, 1, F::one());
        if self.reformulated {
            let x = Tensor::hcat(&[states, z, &r, &t]);
            self.net.forward(&x)
        } else {
            Ok(z.sub(&self.u(states, z, &r, &t)?))
        }
    }

    /// Instantaneous velocity v(s, z_t, t). FlowMatching backbone only.
    pub fn fm_velocity(&self, states: &Tensor<F>, z_t: &Tensor<F>, t: &Tensor<F>) -> Result<Tensor<F>> {
        if self.backbone != Backbone::FlowMatching {
            return Err(LpsError::InvalidArgument(
                "fm_velocity is only defined for the FlowMatching backbone".into(),
            ));
        }
        self.check_batch(states, z_t, "fm_velocity")?;
        let x = Tensor::hcat(&[states, z_t, t]);
        self.net.forward(&x)
    }

    /// Euler integration from t=1 down to t=0: z <- z - (1/steps) v(s, z, t).
    pub fn fm_sample_euler(
        &self,
        states: &Tensor<F>,
        z1: &Tensor<F>,
        steps: usize,
    ) -> Result<Tensor<F>> {
        if steps == 0 {
            return Err(LpsError::InvalidArgument("euler sampler needs steps >= 1".into()));
        }
        let n = states.rows();
        let dt = F::from_f64(1.0 / steps as f64);
        let mut z = z1.clone();
        for k in 0..steps {
            let tk = F::from_f64(1.0 - k as f64 / steps as f64);
            let t = Tensor::filled(n, 1, tk);
            let v = self.fm_velocity(states, &z, &t)?;
            z = z.zip_map(&v, |zi, vi| zi - dt * vi);
        }
        Ok(z)
    }

    /// Draw prior noise and decode it: the behavior-cloned action sampler.
    pub fn sample_actions(
        &self,
        states: &Tensor<F>,
        rng: &mut LabRng,
        flow_steps: usize,
    ) -> Result<Tensor<F>> {
        let z = crate::latent::sample_prior(rng, states.rows(), self.latent_dim, self.geometry);
        match self.backbone {
            Backbone::MeanFlow => self.one_step_action(states, &z),
            Backbone::FlowMatching => self.fm_sample_euler(states, &z, flow_steps),
        }
    }
}

/// Interval endpoints for the average-velocity objective. Always consumes
/// three uniforms so the stream position does not depend on the outcome.
pub fn sample_rt<F: Real>(rng: &mut LabRng, p_equal: f64) -> (F, F) {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let gate: f64 = rng.gen();
    if gate < p_equal {
        (F::from_f64(u1), F::from_f64(u1))
    } else {
        (F::from_f64(u1.min(u2)), F::from_f64(u1.max(u2)))
    }
}

/// Batched (r, t) columns.
pub fn draw_rt<F: Real>(rng: &mut LabRng, n: usize, p_equal: f64) -> (Tensor<F>, Tensor<F>) {
    let mut r = Tensor::zeros(n, 1);
    let mut t = Tensor::zeros(n, 1);
    for i in 0..n {
        let (ri, ti) = sample_rt(rng, p_equal);
        r.data_mut()[i] = ri;
        t.data_mut()[i] = ti;
    }
    (r, t)
}

/// Linear interpolation path: z_t = (1-t) a + t z, target velocity v = z - a.
/// `t` is a per-row column.
pub fn interpolate<F: Real>(
    actions: &Tensor<F>,
    noise: &Tensor<F>,
    t: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    assert_eq!(actions.shape(), noise.shape(), "interpolate: shape mismatch");
    assert_eq!(t.shape(), (actions.rows(), 1), "interpolate: t must be [n, 1]");
    let mut z_t = Tensor::zeros(actions.rows(), actions.cols());
    for i in 0..actions.rows() {
        let ti = t.data()[i];
        let one_m = F::one() - ti;
        let (ar, nr) = (actions.row(i), noise.row(i));
        let zr = z_t.row_mut(i);
        for j in 0..ar.len() {
            zr[j] = one_m * ar[j] + ti * nr[j];
        }
    }
    let v = noise.sub(actions);
    (z_t, v)
}

/// Average-velocity graph u(s, z_t, r, t) from explicit parameter nodes, so
/// the same construction serves training, finite-difference checks, and the
/// steering losses.
pub fn build_u_graph<F: Real>(
    tape: &mut Tape<F>,
    spec: &MlpSpec,
    reformulated: bool,
    params: &[NodeId],
    s: NodeId,
    z_t: NodeId,
    r: NodeId,
    t: NodeId,
) -> NodeId {
    let x = tape.concat_cols(&[s, z_t, r, t]);
    let out = build_mlp_graph(tape, spec, params, x);
    if reformulated {
        tape.sub(z_t, out)
    } else {
        out
    }
}

/// Forward an MLP from explicit parameter nodes (w0, b0, w1, b1, ...).
pub fn build_mlp_graph<F: Real>(
    tape: &mut Tape<F>,
    spec: &MlpSpec,
    params: &[NodeId],
    x: NodeId,
) -> NodeId {
    let layers = spec.layer_dims().len();
    assert_eq!(params.len(), layers * 2, "build_mlp_graph: param count mismatch");
    let mut h = x;
    for l in 0..layers {
        h = tape.affine(h, params[2 * l], params[2 * l + 1]);
        if l < layers - 1 {
            h = match spec.activation {
                crate::nn::Activation::Relu => tape.relu(h),
                crate::nn::Activation::Gelu => tape.gelu(h),
            };
        }
    }
    h
}

/// Mean squared residual against a stop-gradient target:
/// mean over rows of |pred - target|^2.
pub fn build_regression_loss<F: Real>(
    tape: &mut Tape<F>,
    pred: NodeId,
    target: NodeId,
) -> NodeId {
    let rows = tape.value(pred).rows();
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / rows as f64)
}

/// Deterministic core of the average-velocity loss: all randomness
/// (noise, interval draws) is passed in explicitly.
///
/// Returns the loss and parameter gradients in canonical order. The JVP
/// target is computed on the same tape with parameters at their current
/// values and enters the loss as a constant (stop-gradient).
pub fn meanflow_loss_core<F: Real>(
    policy: &BasePolicy<F>,
    states: &Tensor<F>,
    actions: &Tensor<F>,
    noise: &Tensor<F>,
    r: &Tensor<F>,
    t: &Tensor<F>,
) -> Result<(F, Vec<Tensor<F>>)> {
    if policy.backbone != Backbone::MeanFlow {
        return Err(LpsError::InvalidArgument(
            "meanflow_loss requires the MeanFlow backbone".into(),
        ));
    }
    let n = states.rows();
    let (z_t, v) = interpolate(actions, noise, t);
    let mut tape = Tape::new();
    let s_id = tape.constant(states.clone());
    let zt_id = tape.constant(z_t);
    let r_id = tape.constant(r.clone());
    let t_id = tape.constant(t.clone());
    let param_ids: Vec<NodeId> = policy.net.params().iter().map(|p| tape.leaf((*p).clone())).collect();
    let u = build_u_graph(
        &mut tape,
        &policy.net.spec,
        policy.reformulated,
        &param_ids,
        s_id,
        zt_id,
        r_id,
        t_id,
    );
    // total derivative along the path: dz/dt = v, dr/dt = 0, dt/dt = 1
    let ones = Tensor::filled(n, 1, F::one());
    let du_dt = tape.forward_tangent(&[(zt_id, v.clone()), (t_id, ones)], u);
    // u_tgt = v - (t - r) du/dt, row-scaled, stop-gradient
    let mut u_tgt = v;
    for i in 0..n {
        let w = t.data()[i] - r.data()[i];
        let (tr, dr) = (u_tgt.row_mut(i), du_dt.row(i));
        for j in 0..tr.len() {
            tr[j] = tr[j] - w * dr[j];
        }
    }
    let tgt_id = tape.constant(u_tgt);
    let loss_id = build_regression_loss(&mut tape, u, tgt_id);
    let loss = tape.value(loss_id).item();
    let mut grads = tape.backward(loss_id)?;
    Ok((loss, policy.net.collect_grads(&mut grads, &param_ids)))
}

/// Average-velocity loss with draws taken from `rng`: per sample one prior
/// noise row and one (r, t) interval.
pub fn meanflow_loss<F: Real>(
    policy: &BasePolicy<F>,
    states: &Tensor<F>,
    actions: &Tensor<F>,
    p_equal: f64,
    rng: &mut LabRng,
) -> Result<(F, Vec<Tensor<F>>)> {
    let n = states.rows();
    let noise = crate::latent::sample_prior(rng, n, policy.latent_dim, policy.geometry);
    let (r, t) = draw_rt(rng, n, p_equal);
    meanflow_loss_core(policy, states, actions, &noise, &r, &t)
}

/// Deterministic core of the conditional flow-matching loss.
pub fn fm_loss_core<F: Real>(
    policy: &BasePolicy<F>,
    states: &Tensor<F>,
    actions: &Tensor<F>,
    noise: &Tensor<F>,
    t: &Tensor<F>,
) -> Result<(F, Vec<Tensor<F>>)> {
    if policy.backbone != Backbone::FlowMatching {
        return Err(LpsError::InvalidArgument(
            "fm_loss requires the FlowMatching backbone".into(),
        ));
    }
    let (z_t, v) = interpolate(actions, noise, t);
    let mut tape = Tape::new();
    let s_id = tape.constant(states.clone());
    let zt_id = tape.constant(z_t);
    let t_id = tape.constant(t.clone());
    let param_ids: Vec<NodeId> = policy.net.params().iter().map(|p| tape.leaf((*p).clone())).collect();
    let x = tape.concat_cols(&[s_id, zt_id, t_id]);
    let pred = build_mlp_graph(&mut tape, &policy.net.spec, &param_ids, x);
    let v_id = tape.constant(v);
    let loss_id = build_regression_loss(&mut tape, pred, v_id);
    let loss = tape.value(loss_id).item();
    let mut grads = tape.backward(loss_id)?;
    Ok((loss, policy.net.collect_grads(&mut grads, &param_ids)))
}

/// Flow-matching loss with uniform t draws.
pub fn fm_loss<F: Real>(
    policy: &BasePolicy<F>,
    states: &Tensor<F>,
    actions: &Tensor<F>,
    rng: &mut LabRng,
) -> Result<(F, Vec<Tensor<F>>)> {
    let n = states.rows();
    let noise = crate::latent::sample_prior(rng, n, policy.latent_dim, policy.geometry);
    let mut t = Tensor::zeros(n, 1);
    for v in t.data_mut() {
        *v = rng::uniform(rng);
    }
    fm_loss_core(policy, states, actions, &noise, &t)
}

/// Embed a flow-matching velocity network into an average-velocity network
/// by inserting a zero-weight column for the r input. With r = t forced, the
/// two objectives then coincide on identical draws, which is the degeneracy
/// check used in the tests.
pub fn embed_fm_net_as_meanflow<F: Real>(fm: &BasePolicy<F>) -> BasePolicy<F> {
    assert_eq!(fm.backbone, Backbone::FlowMatching);
    let mf_spec = MlpSpec {
        input_dim: fm.state_dim + fm.latent_dim + 2,
        hidden: fm.net.spec.hidden.clone(),
        output_dim: fm.net.spec.output_dim,
        activation: fm.net.spec.activation,
    };
    let mut weights = fm.net.weights.clone();
    let first = &fm.net.weights[0];
    let t_col = fm.state_dim + fm.latent_dim; // t column in the FM layout
    let mut w0 = Tensor::zeros(first.rows(), first.cols() + 1);
    for o in 0..first.rows() {
        let src = first.row(o);
        let dst = w0.row_mut(o);
        dst[..t_col].copy_from_slice(&src[..t_col]);
        dst[t_col] = F::zero(); // r gets zero weight
        dst[t_col + 1] = src[t_col];
    }
    weights[0] = w0;
    BasePolicy {
        net: Mlp { spec: mf_spec, weights, biases: fm.net.biases.clone() },
        backbone: Backbone::MeanFlow,
        reformulated: false,
        geometry: fm.geometry,
        state_dim: fm.state_dim,
        latent_dim: fm.latent_dim,
    }
}
