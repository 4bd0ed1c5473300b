//! Action-chunk critics.
//!
//! A critic head scores a state paired with a whole action chunk (h
//! consecutive actions flattened into one row). Temporal-difference learning
//! then runs at the chunk level: the target discounts the h in-chunk rewards
//! and bootstraps from the target ensemble at the state h steps ahead,
//!
//!   y = sum_i gamma^i r_{t+i} + mask * gamma^h * Q_bar(s_{t+h}, a'),
//!
//! where `mask` is zero when the episode terminates inside the chunk. The
//! ensemble aggregates pessimistically (min) for bootstrap targets and with
//! the mean when a policy is trained against it; both choices are explicit
//! arguments rather than baked in.

use crate::autodiff::{NodeId, Tape};
use crate::error::{LpsError, Result};
use crate::nn::{polyak_update, Mlp, MlpSpec};
use crate::rng::LabRng;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Min,
    Mean,
}

/// Discounted sum of a reward slice: sum_i gamma^i r_i.
pub fn chunk_return<F: Real>(rewards: &[F], gamma: f64) -> Result<F> {
    if rewards.is_empty() {
        return Err(LpsError::Empty { what: "reward slice for a chunk return" });
    }
    let g = F::from_f64(gamma);
    let mut acc = F::zero();
    let mut scale = F::one();
    for &r in rewards {
        acc = acc + scale * r;
        scale = scale * g;
    }
    Ok(acc)
}

/// K independent Q heads plus their polyak-averaged target copies.
#[derive(Clone, Debug)]
pub struct CriticEnsemble<F> {
    pub heads: Vec<Mlp<F>>,
    pub targets: Vec<Mlp<F>>,
    pub state_dim: usize,
    pub chunk_dim: usize,
}

impl<F: Real> CriticEnsemble<F> {
    pub fn new(
        state_dim: usize,
        chunk_dim: usize,
        hidden: Vec<usize>,
        k: usize,
        rng: &mut LabRng,
    ) -> Self {
        assert!(k >= 1, "critic ensemble needs at least one head");
        let heads: Vec<Mlp<F>> = (0..k)
            .map(|_| Mlp::init(MlpSpec::new(state_dim + chunk_dim, hidden.clone(), 1), rng))
            .collect();
        let targets = heads.clone();
        CriticEnsemble { heads, targets, state_dim, chunk_dim }
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    fn check_batch(&self, states: &Tensor<F>, chunks: &Tensor<F>) -> Result<()> {
        if states.cols() != self.state_dim
            || chunks.cols() != self.chunk_dim
            || states.rows() != chunks.rows()
        {
            return Err(LpsError::ShapeMismatch {
                context: "critic input",
                expected: format!("[n, {}] and [n, {}]", self.state_dim, self.chunk_dim),
                got: format!("{:?} and {:?}", states.shape(), chunks.shape()),
            });
        }
        Ok(())
    }

    /// Per-head values as [n, 1] columns.
    pub fn q_all(
        &self,
        use_target: bool,
        states: &Tensor<F>,
        chunks: &Tensor<F>,
    ) -> Result<Vec<Tensor<F>>> {
        self.check_batch(states, chunks)?;
        let x = Tensor::hcat(&[states, chunks]);
        let nets = if use_target { &self.targets } else { &self.heads };
        nets.iter().map(|net| net.forward(&x)).collect()
    }

    /// Aggregated ensemble value.
    pub fn q_agg(
        &self,
        use_target: bool,
        states: &Tensor<F>,
        chunks: &Tensor<F>,
        agg: Aggregation,
    ) -> Result<Tensor<F>> {
        let qs = self.q_all(use_target, states, chunks)?;
        Ok(aggregate_columns(&qs, agg))
    }

    /// Move every target head toward its online head by factor tau.
    pub fn polyak(&mut self, tau: f64) {
        for (t, o) in self.targets.iter_mut().zip(&self.heads) {
            let mut tp = t.params_mut();
            polyak_update(&mut tp, &o.params(), tau);
        }
    }
}

pub fn aggregate_columns<F: Real>(columns: &[Tensor<F>], agg: Aggregation) -> Tensor<F> {
    assert!(!columns.is_empty());
    let mut out = columns[0].clone();
    match agg {
        Aggregation::Min => {
            for c in &columns[1..] {
                out = out.zip_map(c, |a, b| if a < b { a } else { b });
            }
        }
        Aggregation::Mean => {
            for c in &columns[1..] {
                out = out.add(c);
            }
            out = out.scale(F::from_f64(1.0 / columns.len() as f64));
        }
    }
    out
}

/// Aggregated ensemble value on a tape with the critic parameters frozen;
/// gradients flow only into whatever feeds the `chunks` (and `states`) nodes.
/// This is the building block for every policy-steering loss.
pub fn build_q_agg_graph<F: Real>(
    tape: &mut Tape<F>,
    critic: &CriticEnsemble<F>,
    use_target: bool,
    states: NodeId,
    chunks: NodeId,
    agg: Aggregation,
) -> NodeId {
    let x = tape.concat_cols(&[states, chunks]);
    let nets = if use_target { &critic.targets } else { &critic.heads };
    let qs: Vec<NodeId> = nets.iter().map(|net| net.build_forward(tape, x, false).0).collect();
    match agg {
        Aggregation::Min => {
            let mut acc = qs[0];
            for &q in &qs[1..] {
                acc = tape.min_elem(acc, q);
            }
            acc
        }
        Aggregation::Mean => {
            let mut acc = qs[0];
            for &q in &qs[1..] {
                acc = tape.add(acc, q);
            }
            tape.scale(acc, 1.0 / qs.len() as f64)
        }
    }
}

/// Chunk-level TD targets. `rewards` is [n, h] (the h in-chunk rewards),
/// `masks` is [n, 1] with 0 marking termination inside the chunk, and
/// `next_*` describe the bootstrap point h steps ahead.
pub fn td_targets<F: Real>(
    critic: &CriticEnsemble<F>,
    rewards: &Tensor<F>,
    masks: &Tensor<F>,
    next_states: &Tensor<F>,
    next_chunks: &Tensor<F>,
    gamma: f64,
    agg: Aggregation,
) -> Result<Tensor<F>> {
    let n = rewards.rows();
    let h = rewards.cols();
    if masks.shape() != (n, 1) {
        return Err(LpsError::ShapeMismatch {
            context: "td targets",
            expected: format!("[{n}, 1] masks"),
            got: format!("{:?}", masks.shape()),
        });
    }
    let q_next = critic.q_agg(true, next_states, next_chunks, agg)?;
    let gamma_h = F::from_f64(gamma.powi(h as i32));
    let mut y = Tensor::zeros(n, 1);
    for b in 0..n {
        let base = chunk_return(rewards.row(b), gamma)?;
        y.data_mut()[b] = base + masks.data()[b] * gamma_h * q_next.data()[b];
    }
    Ok(y)
}

/// Squared TD error summed over heads and batch, divided by (batch * K).
/// Targets are frozen constants. Returns per-head gradient lists in head
/// order, each in canonical parameter order.
pub fn critic_loss_core<F: Real>(
    critic: &CriticEnsemble<F>,
    states: &Tensor<F>,
    chunks: &Tensor<F>,
    targets: &Tensor<F>,
) -> Result<(F, Vec<Vec<Tensor<F>>>)> {
    let n = states.rows();
    if targets.shape() != (n, 1) {
        return Err(LpsError::ShapeMismatch {
            context: "critic loss targets",
            expected: format!("[{n}, 1]"),
            got: format!("{:?}", targets.shape()),
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(states.clone());
    let a = tape.constant(chunks.clone());
    let x = tape.concat_cols(&[s, a]);
    let y = tape.constant(targets.clone());
    let mut head_param_ids = Vec::with_capacity(critic.k());
    let mut sums = Vec::with_capacity(critic.k());
    for head in &critic.heads {
        let (q, pids) = head.build_forward(&mut tape, x, true);
        head_param_ids.push(pids);
        let diff = tape.sub(q, y);
        let sq = tape.square(diff);
        sums.push(tape.sum_all(sq));
    }
    let mut total = sums[0];
    for &sid in &sums[1..] {
        total = tape.add(total, sid);
    }
    let loss_id = tape.scale(total, 1.0 / (n * critic.k()) as f64);
    let loss = tape.value(loss_id).item();
    let mut grads = tape.backward(loss_id)?;
    let out = critic
        .heads
        .iter()
        .zip(&head_param_ids)
        .map(|(head, pids)| head.collect_grads(&mut grads, pids))
        .collect();
    Ok((loss, out))
}
