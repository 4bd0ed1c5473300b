//! Latent-space geometry: priors and actor output heads.
//!
//! The steering latent lives in R^d with d = chunk_len * action_dim. Three
//! geometries are supported:
//!
//! * `sphere` (default): prior draws are Gaussians renormalized onto the
//!   sphere of radius sqrt(d); actor outputs are projected onto the same
//!   sphere, so every latent the critic path ever sees has squared norm
//!   exactly d.
//! * `normal`: standard normal prior, identity actor head (unconstrained).
//! * `truncated`: per-coordinate standard normal rejection-sampled into
//!   [-2, 2]; actor head is 2*tanh, which keeps outputs inside the prior box
//!   but distorts toward the faces.

use crate::autodiff::{NodeId, Tape};
use crate::error::{LpsError, Result};
use crate::rng::{self, LabRng};
use crate::tensor::{l2_norm, Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Sphere,
    Normal,
    Truncated,
}

pub const DEGENERACY_THRESHOLD: f64 = 1e-12;
pub const TRUNCATION_BOUND: f64 = 2.0;

/// One draw from the sphere prior: z = sqrt(d) * eps / |eps|, eps ~ N(0, I).
/// The measure-zero zero-norm draw is resampled.
pub fn sample_sphere<F: Real>(rng: &mut LabRng, d: usize) -> Vec<F> {
    assert!(d > 0, "latent dim must be positive");
    let mut eps = vec![F::zero(); d];
    loop {
        rng::fill_standard_normal(rng, &mut eps);
        let n = l2_norm(&eps);
        if n.as_f64() >= DEGENERACY_THRESHOLD {
            let s = F::from_f64((d as f64).sqrt()) / n;
            for v in &mut eps {
                *v = *v * s;
            }
            return eps;
        }
    }
}

/// Deterministic projection x -> sqrt(d) * x / |x|. Errors on degenerate
/// inputs instead of inventing a direction.
pub fn project_sphere<F: Real>(x: &[F], d: usize) -> Result<Vec<F>> {
    assert_eq!(x.len(), d, "project_sphere: dim mismatch");
    let n = l2_norm(x);
    if n.as_f64() < DEGENERACY_THRESHOLD {
        return Err(LpsError::DegenerateNorm { norm: n.as_f64(), threshold: DEGENERACY_THRESHOLD });
    }
    let s = F::from_f64((d as f64).sqrt()) / n;
    Ok(x.iter().map(|&v| v * s).collect())
}

fn sample_truncated_coord<F: Real>(rng: &mut LabRng) -> F {
    // Rejection sampling keeps the shape of the normal inside the box,
    // unlike clipping which piles mass onto the faces.
    let mut buf = [F::zero(); 2];
    loop {
        rng::fill_standard_normal(rng, &mut buf);
        for &v in &buf {
            if v.as_f64().abs() <= TRUNCATION_BOUND {
                return v;
            }
        }
    }
}

/// `n` prior draws as rows of an [n, d] tensor.
pub fn sample_prior<F: Real>(rng: &mut LabRng, n: usize, d: usize, geometry: Geometry) -> Tensor<F> {
    let mut out = Tensor::zeros(n, d);
    match geometry {
        Geometry::Sphere => {
            for i in 0..n {
                let z = sample_sphere(rng, d);
                out.row_mut(i).copy_from_slice(&z);
            }
        }
        Geometry::Normal => {
            rng::fill_standard_normal(rng, out.data_mut());
        }
        Geometry::Truncated => {
            for v in out.data_mut() {
                *v = sample_truncated_coord(rng);
            }
        }
    }
    out
}

/// Map raw actor logits onto the latent manifold of the given geometry.
/// Rows of `logits` are independent latents.
pub fn actor_head<F: Real>(logits: &Tensor<F>, geometry: Geometry) -> Result<Tensor<F>> {
    match geometry {
        Geometry::Sphere => {
            let d = logits.cols();
            let mut out = logits.clone();
            for i in 0..logits.rows() {
                let z = project_sphere(logits.row(i), d)?;
                out.row_mut(i).copy_from_slice(&z);
            }
            Ok(out)
        }
        Geometry::Normal => Ok(logits.clone()),
        Geometry::Truncated => {
            let b = F::from_f64(TRUNCATION_BOUND);
            Ok(logits.map(|v| b * v.tanh()))
        }
    }
}

/// Tape version of [`actor_head`]: gradients flow through the head into the
/// logits.
pub fn build_actor_head<F: Real>(
    tape: &mut Tape<F>,
    logits: NodeId,
    d: usize,
    geometry: Geometry,
) -> Result<NodeId> {
    match geometry {
        Geometry::Sphere => tape.project_rows(logits, (d as f64).sqrt()),
        Geometry::Normal => Ok(logits),
        Geometry::Truncated => {
            let t = tape.tanh(logits);
            Ok(tape.scale(t, TRUNCATION_BOUND))
        }
    }
}
