//! MLPs, Adam, polyak averaging, and the parameter checkpoint format.

use crate::autodiff::{affine_forward, gelu_scalar, NodeId, Tape};
use crate::error::{LpsError, Result};
use crate::rng::LabRng;
use crate::tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec { input_dim, hidden, output_dim, activation: Activation::Gelu }
    }

    /// Layer dimensions as (in, out) pairs.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Fully-connected network. Weights are stored `[out, in]` row-major; hidden
/// layers use the spec activation, the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub spec: MlpSpec,
    pub weights: Vec<Tensor<F>>,
    pub biases: Vec<Tensor<F>>,
}

impl<F: Real> Mlp<F> {
    /// He-uniform fan-in initialization: weights U(+-sqrt(6/fan_in)), biases
    /// U(+-1/sqrt(fan_in)). Nonzero biases keep heads well-defined on
    /// constant-zero observations (a zero-bias net maps the origin to the
    /// origin, which the sphere head cannot project). Weights then biases
    /// are drawn layer by layer in row-major order so initialization is a
    /// pure function of the RNG state.
    pub fn init(spec: MlpSpec, rng: &mut LabRng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let limit = (6.0 / fan_in as f64).sqrt();
            let mut w = Tensor::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * limit);
            }
            weights.push(w);
            let b_limit = 1.0 / (fan_in as f64).sqrt();
            let mut b = Tensor::zeros(1, fan_out);
            for v in b.data_mut() {
                *v = F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * b_limit);
            }
            biases.push(b);
        }
        Mlp { spec, weights, biases }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    fn activate(&self, x: Tensor<F>) -> Tensor<F> {
        match self.spec.activation {
            Activation::Relu => x.map(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::Gelu => x.map(gelu_scalar),
        }
    }

    /// Batched forward pass without derivative bookkeeping.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        if x.cols() != self.spec.input_dim {
            return Err(LpsError::ShapeMismatch {
                context: "mlp forward",
                expected: format!("[n, {}]", self.spec.input_dim),
                got: format!("[{}, {}]", x.rows(), x.cols()),
            });
        }
        let last = self.layer_count() - 1;
        let mut h = x.clone();
        for l in 0..=last {
            h = affine_forward(&h, &self.weights[l], &self.biases[l]);
            if l < last {
                h = self.activate(h);
            }
        }
        Ok(h)
    }

    /// Record the forward pass on a tape. When `trainable` is true the
    /// parameters enter as gradient leaves (ordered w0, b0, w1, b1, ...,
    /// matching [`Mlp::apply_grads`]); otherwise they enter as constants and
    /// the backward sweep never touches them.
    pub fn build_forward(
        &self,
        tape: &mut Tape<F>,
        x: NodeId,
        trainable: bool,
    ) -> (NodeId, Vec<NodeId>) {
        let mut param_ids = Vec::with_capacity(self.layer_count() * 2);
        let last = self.layer_count() - 1;
        let mut h = x;
        for l in 0..=last {
            let (w, b) = if trainable {
                (tape.leaf(self.weights[l].clone()), tape.leaf(self.biases[l].clone()))
            } else {
                (tape.constant(self.weights[l].clone()), tape.constant(self.biases[l].clone()))
            };
            param_ids.push(w);
            param_ids.push(b);
            h = tape.affine(h, w, b);
            if l < last {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Gelu => tape.gelu(h),
                };
            }
        }
        (h, param_ids)
    }

    /// Parameters in the canonical flat order w0, b0, w1, b1, ...
    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::with_capacity(self.layer_count() * 2);
        for l in 0..self.layer_count() {
            out.push(&self.weights[l]);
            out.push(&self.biases[l]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Collect gradients off a tape in canonical parameter order.
    pub fn collect_grads(
        &self,
        grads: &mut crate::autodiff::Gradients<F>,
        param_ids: &[NodeId],
    ) -> Vec<Tensor<F>> {
        param_ids
            .iter()
            .enumerate()
            .map(|(k, id)| {
                let (rows, cols) = if k % 2 == 0 {
                    self.weights[k / 2].shape()
                } else {
                    self.biases[k / 2].shape()
                };
                grads.take_or_zeros(*id, rows, cols)
            })
            .collect()
    }

    /// Checkpoint arrays in canonical order: weights rank-2, biases rank-1.
    pub fn to_arrays(&self) -> Vec<ParamArray> {
        let mut out = Vec::new();
        for l in 0..self.layer_count() {
            let w = &self.weights[l];
            out.push(ParamArray {
                dims: vec![w.rows(), w.cols()],
                data: w.data().iter().map(|v| v.as_f64() as f32).collect(),
            });
            let b = &self.biases[l];
            out.push(ParamArray {
                dims: vec![b.cols()],
                data: b.data().iter().map(|v| v.as_f64() as f32).collect(),
            });
        }
        out
    }

    pub fn from_arrays(spec: MlpSpec, arrays: &[ParamArray]) -> Result<Self> {
        let dims = spec.layer_dims();
        if arrays.len() != dims.len() * 2 {
            return Err(LpsError::InvalidArgument(format!(
                "expected {} arrays for mlp, got {}",
                dims.len() * 2,
                arrays.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (fan_in, fan_out)) in dims.iter().enumerate() {
            let wa = &arrays[2 * l];
            let ba = &arrays[2 * l + 1];
            if wa.dims != vec![*fan_out, *fan_in] || ba.dims != vec![*fan_out] {
                return Err(LpsError::InvalidArgument(format!(
                    "layer {l} checkpoint dims {:?}/{:?} do not match spec ({fan_out}x{fan_in})",
                    wa.dims, ba.dims
                )));
            }
            weights.push(Tensor::from_vec(
                *fan_out,
                *fan_in,
                wa.data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            ));
            biases.push(Tensor::from_vec(
                1,
                *fan_out,
                ba.data.iter().map(|&v| F::from_f64(v as f64)).collect(),
            ));
        }
        Ok(Mlp { spec, weights, biases })
    }
}

// ---------------------------------------------------------------------------
// optimization

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Tensor<F>]) -> Self {
        let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, &shapes)
    }

    /// One bias-corrected Adam step. On a non-finite gradient the state and
    /// parameters are left untouched and an error is returned.
    pub fn apply(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(LpsError::InvalidArgument(format!(
                "adam: {} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for g in grads {
            g.ensure_finite("adam gradient")?;
        }
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam: param/grad shape mismatch");
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = b1 * m.data()[k] + (one - b1) * gk;
                let vk = b2 * v.data()[k] + (one - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / corr1;
                let vhat = vk / corr2;
                p.data_mut()[k] = p.data()[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moment_arrays(&self) -> Vec<ParamArray> {
        self.m
            .iter()
            .chain(self.v.iter())
            .map(|t| ParamArray {
                dims: vec![t.rows(), t.cols()],
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    pub fn restore_moments(&mut self, arrays: &[ParamArray], step: u64) -> Result<()> {
        if arrays.len() != 2 * self.m.len() {
            return Err(LpsError::InvalidArgument(format!(
                "adam restore: {} arrays for {} slots",
                arrays.len(),
                self.m.len()
            )));
        }
        for (i, slot) in self.m.iter_mut().chain(self.v.iter_mut()).enumerate() {
            let a = &arrays[i];
            if a.dims != vec![slot.rows(), slot.cols()] {
                return Err(LpsError::InvalidArgument(format!(
                    "adam restore: moment {} dims {:?} != {:?}",
                    i,
                    a.dims,
                    slot.shape()
                )));
            }
            for (dst, src) in slot.data_mut().iter_mut().zip(&a.data) {
                *dst = F::from_f64(*src as f64);
            }
        }
        self.step = step;
        Ok(())
    }
}

/// target <- (1 - tau) * target + tau * online
pub fn polyak_update<F: Real>(targets: &mut [&mut Tensor<F>], online: &[&Tensor<F>], tau: f64) {
    assert_eq!(targets.len(), online.len(), "polyak: set size mismatch");
    let t = F::from_f64(tau);
    let keep = F::one() - t;
    for (dst, src) in targets.iter_mut().zip(online) {
        assert_eq!(dst.shape(), src.shape(), "polyak: shape mismatch");
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = keep * *d + t * *s;
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoint format
//
// Parameter files: magic "LPSW", u32 version, u32 array count, then per
// array u32 rank, u32 dims..., f32 data. All little-endian.

pub const PARAM_MAGIC: &[u8; 4] = b"LPSW";
pub const PARAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_params_to<W: Write>(w: &mut W, arrays: &[ParamArray]) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_all(&PARAM_VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let expect: usize = a.dims.iter().product();
        assert_eq!(expect, a.data.len(), "param array dims/data mismatch");
        w.write_all(&(a.dims.len() as u32).to_le_bytes())?;
        for d in &a.dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params_from<R: Read>(r: &mut R, path: &str) -> Result<Vec<ParamArray>> {
    let bad = |reason: String| LpsError::Format { path: path.to_string(), reason };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header".into()))?;
    if &magic != PARAM_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(|_| bad("truncated version".into()))?;
    if version != PARAM_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(r).map_err(|_| bad("truncated count".into()))?;
    let mut arrays = Vec::with_capacity(count as usize);
    for i in 0..count {
        let rank = read_u32(r).map_err(|_| bad(format!("truncated rank of array {i}")))?;
        if rank > 8 {
            return Err(bad(format!("array {i} rank {rank} too large")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut total: usize = 1;
        for _ in 0..rank {
            let d = read_u32(r).map_err(|_| bad(format!("truncated dims of array {i}")))? as usize;
            total = total
                .checked_mul(d)
                .ok_or_else(|| bad(format!("array {i} dim overflow")))?;
            dims.push(d);
        }
        if total > (1 << 30) {
            return Err(bad(format!("array {i} too large ({total} elements)")));
        }
        let mut data = vec![0f32; total];
        let mut buf = vec![0u8; total * 4];
        r.read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated data of array {i}")))?;
        for (k, chunk) in buf.chunks_exact(4).enumerate() {
            data[k] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        arrays.push(ParamArray { dims, data });
    }
    Ok(arrays)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_params(path: &Path, arrays: &[ParamArray]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params_to(&mut f, arrays)
}

pub fn load_params(path: &Path) -> Result<Vec<ParamArray>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_params_from(&mut f, &path.display().to_string())
}
