//! Minimal tape autodiff over batched 2-D tensors.
//!
//! Two derivative modes share one recorded graph:
//!
//! * reverse mode ([`Tape::backward`]) for parameter gradients of scalar
//!   losses, and
//! * a forward tangent sweep ([`Tape::forward_tangent`]) for
//!   Jacobian-vector products with respect to chosen nodes, used by the
//!   average-velocity training target where the JVP result enters the loss
//!   as a stop-gradient constant.
//!
//! The primitive set is deliberately small: affine maps, pointwise
//! activations, arithmetic, square/abs, full sums, column concatenation,
//! row-wise sphere projection, elementwise min, and stop-gradient. Every
//! loss in the crate is expressible in these, and each primitive carries a
//! hand-derived VJP and JVP that are cross-checked against central finite
//! differences in the tests.

use crate::error::{LpsError, Result};
use crate::tensor::{dot, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    /// Input node; `true` means gradients are tracked (parameter or probed
    /// input), `false` means constant.
    Leaf(bool),
    /// x[B,i] * w[o,i]^T + b[1,o]
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Abs(NodeId),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    StopGrad,
    /// Row-wise projection x -> radius * x / |x|.
    ProjectRows(NodeId, f64),
    MinElem(NodeId, NodeId),
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

pub struct Gradients<F> {
    by_node: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, materializing zeros of the given shape when the
    /// node was never reached by the backward sweep.
    pub fn take_or_zeros(&mut self, id: NodeId, rows: usize, cols: usize) -> Tensor<F> {
        self.by_node[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

// ---------------------------------------------------------------------------
// pointwise kernels

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// y[B,o] = x[B,i] * w[o,i]^T + b[1,o]
pub fn affine_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (n, in_dim) = x.shape();
    let (out_dim, w_in) = w.shape();
    assert_eq!(in_dim, w_in, "affine: input dim mismatch");
    assert_eq!(b.shape(), (1, out_dim), "affine: bias shape mismatch");
    let mut y = Tensor::zeros(n, out_dim);
    for r in 0..n {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..out_dim {
            yr[o] = b.data()[o] + dot(xr, w.row(o));
        }
    }
    y
}

/// x tangent half of the affine JVP: xt[B,i] * w[o,i]^T (no bias).
fn matmul_nt<F: Real>(x: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    let (n, in_dim) = x.shape();
    let (out_dim, w_in) = w.shape();
    assert_eq!(in_dim, w_in);
    let mut y = Tensor::zeros(n, out_dim);
    for r in 0..n {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..out_dim {
            yr[o] = dot(xr, w.row(o));
        }
    }
    y
}

fn project_rows_forward<F: Real>(x: &Tensor<F>, radius: f64) -> Result<Tensor<F>> {
    let mut y = x.clone();
    let r = F::from_f64(radius);
    for i in 0..x.rows() {
        let n = crate::tensor::l2_norm(x.row(i));
        if n.as_f64() < 1e-12 {
            return Err(LpsError::DegenerateNorm { norm: n.as_f64(), threshold: 1e-12 });
        }
        let s = r / n;
        for v in y.row_mut(i) {
            *v = *v * s;
        }
    }
    Ok(y)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf(g) => *g,
            Op::StopGrad => false,
            Op::Affine { x, w, b } => {
                self.needs(*x) || self.needs(*w) || self.needs(*b)
            }
            Op::Relu(x)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Scale(x, _)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::SumAll(x)
            | Op::ProjectRows(x, _) => self.needs(*x),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MinElem(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::ConcatCols(parts) => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf(true), value)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf(false), value)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let value = affine_forward(self.value(x), self.value(w), self.value(b));
        self.push(Op::Affine { x, w, b }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(Op::Relu(x), value)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_scalar);
        self.push(Op::Gelu(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scale(F::from_f64(c));
        self.push(Op::Scale(x, c), value)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.abs());
        self.push(Op::Abs(x), value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll(x), value)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::hcat(&tensors);
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value)
    }

    pub fn project_rows(&mut self, x: NodeId, radius: f64) -> Result<NodeId> {
        let value = project_rows_forward(self.value(x), radius)?;
        Ok(self.push(Op::ProjectRows(x, radius), value))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| if x <= y { x } else { y });
        self.push(Op::MinElem(a, b), value)
    }

    /// Reverse sweep from a scalar loss. Errors on non-scalar targets and on
    /// non-finite values anywhere in the recorded forward pass.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(LpsError::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(LpsError::NonFinite {
                    context: format!("forward pass node {i} ({:?})", kind_name(&node.op)),
                });
            }
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let (n, out_dim) = g.shape();
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let in_dim = xv.cols();
                    if self.needs(*x) {
                        let gx = grads[x.0].get_or_insert_with(|| Tensor::zeros(n, in_dim));
                        for r in 0..n {
                            let gr = g.row(r);
                            let gxr = gx.row_mut(r);
                            for o in 0..out_dim {
                                let c = gr[o];
                                let wr = wv.row(o);
                                for k in 0..in_dim {
                                    gxr[k] = gxr[k] + c * wr[k];
                                }
                            }
                        }
                    }
                    if self.needs(*w) {
                        let gw = grads[w.0].get_or_insert_with(|| Tensor::zeros(out_dim, in_dim));
                        for r in 0..n {
                            let gr = g.row(r);
                            let xr = xv.row(r);
                            for o in 0..out_dim {
                                let c = gr[o];
                                let gwr = gw.row_mut(o);
                                for k in 0..in_dim {
                                    gwr[k] = gwr[k] + c * xr[k];
                                }
                            }
                        }
                    }
                    if self.needs(*b) {
                        let gb = grads[b.0].get_or_insert_with(|| Tensor::zeros(1, out_dim));
                        let gbr = gb.row_mut(0);
                        for r in 0..n {
                            let gr = g.row(r);
                            for o in 0..out_dim {
                                gbr[o] = gbr[o] + gr[o];
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = xv.zip_map(&g, |xi, gi| if xi > F::zero() { gi } else { F::zero() });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = xv.zip_map(&g, |xi, gi| gelu_grad_scalar(xi) * gi);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let yv = &self.nodes[i].value;
                    let gx = yv.zip_map(&g, |yi, gi| (F::one() - yi * yi) * gi);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.scale(-F::one()));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.hadamard(&self.nodes[b.0].value));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.hadamard(&self.nodes[a.0].value));
                    }
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.scale(F::from_f64(*c)));
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.0].value;
                    let two = F::from_f64(2.0);
                    let gx = xv.zip_map(&g, |xi, gi| two * xi * gi);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx = xv.zip_map(&g, |xi, gi| {
                        if xi > F::zero() {
                            gi
                        } else if xi < F::zero() {
                            -gi
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let xv = &self.nodes[x.0].value;
                    let gi = g.item();
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), gi));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let (rows, cols) = pv.shape();
                        if self.needs(*p) {
                            let mut gp = Tensor::zeros(rows, cols);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            accumulate(&mut grads, *p, gp);
                        }
                        offset += cols;
                    }
                }
                Op::StopGrad => unreachable!("stop-gradient never needs grad"),
                Op::ProjectRows(x, radius) => {
                    let xv = &self.nodes[x.0].value;
                    let r = F::from_f64(*radius);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for row in 0..xv.rows() {
                        let xr = xv.row(row);
                        let gr = g.row(row);
                        let n = crate::tensor::l2_norm(xr);
                        let n2 = n * n;
                        let xg = dot(xr, gr);
                        let s = r / n;
                        let gxr = gx.row_mut(row);
                        for k in 0..xr.len() {
                            gxr[k] = s * (gr[k] - xr[k] * xg / n2);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MinElem(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.needs(*a) {
                        let ga = av.zip_map(bv, |x, y| if x <= y { F::one() } else { F::zero() });
                        accumulate(&mut grads, *a, ga.hadamard(&g));
                    }
                    if self.needs(*b) {
                        let gb = av.zip_map(bv, |x, y| if x <= y { F::zero() } else { F::one() });
                        accumulate(&mut grads, *b, gb.hadamard(&g));
                    }
                }
            }
            grads[i] = None; // interior grad no longer needed
        }

        // restore leaf grads dropped by the loop epilogue
        let by_node = {
            let mut out: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
            for (i, node) in self.nodes.iter().enumerate() {
                if matches!(node.op, Op::Leaf(true)) {
                    out[i] = grads[i].take();
                }
            }
            out
        };
        Ok(Gradients { by_node })
    }

    /// Forward tangent sweep: propagate directional derivatives seeded at
    /// arbitrary nodes up to `target`, treating every unseeded leaf as
    /// constant. Stop-gradient blocks tangents exactly as it blocks
    /// gradients.
    pub fn forward_tangent(&self, seeds: &[(NodeId, Tensor<F>)], target: NodeId) -> Tensor<F> {
        let mut tangents: Vec<Option<Tensor<F>>> = vec![None; target.0 + 1];
        for (id, t) in seeds {
            assert_eq!(
                t.shape(),
                self.nodes[id.0].value.shape(),
                "tangent seed shape mismatch"
            );
            assert!(id.0 <= target.0, "seed comes after target");
            tangents[id.0] = Some(t.clone());
        }
        for i in 0..=target.0 {
            let existing_seed = matches!(self.nodes[i].op, Op::Leaf(_));
            if existing_seed {
                continue; // leaf tangent is the seed (or None)
            }
            let t = match &self.nodes[i].op {
                Op::Leaf(_) => unreachable!(),
                Op::Affine { x, w, b } => {
                    let mut acc: Option<Tensor<F>> = None;
                    if let Some(xt) = &tangents[x.0] {
                        acc = Some(matmul_nt(xt, &self.nodes[w.0].value));
                    }
                    if let Some(wt) = &tangents[w.0] {
                        let part = matmul_nt(&self.nodes[x.0].value, wt);
                        acc = Some(match acc {
                            Some(a) => a.add(&part),
                            None => part,
                        });
                    }
                    if let Some(bt) = &tangents[b.0] {
                        let rows = self.nodes[x.0].value.rows();
                        let mut part = Tensor::zeros(rows, bt.cols());
                        for r in 0..rows {
                            part.row_mut(r).copy_from_slice(bt.row(0));
                        }
                        acc = Some(match acc {
                            Some(a) => a.add(&part),
                            None => part,
                        });
                    }
                    acc
                }
                Op::Relu(x) => tangents[x.0].as_ref().map(|xt| {
                    self.nodes[x.0]
                        .value
                        .zip_map(xt, |xi, ti| if xi > F::zero() { ti } else { F::zero() })
                }),
                Op::Gelu(x) => tangents[x.0].as_ref().map(|xt| {
                    self.nodes[x.0].value.zip_map(xt, |xi, ti| gelu_grad_scalar(xi) * ti)
                }),
                Op::Tanh(x) => tangents[x.0].as_ref().map(|xt| {
                    self.nodes[i].value.zip_map(xt, |yi, ti| (F::one() - yi * yi) * ti)
                }),
                Op::Add(a, b) => match (&tangents[a.0], &tangents[b.0]) {
                    (Some(ta), Some(tb)) => Some(ta.add(tb)),
                    (Some(ta), None) => Some(ta.clone()),
                    (None, Some(tb)) => Some(tb.clone()),
                    (None, None) => None,
                },
                Op::Sub(a, b) => match (&tangents[a.0], &tangents[b.0]) {
                    (Some(ta), Some(tb)) => Some(ta.sub(tb)),
                    (Some(ta), None) => Some(ta.clone()),
                    (None, Some(tb)) => Some(tb.scale(-F::one())),
                    (None, None) => None,
                },
                Op::Mul(a, b) => {
                    let mut acc: Option<Tensor<F>> = None;
                    if let Some(ta) = &tangents[a.0] {
                        acc = Some(ta.hadamard(&self.nodes[b.0].value));
                    }
                    if let Some(tb) = &tangents[b.0] {
                        let part = tb.hadamard(&self.nodes[a.0].value);
                        acc = Some(match acc {
                            Some(a) => a.add(&part),
                            None => part,
                        });
                    }
                    acc
                }
                Op::Scale(x, c) => {
                    tangents[x.0].as_ref().map(|xt| xt.scale(F::from_f64(*c)))
                }
                Op::Square(x) => tangents[x.0].as_ref().map(|xt| {
                    let two = F::from_f64(2.0);
                    self.nodes[x.0].value.zip_map(xt, |xi, ti| two * xi * ti)
                }),
                Op::Abs(x) => tangents[x.0].as_ref().map(|xt| {
                    self.nodes[x.0].value.zip_map(xt, |xi, ti| {
                        if xi > F::zero() {
                            ti
                        } else if xi < F::zero() {
                            -ti
                        } else {
                            F::zero()
                        }
                    })
                }),
                Op::SumAll(x) => tangents[x.0].as_ref().map(|xt| Tensor::scalar(xt.sum())),
                Op::ConcatCols(parts) => {
                    if parts.iter().all(|p| tangents[p.0].is_none()) {
                        None
                    } else {
                        let mats: Vec<Tensor<F>> = parts
                            .iter()
                            .map(|p| {
                                let v = &self.nodes[p.0].value;
                                tangents[p.0]
                                    .clone()
                                    .unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols()))
                            })
                            .collect();
                        let refs: Vec<&Tensor<F>> = mats.iter().collect();
                        Some(Tensor::hcat(&refs))
                    }
                }
                Op::StopGrad => None,
                Op::ProjectRows(x, radius) => tangents[x.0].as_ref().map(|xt| {
                    let xv = &self.nodes[x.0].value;
                    let r = F::from_f64(*radius);
                    let mut out = Tensor::zeros(xv.rows(), xv.cols());
                    for row in 0..xv.rows() {
                        let xr = xv.row(row);
                        let tr = xt.row(row);
                        let n = crate::tensor::l2_norm(xr);
                        let n2 = n * n;
                        let xt_dot = dot(xr, tr);
                        let s = r / n;
                        let or = out.row_mut(row);
                        for k in 0..xr.len() {
                            or[k] = s * (tr[k] - xr[k] * xt_dot / n2);
                        }
                    }
                    out
                }),
                Op::MinElem(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let zeros_a = Tensor::zeros(av.rows(), av.cols());
                    let ta = tangents[a.0].as_ref().unwrap_or(&zeros_a);
                    let tb = tangents[b.0].as_ref().unwrap_or(&zeros_a);
                    if tangents[a.0].is_none() && tangents[b.0].is_none() {
                        None
                    } else {
                        let mut out = Tensor::zeros(av.rows(), av.cols());
                        for idx in 0..av.len() {
                            out.data_mut()[idx] = if av.data()[idx] <= bv.data()[idx] {
                                ta.data()[idx]
                            } else {
                                tb.data()[idx]
                            };
                        }
                        Some(out)
                    }
                }
            };
            tangents[i] = t;
        }
        let out_shape = self.nodes[target.0].value.shape();
        tangents[target.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(out_shape.0, out_shape.1))
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn kind_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf(true) => "leaf",
        Op::Leaf(false) => "const",
        Op::Affine { .. } => "affine",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::Tanh(_) => "tanh",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Square(_) => "square",
        Op::Abs(_) => "abs",
        Op::SumAll(_) => "sum",
        Op::ConcatCols(_) => "concat",
        Op::StopGrad => "stop_gradient",
        Op::ProjectRows(..) => "project_rows",
        Op::MinElem(..) => "min",
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

// ---------------------------------------------------------------------------
// program-level entry points

/// A differentiable computation: builds a graph from parameter and input
/// nodes and returns the output node.
pub type ProgramFn<F> = dyn Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId>;

/// Loss and exact parameter gradients of a scalar-valued program.
pub fn reverse_grad<F: Real>(
    program: impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId>,
    params: &[Tensor<F>],
    inputs: &[Tensor<F>],
) -> Result<(F, Vec<Tensor<F>>)> {
    let mut tape = Tape::new();
    let p_ids: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let i_ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program(&mut tape, &p_ids, &i_ids)?;
    let (rows, cols) = tape.value(out).shape();
    if (rows, cols) != (1, 1) {
        return Err(LpsError::NonScalarLoss { rows, cols });
    }
    let loss = tape.value(out).item();
    let mut grads = tape.backward(out)?;
    let out_grads = p_ids
        .iter()
        .zip(params)
        .map(|(id, p)| grads.take_or_zeros(*id, p.rows(), p.cols()))
        .collect();
    Ok((loss, out_grads))
}

/// Primal output and Jacobian-vector product of a program with respect to
/// its inputs (parameters held constant).
pub fn jvp<F: Real>(
    program: impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId>,
    params: &[Tensor<F>],
    inputs: &[Tensor<F>],
    tangents: &[Tensor<F>],
) -> Result<(Tensor<F>, Tensor<F>)> {
    if tangents.len() != inputs.len() {
        return Err(LpsError::InvalidArgument(format!(
            "jvp: {} tangents for {} inputs",
            tangents.len(),
            inputs.len()
        )));
    }
    for (t, x) in tangents.iter().zip(inputs) {
        if t.shape() != x.shape() {
            return Err(LpsError::ShapeMismatch {
                context: "jvp tangent",
                expected: format!("{:?}", x.shape()),
                got: format!("{:?}", t.shape()),
            });
        }
    }
    let mut tape = Tape::new();
    let p_ids: Vec<NodeId> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let i_ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program(&mut tape, &p_ids, &i_ids)?;
    let seeds: Vec<(NodeId, Tensor<F>)> = i_ids
        .iter()
        .zip(tangents)
        .map(|(id, t)| (*id, t.clone()))
        .collect();
    let tangent_out = tape.forward_tangent(&seeds, out);
    Ok((tape.value(out).clone(), tangent_out))
}

/// Evaluate a program without any derivative bookkeeping.
pub fn eval_program<F: Real>(
    program: impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId>,
    params: &[Tensor<F>],
    inputs: &[Tensor<F>],
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let p_ids: Vec<NodeId> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let i_ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = program(&mut tape, &p_ids, &i_ids)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdMode {
    /// Check reverse-mode parameter gradients of a scalar program.
    Grad,
    /// Check the forward-mode directional derivative along a fixed random
    /// tangent of the inputs.
    Jvp,
}

pub const FD_DEFAULT_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst-case relative discrepancy between analytic derivatives and central
/// finite differences (step `step`). Run this at f64: the 1e-4 budgets used
/// in the tests assume 64-bit headroom.
pub fn finite_diff_check<F: Real>(
    program: impl Fn(&mut Tape<F>, &[NodeId], &[NodeId]) -> Result<NodeId> + Copy,
    params: &[Tensor<F>],
    inputs: &[Tensor<F>],
    mode: FdMode,
    step: f64,
) -> Result<f64> {
    let h = F::from_f64(step);
    let two_h = F::from_f64(2.0 * step);
    match mode {
        FdMode::Grad => {
            let (_, grads) = reverse_grad(program, params, inputs)?;
            let mut worst = 0.0f64;
            let mut work: Vec<Tensor<F>> = params.to_vec();
            for (pi, grad) in grads.iter().enumerate() {
                for k in 0..work[pi].len() {
                    let orig = work[pi].data()[k];
                    work[pi].data_mut()[k] = orig + h;
                    let plus = eval_program(program, &work, inputs)?.item();
                    work[pi].data_mut()[k] = orig - h;
                    let minus = eval_program(program, &work, inputs)?.item();
                    work[pi].data_mut()[k] = orig;
                    let numeric = ((plus - minus) / two_h).as_f64();
                    worst = worst.max(rel_err(grad.data()[k].as_f64(), numeric));
                }
            }
            Ok(worst)
        }
        FdMode::Jvp => {
            let mut tangent_rng = crate::rng::stream(0xFD_5EED, 0);
            let tangents: Vec<Tensor<F>> = inputs
                .iter()
                .map(|x| crate::rng::standard_normal_tensor(&mut tangent_rng, x.rows(), x.cols()))
                .collect();
            let (_, analytic) = jvp(program, params, inputs, &tangents)?;
            let shift = |dir: F| -> Vec<Tensor<F>> {
                inputs
                    .iter()
                    .zip(&tangents)
                    .map(|(x, t)| {
                        let mut y = x.clone();
                        y.axpy(dir, t);
                        y
                    })
                    .collect()
            };
            let plus = eval_program(program, params, &shift(h))?;
            let minus = eval_program(program, params, &shift(-h))?;
            let mut worst = 0.0f64;
            for k in 0..analytic.len() {
                let numeric = ((plus.data()[k] - minus.data()[k]) / two_h).as_f64();
                worst = worst.max(rel_err(analytic.data()[k].as_f64(), numeric));
            }
            Ok(worst)
        }
    }
}
