//! Minimal reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records matrix operations during the forward pass; calling
//! [`Tape::backward`] on a scalar (1x1) node walks the recorded nodes in
//! reverse, accumulating vector-Jacobian products into per-node gradients.
//! The op set is exactly what the composition encoder and the contrastive
//! losses need, no more.

use std::sync::Arc;

use crate::mat::{dot, matmul, matmul_ta, matmul_tb, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct Node {
    value: Arc<Mat>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// a (m x k) * b (k x n)
    MatMul(TensorId, TensorId),
    /// elementwise, same shape
    Add(TensorId, TensorId),
    /// x (m x n) + bias (1 x n) broadcast over rows
    AddBias(TensorId, TensorId),
    ConcatRows(TensorId, TensorId),
    LayerNorm {
        x: TensorId,
        scale: TensorId,
        shift: TensorId,
        /// normalized activations, per-row reciprocal std
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(TensorId),
    /// rows of `table` gathered by index
    Embed {
        table: TensorId,
        ids: Vec<usize>,
    },
    /// multi-head scaled dot-product attention over already-projected q/k/v
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        /// per-head row-softmax attention weights
        attn: Vec<Mat>,
    },
    /// mean over rows of `a` of the max cosine similarity against rows of `b`
    MaxSim {
        a: TensorId,
        b: TensorId,
        argmax: Vec<usize>,
        a_norms: Vec<f64>,
        b_norms: Vec<f64>,
        cos: Vec<f64>,
    },
    /// InfoNCE negative log-likelihood with diagonal positives
    InfoNce {
        scores: TensorId,
        tau: f64,
        softmax: Mat,
    },
    /// rows x cols matrix assembled from scalar (1x1) nodes, row-major
    FromScalars {
        ids: Vec<TensorId>,
    },
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable InfoNCE core shared by the tape op and the public
/// loss evaluation: returns the loss and the row-softmax of `s / tau`.
pub(crate) fn info_nce_core(s: &Mat, tau: f64) -> (f64, Mat) {
    let n = s.rows();
    debug_assert_eq!(n, s.cols());
    let mut softmax = Mat::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v / tau - max).exp();
            *softmax.at_mut(i, j) = e;
            denom += e;
        }
        softmax.row_mut(i).iter_mut().for_each(|p| *p /= denom);
        // log p_ii = s_ii/tau - max - ln(denom)
        loss -= s.at(i, i) / tau - max - denom.ln();
    }
    (loss / n as f64, softmax)
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat, needs_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value: Arc::new(value),
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, value: Arc<Mat>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> TensorId {
        self.leaf(Arc::new(value), false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()));
        let mut v = va.clone();
        v.add_assign(vb);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vb.rows(), 1);
        assert_eq!(vx.cols(), vb.cols());
        let mut v = vx.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(vb.row(0)) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(v, ng, Op::AddBias(x, bias))
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols());
        let mut data = Vec::with_capacity((va.rows() + vb.rows()) * va.cols());
        data.extend_from_slice(va.as_slice());
        data.extend_from_slice(vb.as_slice());
        let v = Mat::from_vec(va.rows() + vb.rows(), va.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::ConcatRows(a, b))
    }

    pub fn layer_norm(&mut self, x: TensorId, scale: TensorId, shift: TensorId, eps: f64) -> TensorId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        let g = self.value(scale);
        let b = self.value(shift);
        assert_eq!((g.rows(), g.cols()), (1, cols));
        assert_eq!((b.rows(), b.cols()), (1, cols));
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            for j in 0..cols {
                let xh = (row[j] - mean) * s;
                *xhat.at_mut(i, j) = xh;
                *out.at_mut(i, j) = xh * g.at(0, j) + b.at(0, j);
            }
        }
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(
            out,
            ng,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let vx = self.value(x);
        let mut v = vx.clone();
        v.as_mut_slice().iter_mut().for_each(|e| *e = gelu(*e));
        let ng = self.needs(x);
        self.push(v, ng, Op::Gelu(x))
    }

    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        self.push(
            v,
            ng,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `m x d`, `k` and `v`
    /// are `n x d`; `heads` must divide `d`. Output is `m x d`.
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> TensorId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        assert_eq!(d % heads, 0, "heads must divide model dim");
        assert_eq!(vk.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(vk.rows(), vv.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(vq.rows(), d);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = vq.col_band(h * dh, dh);
            let kh = vk.col_band(h * dh, dh);
            let vh = vv.col_band(h * dh, dh);
            let mut s = matmul_tb(&qh, &kh);
            s.scale(scale);
            // row softmax
            for i in 0..s.rows() {
                let row = s.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    denom += *e;
                }
                row.iter_mut().for_each(|e| *e /= denom);
            }
            let oh = matmul(&s, &vh);
            out.set_col_band(h * dh, &oh);
            attn.push(s);
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, ng, Op::Attention { q, k, v, heads, attn })
    }

    /// Mean over rows of `a` of the maximum cosine similarity against rows
    /// of `b`. Ties take the first index. Output is scalar (1x1).
    pub fn maxsim(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols());
        assert!(va.rows() >= 1 && vb.rows() >= 1);
        let a_norms: Vec<f64> = (0..va.rows()).map(|i| dot(va.row(i), va.row(i)).sqrt()).collect();
        let b_norms: Vec<f64> = (0..vb.rows()).map(|r| dot(vb.row(r), vb.row(r)).sqrt()).collect();
        let mut argmax = Vec::with_capacity(va.rows());
        let mut cos = Vec::with_capacity(va.rows());
        let mut total = 0.0;
        for z in 0..va.rows() {
            let mut best = f64::NEG_INFINITY;
            let mut best_r = 0;
            for r in 0..vb.rows() {
                let c = dot(va.row(z), vb.row(r)) / (a_norms[z] * b_norms[r]);
                if c > best {
                    best = c;
                    best_r = r;
                }
            }
            argmax.push(best_r);
            cos.push(best);
            total += best;
        }
        let v = Mat::from_vec(1, 1, vec![total / va.rows() as f64]);
        let ng = self.needs(a) || self.needs(b);
        self.push(
            v,
            ng,
            Op::MaxSim {
                a,
                b,
                argmax,
                a_norms,
                b_norms,
                cos,
            },
        )
    }

    /// InfoNCE over a square score matrix with positives on the diagonal.
    /// Output is scalar (1x1).
    pub fn info_nce(&mut self, scores: TensorId, tau: f64) -> TensorId {
        let s = self.value(scores);
        assert_eq!(s.rows(), s.cols());
        assert!(s.rows() >= 2);
        assert!(tau > 0.0);
        let (loss, softmax) = info_nce_core(s, tau);
        let v = Mat::from_vec(1, 1, vec![loss]);
        let ng = self.needs(scores);
        self.push(v, ng, Op::InfoNce { scores, tau, softmax })
    }

    /// Assembles a matrix from scalar nodes in row-major order.
    pub fn from_scalars(&mut self, rows: usize, cols: usize, ids: &[TensorId]) -> TensorId {
        assert_eq!(ids.len(), rows * cols);
        let mut data = Vec::with_capacity(ids.len());
        let mut ng = false;
        for &id in ids {
            let v = self.value(id);
            assert_eq!((v.rows(), v.cols()), (1, 1));
            data.push(v.at(0, 0));
            ng |= self.needs(id);
        }
        let v = Mat::from_vec(rows, cols, data);
        self.push(v, ng, Op::FromScalars { ids: ids.to_vec() })
    }

    /// Reverse pass from a scalar root. Gradients flow only into nodes with
    /// a parameter somewhere upstream; constants are skipped.
    pub fn backward(&self, root: TensorId) -> Gradients {
        let rv = self.value(root);
        assert_eq!((rv.rows(), rv.cols()), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let da = matmul_tb(&dy, vb);
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let db = matmul_ta(va, &dy);
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, dy.clone());
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*bias) {
                        let mut db = Mat::zeros(1, dy.cols());
                        for i in 0..dy.rows() {
                            for (o, &g) in db.row_mut(0).iter_mut().zip(dy.row(i)) {
                                *o += g;
                            }
                        }
                        accumulate(&mut grads, bias.0, db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, x.0, dy);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).rows();
                    if self.needs(*a) {
                        let mut da = Mat::zeros(ra, dy.cols());
                        for i in 0..ra {
                            da.row_mut(i).copy_from_slice(dy.row(i));
                        }
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let rb = dy.rows() - ra;
                        let mut db = Mat::zeros(rb, dy.cols());
                        for i in 0..rb {
                            db.row_mut(i).copy_from_slice(dy.row(ra + i));
                        }
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::LayerNorm {
                    x,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*scale);
                    let cols = dy.cols();
                    if self.needs(*shift) {
                        let mut db = Mat::zeros(1, cols);
                        for i in 0..dy.rows() {
                            for (o, &d) in db.row_mut(0).iter_mut().zip(dy.row(i)) {
                                *o += d;
                            }
                        }
                        accumulate(&mut grads, shift.0, db);
                    }
                    if self.needs(*scale) {
                        let mut dg = Mat::zeros(1, cols);
                        for i in 0..dy.rows() {
                            for j in 0..cols {
                                *dg.at_mut(0, j) += dy.at(i, j) * xhat.at(i, j);
                            }
                        }
                        accumulate(&mut grads, scale.0, dg);
                    }
                    if self.needs(*x) {
                        let mut dx = Mat::zeros(dy.rows(), cols);
                        for i in 0..dy.rows() {
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..cols {
                                let dxh = dy.at(i, j) * g.at(0, j);
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat.at(i, j);
                            }
                            mean_dxh /= cols as f64;
                            mean_dxh_xh /= cols as f64;
                            for j in 0..cols {
                                let dxh = dy.at(i, j) * g.at(0, j);
                                *dx.at_mut(i, j) =
                                    inv_std[i] * (dxh - mean_dxh - xhat.at(i, j) * mean_dxh_xh);
                            }
                        }
                        accumulate(&mut grads, x.0, dx);
                    }
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut dx = dy;
                    for (d, &xv) in dx.as_mut_slice().iter_mut().zip(vx.as_slice()) {
                        *d *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let slot = grads[table.0].get_or_insert_with(|| Mat::zeros(t.rows(), t.cols()));
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &d) in slot.row_mut(id).iter_mut().zip(dy.row(i)) {
                            *o += d;
                        }
                    }
                }
                Op::Attention { q, k, v, heads, attn } => {
                    let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = vq.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(vq.rows(), d);
                    let mut dk = Mat::zeros(vk.rows(), d);
                    let mut dv = Mat::zeros(vv.rows(), d);
                    for h in 0..*heads {
                        let a = &attn[h];
                        let qh = vq.col_band(h * dh, dh);
                        let kh = vk.col_band(h * dh, dh);
                        let vh = vv.col_band(h * dh, dh);
                        let doh = dy.col_band(h * dh, dh);
                        let da = matmul_tb(&doh, &vh);
                        let dvh = matmul_ta(a, &doh);
                        // softmax backward, per row
                        let mut ds = Mat::zeros(a.rows(), a.cols());
                        for i in 0..a.rows() {
                            let inner = dot(da.row(i), a.row(i));
                            for j in 0..a.cols() {
                                *ds.at_mut(i, j) = a.at(i, j) * (da.at(i, j) - inner) * scale;
                            }
                        }
                        let dqh = matmul(&ds, &kh);
                        let dkh = matmul_ta(&ds, &qh);
                        dq.add_col_band(h * dh, &dqh);
                        dk.add_col_band(h * dh, &dkh);
                        dv.add_col_band(h * dh, &dvh);
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, q.0, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, k.0, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, v.0, dv);
                    }
                }
                Op::MaxSim {
                    a,
                    b,
                    argmax,
                    a_norms,
                    b_norms,
                    cos,
                } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let coef = dy.at(0, 0) / va.rows() as f64;
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    let mut db = Mat::zeros(vb.rows(), vb.cols());
                    for z in 0..va.rows() {
                        let r = argmax[z];
                        let (na, nb, c) = (a_norms[z], b_norms[r], cos[z]);
                        let inv = 1.0 / (na * nb);
                        for j in 0..va.cols() {
                            let az = va.at(z, j);
                            let br = vb.at(r, j);
                            *da.at_mut(z, j) += coef * (br * inv - c * az / (na * na));
                            *db.at_mut(r, j) += coef * (az * inv - c * br / (nb * nb));
                        }
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::InfoNce { scores, tau, softmax } => {
                    let n = softmax.rows();
                    let coef = dy.at(0, 0) / (n as f64 * tau);
                    let mut ds = softmax.clone();
                    for i in 0..n {
                        *ds.at_mut(i, i) -= 1.0;
                    }
                    ds.scale(coef);
                    accumulate(&mut grads, scores.0, ds);
                }
                Op::FromScalars { ids } => {
                    for (cell, &id) in ids.iter().enumerate() {
                        if !self.needs(id) {
                            continue;
                        }
                        let g = dy.as_slice()[cell];
                        let da = Mat::from_vec(1, 1, vec![g]);
                        accumulate(&mut grads, id.0, da);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], idx: usize, delta: Mat) {
    match &mut grads[idx] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Finite-difference check of a scalar-valued tape program against its
    /// analytic gradient for one leaf.
    fn check_grad(build: impl Fn(&mut Tape, &[Mat]) -> TensorId, leaves: &[Mat], wrt: usize) {
        let eps = 1e-6;
        let mut tape = Tape::new();
        let root = build(&mut tape, leaves);
        let grads = tape.backward(root);
        // leaf ids are pushed first, in order, by convention of `build`
        let analytic = grads.get(TensorId(wrt)).expect("missing gradient").clone();

        let base = leaves[wrt].clone();
        for idx in 0..base.as_slice().len() {
            let mut plus = leaves.to_vec();
            plus[wrt].as_mut_slice()[idx] += eps;
            let mut tp = Tape::new();
            let rp = build(&mut tp, &plus);
            let lp = tp.value(rp).at(0, 0);

            let mut minus = leaves.to_vec();
            minus[wrt].as_mut_slice()[idx] -= eps;
            let mut tm = Tape::new();
            let rm = build(&mut tm, &minus);
            let lm = tm.value(rm).at(0, 0);

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.as_slice()[idx];
            let tol = 1e-8 + 1e-5 * a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() < tol,
                "coord {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn pseudo_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        // small deterministic values, no RNG dependency in unit tests
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Mat::from_fn(rows, cols, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
    }

    /// Reduces a matrix node to a scalar via fixed projection vectors so
    /// every op can be finite-difference checked through a scalar root.
    fn to_scalar(tape: &mut Tape, id: TensorId) -> TensorId {
        let v = tape.value(id);
        let (r, c) = (v.rows(), v.cols());
        let wrow = tape.constant(Mat::from_fn(1, r, |_, j| 0.7 - 0.23 * j as f64));
        let wcol = tape.constant(Mat::from_fn(c, 1, |j, _| 0.3 + 0.41 * j as f64));
        let proj = tape.matmul(wrow, id);
        tape.matmul(proj, wcol)
    }

    #[test]
    fn grad_matmul_add_bias() {
        let a = pseudo_mat(3, 4, 1);
        let b = pseudo_mat(4, 5, 2);
        let bias = pseudo_mat(1, 5, 3);
        for wrt in 0..3 {
            check_grad(
                |tape, leaves| {
                    let ids: Vec<TensorId> = leaves
                        .iter()
                        .map(|m| tape.leaf(Arc::new(m.clone()), true))
                        .collect();
                    let mm = tape.matmul(ids[0], ids[1]);
                    let ab = tape.add_bias(mm, ids[2]);
                    to_scalar(tape, ab)
                },
                &[a.clone(), b.clone(), bias.clone()],
                wrt,
            );
        }
    }

    #[test]
    fn grad_layer_norm() {
        let x = pseudo_mat(3, 6, 4);
        let g = pseudo_mat(1, 6, 5);
        let s = pseudo_mat(1, 6, 6);
        for wrt in 0..3 {
            check_grad(
                |tape, leaves| {
                    let ids: Vec<TensorId> = leaves
                        .iter()
                        .map(|m| tape.leaf(Arc::new(m.clone()), true))
                        .collect();
                    let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                    to_scalar(tape, ln)
                },
                &[x.clone(), g.clone(), s.clone()],
                wrt,
            );
        }
    }

    #[test]
    fn grad_gelu_concat_embed() {
        let table = pseudo_mat(5, 4, 7);
        let other = pseudo_mat(2, 4, 8);
        for wrt in 0..2 {
            check_grad(
                |tape, leaves| {
                    let ids: Vec<TensorId> = leaves
                        .iter()
                        .map(|m| tape.leaf(Arc::new(m.clone()), true))
                        .collect();
                    let e = tape.embed(ids[0], &[1, 3, 1]);
                    let cat = tape.concat_rows(e, ids[1]);
                    let g = tape.gelu(cat);
                    to_scalar(tape, g)
                },
                &[table.clone(), other.clone()],
                wrt,
            );
        }
    }

    #[test]
    fn grad_attention() {
        let q = pseudo_mat(3, 8, 9);
        let k = pseudo_mat(5, 8, 10);
        let v = pseudo_mat(5, 8, 11);
        for wrt in 0..3 {
            check_grad(
                |tape, leaves| {
                    let ids: Vec<TensorId> = leaves
                        .iter()
                        .map(|m| tape.leaf(Arc::new(m.clone()), true))
                        .collect();
                    let o = tape.attention(ids[0], ids[1], ids[2], 2);
                    to_scalar(tape, o)
                },
                &[q.clone(), k.clone(), v.clone()],
                wrt,
            );
        }
    }

    #[test]
    fn grad_maxsim_info_nce() {
        // two "queries" and two "targets" giving a 2x2 InfoNCE problem
        let mats: Vec<Mat> = (0..4).map(|s| pseudo_mat(3, 5, 20 + s)).collect();
        for wrt in 0..4 {
            check_grad(
                |tape, leaves| {
                    let ids: Vec<TensorId> = leaves
                        .iter()
                        .map(|m| tape.leaf(Arc::new(m.clone()), true))
                        .collect();
                    let mut cells = Vec::new();
                    for i in 0..2 {
                        for j in 0..2 {
                            cells.push(tape.maxsim(ids[i], ids[2 + j]));
                        }
                    }
                    let s = tape.from_scalars(2, 2, &cells);
                    tape.info_nce(s, 0.5)
                },
                &mats,
                wrt,
            );
        }
    }

    #[test]
    fn info_nce_uniform_matrix_is_ln_n() {
        let mut tape = Tape::new();
        let s = tape.constant(Mat::from_vec(4, 4, vec![0.37; 16]));
        let l = tape.info_nce(s, 0.07);
        assert!((tape.value(l).at(0, 0) - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(pseudo_mat(2, 2, 30));
        let p = tape.leaf(Arc::new(pseudo_mat(2, 2, 31)), true);
        let s = tape.add(c, p);
        let root = {
            let ones = tape.constant(Mat::from_vec(1, 2, vec![1.0, 1.0]));
            let col = tape.constant(Mat::from_vec(2, 1, vec![1.0, 1.0]));
            let r = tape.matmul(ones, s);
            tape.matmul(r, col)
        };
        let grads = tape.backward(root);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
