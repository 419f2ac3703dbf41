//! Reverse-mode differentiation over the small set of ops this model needs.
//!
//! A `Tape` is an append-only list of nodes; each op validates shapes,
//! computes its value eagerly, and records its inputs. `backward_from`
//! seeds one or more nodes with upstream gradients (the multi-scale loss
//! produces one seed per embedding level) and walks the list in reverse,
//! accumulating into parameter leaves. Everything is f64; there is no
//! broadcasting beyond what the listed ops define.
//!
//! Convolution layout: a signal is a (channels, time) matrix, a conv weight
//! is (out_channels, in_channels * kernel) with the kernel index fastest,
//! and biases are (1, n) rows. Convolutions are valid (no padding):
//! t_out = (t_in - kernel) / stride + 1.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; no gradient flows out.
    Constant,
    /// Copy of parameter `idx` in the store this tape was built against.
    Param { idx: usize },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
    },
    Relu { x: NodeId },
    AvgPool1d { x: NodeId, window: usize, stride: usize },
    /// (channels, time) -> (1, channels) mean over time.
    GlobalAvgPool { x: NodeId },
    /// out = x w^T + b, w is (out, in), b is (1, out).
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// Per-row u / sqrt(|u|^2 + eps).
    RowL2Norm { x: NodeId, eps: f64 },
    MatMul { a: NodeId, b: NodeId },
    /// out = a b^T.
    MatMulTransB { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    RowSoftmax { x: NodeId },
    /// Stack 1-row (or equal-width) blocks vertically.
    ConcatRows { xs: Vec<NodeId> },
    /// Mean over rows of (-logit_y + logsumexp(row)); value is (1, 1).
    CrossEntropyMean { logits: NodeId, labels: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf holding a copy of `store` parameter `idx`; gradients reaching it
    /// are accumulated under that index by `backward_from`.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> NodeId {
        self.push(store.tensor(idx).clone(), Op::Param { idx })
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let (c_in, t_in) = (self.value(x).rows(), self.value(x).cols());
        let (c_out, wk) = (self.value(w).rows(), self.value(w).cols());
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArg {
                context: "conv1d",
                detail: format!("kernel {kernel}, stride {stride} must be positive"),
            });
        }
        if wk != c_in * kernel {
            return Err(Error::Dim {
                context: "conv1d",
                detail: format!("weight cols {wk} != in_channels {c_in} * kernel {kernel}"),
            });
        }
        if self.value(b).rows() != 1 || self.value(b).cols() != c_out {
            return Err(Error::Dim {
                context: "conv1d",
                detail: format!(
                    "bias shape ({}, {}) != (1, {c_out})",
                    self.value(b).rows(),
                    self.value(b).cols()
                ),
            });
        }
        if t_in < kernel {
            return Err(Error::Dim {
                context: "conv1d",
                detail: format!("input length {t_in} shorter than kernel {kernel}"),
            });
        }
        let t_out = (t_in - kernel) / stride + 1;
        let mut out = Matrix::zeros(c_out, t_out);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for o in 0..c_out {
                let wrow = wv.row(o);
                let bias = bv.get(0, o);
                for t in 0..t_out {
                    let start = t * stride;
                    let mut acc = bias;
                    for c in 0..c_in {
                        let xrow = xv.row(c);
                        let wseg = &wrow[c * kernel..(c + 1) * kernel];
                        let xseg = &xrow[start..start + kernel];
                        for k in 0..kernel {
                            acc += wseg[k] * xseg[k];
                        }
                    }
                    out.set(o, t, acc);
                }
            }
        }
        Ok(self.push(out, Op::Conv1d { x, w, b, kernel, stride }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x })
    }

    pub fn avg_pool1d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (c, t_in) = (self.value(x).rows(), self.value(x).cols());
        if window == 0 || stride == 0 || t_in < window {
            return Err(Error::InvalidArg {
                context: "avg_pool1d",
                detail: format!("window {window}, stride {stride} on length {t_in}"),
            });
        }
        let t_out = (t_in - window) / stride + 1;
        let mut out = Matrix::zeros(c, t_out);
        for ch in 0..c {
            let row = self.value(x).row(ch);
            for t in 0..t_out {
                let seg = &row[t * stride..t * stride + window];
                out.set(ch, t, seg.iter().sum::<f64>() / window as f64);
            }
        }
        Ok(self.push(out, Op::AvgPool1d { x, window, stride }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (c, t) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Matrix::zeros(1, c);
        for ch in 0..c {
            out.set(0, ch, self.value(x).row(ch).iter().sum::<f64>() / t as f64);
        }
        self.push(out, Op::GlobalAvgPool { x })
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d_in) = (self.value(x).rows(), self.value(x).cols());
        let (d_out, w_in) = (self.value(w).rows(), self.value(w).cols());
        if w_in != d_in {
            return Err(Error::Dim {
                context: "affine",
                detail: format!("input width {d_in} != weight fan-in {w_in}"),
            });
        }
        if self.value(b).rows() != 1 || self.value(b).cols() != d_out {
            return Err(Error::Dim {
                context: "affine",
                detail: "bias must be a (1, fan_out) row".into(),
            });
        }
        let mut out = self.value(x).matmul_transb(self.value(w));
        for i in 0..n {
            for j in 0..d_out {
                let v = out.get(i, j) + self.value(b).get(0, j);
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn row_l2_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let n2: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>() + eps;
            let s = 1.0 / n2.sqrt();
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        self.push(out, Op::RowL2Norm { x, eps })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).cols() != self.value(b).rows() {
            return Err(Error::Dim {
                context: "tape matmul",
                detail: format!(
                    "({}, {}) x ({}, {})",
                    self.value(a).rows(),
                    self.value(a).cols(),
                    self.value(b).rows(),
                    self.value(b).cols()
                ),
            });
        }
        let out = self.value(a).matmul(self.value(b));
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).cols() != self.value(b).cols() {
            return Err(Error::Dim {
                context: "tape matmul_transb",
                detail: format!(
                    "({}, {}) x ({}, {})^T",
                    self.value(a).rows(),
                    self.value(a).cols(),
                    self.value(b).rows(),
                    self.value(b).cols()
                ),
            });
        }
        let out = self.value(a).matmul_transb(self.value(b));
        Ok(self.push(out, Op::MatMulTransB { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).rows() != self.value(b).rows()
            || self.value(a).cols() != self.value(b).cols()
        {
            return Err(Error::Dim {
                context: "tape add",
                detail: "operand shapes differ".into(),
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign_scaled(self.value(b), 1.0);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::RowSoftmax { x })
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidArg {
                context: "concat_rows",
                detail: "no blocks".into(),
            });
        }
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        for &id in xs {
            if self.value(id).cols() != cols {
                return Err(Error::Dim {
                    context: "concat_rows",
                    detail: "blocks differ in width".into(),
                });
            }
            rows += self.value(id).rows();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut r = 0;
        for &id in xs {
            for i in 0..self.value(id).rows() {
                out.row_mut(r).copy_from_slice(self.value(id).row(i));
                r += 1;
            }
        }
        Ok(self.push(out, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = (self.value(logits).rows(), self.value(logits).cols());
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                context: "cross_entropy_mean",
                left: labels.len(),
                right: n,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                kind: "class",
                value: bad as u32,
                max: k as u32 - 1,
            });
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = self.value(logits).row(i);
            let lse = crate::numerics::logsumexp(row);
            total += lse - row[y];
        }
        let value = Matrix::from_vec(1, 1, vec![total / n as f64]).unwrap();
        Ok(self.push(
            value,
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from the given (node, upstream gradient) seeds.
    /// Returns one gradient per store parameter, zero-filled where no
    /// gradient flowed. Seed shapes must match their nodes.
    pub fn backward_from(
        &self,
        seeds: &[(NodeId, Matrix)],
        store: &ParamStore,
    ) -> Result<Vec<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let v = self.value(*id);
            if seed.rows() != v.rows() || seed.cols() != v.cols() {
                return Err(Error::Dim {
                    context: "backward_from",
                    detail: format!(
                        "seed shape ({}, {}) != node shape ({}, {})",
                        seed.rows(),
                        seed.cols(),
                        v.rows(),
                        v.cols()
                    ),
                });
            }
            accumulate(&mut grads[id.0], seed);
        }

        let mut param_grads: Vec<Matrix> = (0..store.len())
            .map(|i| {
                let t = store.tensor(i);
                Matrix::zeros(t.rows(), t.cols())
            })
            .collect();

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param { idx: p } => {
                    param_grads[*p].add_assign_scaled(&g, 1.0);
                }
                Op::Conv1d { x, w, b, kernel, stride } => {
                    let (kernel, stride) = (*kernel, *stride);
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (c_in, _) = (xv.rows(), xv.cols());
                    let (c_out, t_out) = (g.rows(), g.cols());
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                    let mut gb = Matrix::zeros(1, c_out);
                    for o in 0..c_out {
                        let grow = g.row(o);
                        let wrow = wv.row(o);
                        gb.set(0, o, gb.get(0, o) + grow.iter().sum::<f64>());
                        for t in 0..t_out {
                            let start = t * stride;
                            let gv = grow[t];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                let xrow = xv.row(c);
                                let gwrow = gw.row_mut(o);
                                for k in 0..kernel {
                                    gwrow[c * kernel + k] += gv * xrow[start + k];
                                }
                                let wseg = &wrow[c * kernel..(c + 1) * kernel];
                                let gxrow = gx.row_mut(c);
                                for k in 0..kernel {
                                    gxrow[start + k] += gv * wseg[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[w.0], &gw);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Relu { x } => {
                    let mut gx = g.clone();
                    let xv = self.value(*x);
                    for (gv, xv) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::AvgPool1d { x, window, stride } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let inv = 1.0 / *window as f64;
                    for c in 0..g.rows() {
                        for t in 0..g.cols() {
                            let gv = g.get(c, t) * inv;
                            let row = gx.row_mut(c);
                            for k in 0..*window {
                                row[t * stride + k] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let t = xv.cols();
                    let mut gx = Matrix::zeros(xv.rows(), t);
                    for c in 0..xv.rows() {
                        let gv = g.get(0, c) / t as f64;
                        for v in gx.row_mut(c) {
                            *v = gv;
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Affine { x, w, b } => {
                    let gx = g.matmul(self.value(*w));
                    let gw = g.transpose().matmul(self.value(*x));
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gb.set(0, j, gb.get(0, j) + g.get(i, j));
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                    accumulate(&mut grads[w.0], &gw);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::RowL2Norm { x, eps } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let u = xv.row(i);
                        let n2: f64 = u.iter().map(|v| v * v).sum::<f64>() + eps;
                        let s = 1.0 / n2.sqrt();
                        let s3 = s * s * s;
                        let ug: f64 = u.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                        let grow = gx.row_mut(i);
                        for j in 0..u.len() {
                            grow[j] = s * g.get(i, j) - s3 * u[j] * ug;
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::MatMul { a, b } => {
                    let ga = g.matmul_transb(self.value(*b));
                    let gb = self.value(*a).transpose().matmul(&g);
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::MatMulTransB { a, b } => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.transpose().matmul(self.value(*a));
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Transpose { x } => {
                    let gx = g.transpose();
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Scale { x, c } => {
                    let gx = g.scale(*c);
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::RowSoftmax { x } => {
                    let p = &self.nodes[idx].value;
                    let mut gx = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let prow = p.row(i);
                        let grow = g.row(i);
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let out = gx.row_mut(i);
                        for j in 0..prow.len() {
                            out[j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::ConcatRows { xs } => {
                    let mut r = 0;
                    for &id in xs {
                        let rows = self.value(id).rows();
                        let cols = self.value(id).cols();
                        let mut gx = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            gx.row_mut(i).copy_from_slice(g.row(r + i));
                        }
                        r += rows;
                        accumulate(&mut grads[id.0], &gx);
                    }
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let lv = self.value(*logits);
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut gx = Matrix::zeros(lv.rows(), lv.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        let row = lv.row(i);
                        let lse = crate::numerics::logsumexp(row);
                        let out = gx.row_mut(i);
                        for j in 0..row.len() {
                            let p = (row[j] - lse).exp();
                            out[j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads[logits.0], &gx);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(acc) => acc.add_assign_scaled(g, 1.0),
        None => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OptimConfig, ParamStore};
    use crate::numerics::Rng;
    use approx::assert_relative_eq;

    fn rand_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        let mut m = Matrix::zeros(r, c);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        m
    }

    /// Central finite differences of `f` w.r.t. store parameter `idx`,
    /// where `f` rebuilds the whole graph from current store values.
    fn fd_param_grad(
        store: &mut ParamStore,
        idx: usize,
        f: &dyn Fn(&ParamStore) -> f64,
        h: f64,
    ) -> Matrix {
        let (rows, cols) = {
            let t = store.tensor(idx);
            (t.rows(), t.cols())
        };
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.tensor(idx).get(i, j);
                store.tensor_mut(idx).set(i, j, orig + h);
                let fp = f(store);
                store.tensor_mut(idx).set(i, j, orig - h);
                let fm = f(store);
                store.tensor_mut(idx).set(i, j, orig);
                out.set(i, j, (fp - fm) / (2.0 * h));
            }
        }
        out
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        // Entries far below the matrix scale are dominated by finite-
        // difference noise, so the denominator floors at a fraction of the
        // overall gradient magnitude rather than at machine epsilon.
        let scale = a.max_abs().max(b.max_abs()).max(1e-8);
        let mut worst = 0.0_f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale);
            worst = worst.max(rel);
        }
        worst
    }

    /// Scalar readout used by the per-op checks: 0.5 * sum of squares of the
    /// terminal node, whose gradient seed is simply the node value.
    fn half_sq(m: &Matrix) -> f64 {
        0.5 * m.data().iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = Rng::new(71);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_matrix(&mut rng, 3, 2 * 4)).unwrap();
        let b = store.add("b", rand_matrix(&mut rng, 1, 3)).unwrap();
        let x = rand_matrix(&mut rng, 2, 13);

        let run = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let wn = tape.param(s, w);
            let bn = tape.param(s, b);
            let out = tape.conv1d(xn, wn, bn, 4, 3).unwrap();
            half_sq(tape.value(out))
        };

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.param(&store, w);
        let bn = tape.param(&store, b);
        let out = tape.conv1d(xn, wn, bn, 4, 3).unwrap();
        assert_eq!(tape.value(out).cols(), (13 - 4) / 3 + 1);
        let seed = tape.value(out).clone();
        let grads = tape.backward_from(&[(out, seed)], &store).unwrap();

        for idx in [w, b] {
            let fd = fd_param_grad(&mut store, idx, &run, 1e-6);
            let err = max_rel_err(&grads[idx], &fd);
            assert!(err < 1e-7, "param {idx} max rel err {err}");
        }
    }

    #[test]
    fn conv1d_input_gradient_via_param_input() {
        // Feed the signal itself through a param leaf so backward_from
        // reports d/dx as well.
        let mut rng = Rng::new(72);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_matrix(&mut rng, 2, 11)).unwrap();
        let w = store.add("w", rand_matrix(&mut rng, 2, 2 * 3)).unwrap();
        let b = store.add("b", rand_matrix(&mut rng, 1, 2)).unwrap();

        let run = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let wn = tape.param(s, w);
            let bn = tape.param(s, b);
            let c = tape.conv1d(xn, wn, bn, 3, 2).unwrap();
            let r = tape.relu(c);
            let p = tape.global_avg_pool(r);
            half_sq(tape.value(p))
        };

        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let wn = tape.param(&store, w);
        let bn = tape.param(&store, b);
        let c = tape.conv1d(xn, wn, bn, 3, 2).unwrap();
        let r = tape.relu(c);
        let p = tape.global_avg_pool(r);
        let seed = tape.value(p).clone();
        let grads = tape.backward_from(&[(p, seed)], &store).unwrap();

        for idx in [x, w, b] {
            let fd = fd_param_grad(&mut store, idx, &run, 1e-6);
            let err = max_rel_err(&grads[idx], &fd);
            assert!(err < 1e-6, "param {idx} max rel err {err}");
        }
    }

    #[test]
    fn affine_row_norm_softmax_chain_matches_fd() {
        let mut rng = Rng::new(73);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_matrix(&mut rng, 5, 4)).unwrap();
        let b1 = store.add("b1", rand_matrix(&mut rng, 1, 5)).unwrap();
        let w2 = store.add("w2", rand_matrix(&mut rng, 3, 5)).unwrap();
        let b2 = store.add("b2", rand_matrix(&mut rng, 1, 3)).unwrap();
        let x = rand_matrix(&mut rng, 6, 4);

        let build = |tape: &mut Tape, s: &ParamStore| -> NodeId {
            let xn = tape.constant(x.clone());
            let w1n = tape.param(s, w1);
            let b1n = tape.param(s, b1);
            let h = tape.affine(xn, w1n, b1n).unwrap();
            let h = tape.relu(h);
            let h = tape.row_l2_norm(h, 1e-12);
            let w2n = tape.param(s, w2);
            let b2n = tape.param(s, b2);
            let o = tape.affine(h, w2n, b2n).unwrap();
            tape.row_softmax(o)
        };
        let run = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let out = build(&mut tape, s);
            half_sq(tape.value(out))
        };

        let mut tape = Tape::new();
        let out = build(&mut tape, &store);
        let seed = tape.value(out).clone();
        let grads = tape.backward_from(&[(out, seed)], &store).unwrap();
        for idx in [w1, b1, w2, b2] {
            let fd = fd_param_grad(&mut store, idx, &run, 1e-6);
            let err = max_rel_err(&grads[idx], &fd);
            assert!(err < 1e-6, "param {idx} max rel err {err}");
        }
    }

    #[test]
    fn attention_block_shape_matches_fd() {
        // Miniature of the staging tower: scores = Q K^T / sqrt(d), softmax,
        // weighted values, residual add, then cross-entropy on pooled rows.
        let mut rng = Rng::new(74);
        let mut store = ParamStore::new();
        let d = 4;
        let wq = store.add("wq", rand_matrix(&mut rng, d, d)).unwrap();
        let bq = store.add("bq", rand_matrix(&mut rng, 1, d)).unwrap();
        let wk = store.add("wk", rand_matrix(&mut rng, d, d)).unwrap();
        let bk = store.add("bk", rand_matrix(&mut rng, 1, d)).unwrap();
        let wv = store.add("wv", rand_matrix(&mut rng, d, d)).unwrap();
        let bv = store.add("bv", rand_matrix(&mut rng, 1, d)).unwrap();
        let wo = store.add("wo", rand_matrix(&mut rng, 3, d)).unwrap();
        let bo = store.add("bo", rand_matrix(&mut rng, 1, 3)).unwrap();
        let x = rand_matrix(&mut rng, 5, d);
        let labels = vec![2usize, 0, 1, 1, 0];

        let build = |tape: &mut Tape, s: &ParamStore| -> NodeId {
            let xn = tape.constant(x.clone());
            let q = {
                let w = tape.param(s, wq);
                let b = tape.param(s, bq);
                tape.affine(xn, w, b).unwrap()
            };
            let k = {
                let w = tape.param(s, wk);
                let b = tape.param(s, bk);
                tape.affine(xn, w, b).unwrap()
            };
            let v = {
                let w = tape.param(s, wv);
                let b = tape.param(s, bv);
                tape.affine(xn, w, b).unwrap()
            };
            let scores = tape.matmul_transb(q, k).unwrap();
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = tape.row_softmax(scores);
            let mixed = tape.matmul(attn, v).unwrap();
            let res = tape.add(mixed, xn).unwrap();
            let w = tape.param(s, wo);
            let b = tape.param(s, bo);
            let logits = tape.affine(res, w, b).unwrap();
            tape.cross_entropy_mean(logits, &labels).unwrap()
        };
        let run = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let out = build(&mut tape, s);
            tape.value(out).get(0, 0)
        };

        let mut tape = Tape::new();
        let out = build(&mut tape, &store);
        let seed = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let grads = tape.backward_from(&[(out, seed)], &store).unwrap();
        for idx in [wq, bq, wk, wv, bv, wo, bo] {
            let fd = fd_param_grad(&mut store, idx, &run, 1e-6);
            let err = max_rel_err(&grads[idx], &fd);
            assert!(err < 1e-6, "param {idx} max rel err {err}");
        }
        // The key bias shifts every score in a row equally, and softmax is
        // invariant to that, so its true gradient vanishes.
        assert!(
            grads[bk].max_abs() < 1e-12,
            "key bias gradient {}",
            grads[bk].max_abs()
        );
    }

    #[test]
    fn linear_case_matches_hand_derived_form() {
        // loss = sum (X W^T)^2, d/dW = 2 (X W^T)^T X.
        let mut rng = Rng::new(75);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_matrix(&mut rng, 3, 4)).unwrap();
        let zero_b = Matrix::zeros(1, 3);
        let b = store.add("b", zero_b).unwrap();
        let x = rand_matrix(&mut rng, 6, 4);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.param(&store, w);
        let bn = tape.param(&store, b);
        let u = tape.affine(xn, wn, bn).unwrap();
        let seed = tape.value(u).scale(2.0);
        let grads = tape.backward_from(&[(u, seed)], &store).unwrap();

        let u_val = x.matmul_transb(store.tensor(w));
        let want = u_val.transpose().matmul(&x).scale(2.0);
        assert_relative_eq!(
            grads[w].max_abs(),
            want.max_abs(),
            max_relative = 1e-12
        );
        let mut diff = grads[w].clone();
        diff.add_assign_scaled(&want, -1.0);
        assert!(diff.max_abs() < 1e-12);
    }

    #[test]
    fn zero_seed_gives_zero_gradients_and_multi_seed_sums() {
        let mut rng = Rng::new(76);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_matrix(&mut rng, 2, 3)).unwrap();
        let b = store.add("b", rand_matrix(&mut rng, 1, 2)).unwrap();
        let x = rand_matrix(&mut rng, 4, 3);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let wn = tape.param(&store, w);
        let bn = tape.param(&store, b);
        let h1 = tape.affine(xn, wn, bn).unwrap();
        let h2 = tape.relu(h1);

        let zero = Matrix::zeros(4, 2);
        let grads = tape
            .backward_from(&[(h1, zero.clone()), (h2, zero)], &store)
            .unwrap();
        assert_eq!(grads[w].max_abs(), 0.0);
        assert_eq!(grads[b].max_abs(), 0.0);

        // Two seeds accumulate: seeding both h1 and h2 equals the sum of
        // seeding each alone.
        let s1 = rand_matrix(&mut rng, 4, 2);
        let s2 = rand_matrix(&mut rng, 4, 2);
        let g_both = tape
            .backward_from(&[(h1, s1.clone()), (h2, s2.clone())], &store)
            .unwrap();
        let g_a = tape.backward_from(&[(h1, s1)], &store).unwrap();
        let g_b = tape.backward_from(&[(h2, s2)], &store).unwrap();
        let mut sum = g_a[w].clone();
        sum.add_assign_scaled(&g_b[w], 1.0);
        let mut diff = g_both[w].clone();
        diff.add_assign_scaled(&sum, -1.0);
        assert!(diff.max_abs() < 1e-14);
    }

    #[test]
    fn row_norm_gradient_is_orthogonal_to_output() {
        let mut rng = Rng::new(77);
        let mut store = ParamStore::new();
        let u = store.add("u", rand_matrix(&mut rng, 3, 6)).unwrap();
        let mut tape = Tape::new();
        let un = tape.param(&store, u);
        let z = tape.row_l2_norm(un, 1e-12);
        let seed = rand_matrix(&mut rng, 3, 6);
        let grads = tape.backward_from(&[(z, seed)], &store).unwrap();
        // The normalized output is scale-invariant, so the input gradient
        // has no component along u (equivalently along z).
        for i in 0..3 {
            let zrow = tape.value(z).row(i).to_vec();
            let grow = grads[u].row(i);
            let dot: f64 = zrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            let gnorm: f64 = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                dot.abs() < 1e-10 * gnorm.max(1.0),
                "row {i}: dot {dot}, |g| {gnorm}"
            );
        }
    }

    #[test]
    fn pooling_concat_transpose_match_fd() {
        let mut rng = Rng::new(78);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_matrix(&mut rng, 2, 9)).unwrap();
        let c = store.add("c", rand_matrix(&mut rng, 1, 2)).unwrap();

        let build = |tape: &mut Tape, s: &ParamStore| -> NodeId {
            let an = tape.param(s, a);
            let pooled = tape.avg_pool1d(an, 3, 2).unwrap();
            let gp = tape.global_avg_pool(pooled);
            let cn = tape.param(s, c);
            let cat = tape.concat_rows(&[gp, cn]).unwrap();
            let t = tape.transpose(cat);
            tape.row_softmax(t)
        };
        let run = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let out = build(&mut tape, s);
            half_sq(tape.value(out))
        };

        let mut tape = Tape::new();
        let out = build(&mut tape, &store);
        let seed = tape.value(out).clone();
        let grads = tape.backward_from(&[(out, seed)], &store).unwrap();
        for idx in [a, c] {
            let fd = fd_param_grad(&mut store, idx, &run, 1e-6);
            let err = max_rel_err(&grads[idx], &fd);
            assert!(err < 1e-6, "param {idx} max rel err {err}");
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(7, 5));
        let ce = tape.cross_entropy_mean(logits, &[0, 1, 2, 3, 4, 0, 1]).unwrap();
        assert_relative_eq!(tape.value(ce).get(0, 0), 5.0_f64.ln(), max_relative = 1e-14);

        let bad = tape.cross_entropy_mean(logits, &[0, 1, 2, 3, 4, 0, 9]);
        assert!(matches!(bad, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 4));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, b).is_err());
        let w = tape.constant(Matrix::zeros(5, 9));
        let bias = tape.constant(Matrix::zeros(1, 5));
        assert!(tape.conv1d(a, w, bias, 4, 1).is_err());

        let store = ParamStore::new();
        let seed = Matrix::zeros(1, 1);
        assert!(tape.backward_from(&[(a, seed)], &store).is_err());
    }

    #[test]
    fn adamw_is_reachable_from_tape_grads() {
        // Smoke link between tape gradients and the optimizer: one step on
        // a quadratic moves the parameter toward the minimum.
        let mut store = ParamStore::new();
        let w = store
            .add("w", Matrix::from_vec(1, 1, vec![2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let seed = tape.value(wn).scale(2.0);
        let grads = tape.backward_from(&[(wn, seed)], &store).unwrap();
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        store.adam_step(&grads, &cfg).unwrap();
        let after = store.tensor(w).get(0, 0);
        assert!(after < 2.0 && after > 1.0, "after {after}");
    }
}
