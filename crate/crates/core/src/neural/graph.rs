//! Per-step reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! parameter gradients into a [`ParamStore`]. A graph is meant to be built,
//! differentiated once and dropped.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Affine(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    NormalizeRows { x: NodeId, inv_std: Vec<f64> },
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowSums(NodeId),
    QuantileHuber { pred: NodeId, target: Tensor, levels: Vec<f64>, kappa: f64 },
    PpoClip { log_prob: NodeId, old_log_prob: Vec<f64>, advantages: Vec<f64>, clip: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Asymmetric quantile weight times the scaled Huber penalty for one residual
/// `u = target - prediction`.
pub fn quantile_huber(u: f64, level: f64, kappa: f64) -> f64 {
    let indicator = if u < 0.0 { 1.0 } else { 0.0 };
    let huber = if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    };
    (level - indicator).abs() * huber / kappa
}

fn quantile_huber_du(u: f64, level: f64, kappa: f64) -> f64 {
    let indicator = if u < 0.0 { 1.0 } else { 0.0 };
    let dhuber = if u.abs() <= kappa { u } else { kappa * u.signum() };
    (level - indicator).abs() * dhuber / kappa
}

/// One element of the clipped surrogate: `min(ζA, clip(ζ, 1-ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// A leaf bound to a stored parameter. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(v, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.affine(a, s, 0.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                v.set(r, c, e / total);
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Zero-mean, unit-variance rows (population variance plus `eps`).
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut v = Tensor::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (c, z) in row.iter().enumerate() {
                v.set(r, c, (z - mean) * is);
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(v, Op::NormalizeRows { x: a, inv_std }, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "row slice out of range");
        let c = x.cols();
        let v = Tensor::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of range");
        let mut v = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            v.data_mut()[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.data_mut()[r * cols + offset..r * cols + offset + x.cols()].copy_from_slice(x.row(r));
            }
            offset += x.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// `r × c → r × 1`.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows(), 1, (0..x.rows()).map(|r| x.row(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(v, Op::RowSums(a), rg)
    }

    /// Quantile-regression Huber loss: for predictions `B × J` against fixed
    /// targets, `Σ_j mean_b ρ(target - pred)`.
    pub fn quantile_huber_loss(&mut self, pred: NodeId, target: Tensor, levels: &[f64], kappa: f64) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "quantile loss shape mismatch");
        assert_eq!(p.cols(), levels.len(), "quantile loss level count mismatch");
        let b = p.rows() as f64;
        let mut total = 0.0;
        for r in 0..p.rows() {
            for (j, &level) in levels.iter().enumerate() {
                total += quantile_huber(target.get(r, j) - p.get(r, j), level, kappa);
            }
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total / b),
            Op::QuantileHuber {
                pred,
                target,
                levels: levels.to_vec(),
                kappa,
            },
            rg,
        )
    }

    /// Mean clipped surrogate over a column of new log-probabilities.
    pub fn ppo_clip_objective(&mut self, log_prob: NodeId, old_log_prob: &[f64], advantages: &[f64], clip: f64) -> NodeId {
        let lp = self.value(log_prob);
        assert_eq!(lp.cols(), 1, "log-probabilities must be a column");
        assert_eq!(lp.rows(), old_log_prob.len());
        assert_eq!(lp.rows(), advantages.len());
        let n = lp.rows() as f64;
        let total: f64 = (0..lp.rows())
            .map(|r| clipped_surrogate((lp.get(r, 0) - old_log_prob[r]).exp(), advantages[r], clip))
            .sum();
        let rg = self.rg(log_prob);
        self.push(
            Tensor::scalar(total / n),
            Op::PpoClip {
                log_prob,
                old_log_prob: old_log_prob.to_vec(),
                advantages: advantages.to_vec(),
                clip,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node. Parameter gradients are added to
    /// whatever `store` already holds.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        assert!(loss.0 < self.nodes.len(), "backward without a recorded forward pass");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |id: NodeId, delta: Tensor| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        acc(*a, g.matmul_transposed(bv));
                    }
                    if self.rg(*b) {
                        acc(*b, av.transposed_matmul(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(bv, |x, y| x * y));
                    acc(*b, g.zip_map(av, |x, y| x * y));
                }
                Op::AddRow(a, row) => {
                    acc(*row, column_sums(&g));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (self.value(*a), self.value(*row));
                    acc(*row, column_sums(&g.zip_map(av, |x, y| x * y)));
                    acc(*a, broadcast_rows(&g, rv, |x, y| x * y));
                }
                Op::Affine(a, s) => acc(*a, g.map(|x| x * s)),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, g.zip_map(self.value(*a), |x, z| if z >= lo && z <= hi { x } else { 0.0 }));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*a, d);
                }
                Op::NormalizeRows { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..y.cols() {
                            d.set(r, c, inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy));
                        }
                    }
                    acc(*x, d);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for c in 0..g.cols() {
                            d.set(r, start + c, g.get(r, c));
                        }
                    }
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let piece = Tensor::from_vec(rows, c, g.data()[offset * c..(offset + rows) * c].to_vec());
                        acc(p, piece);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut piece = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            piece.data_mut()[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        acc(p, piece);
                        offset += pc;
                    }
                }
                Op::SumAll(a) => {
                    let [r, c] = self.value(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item()));
                }
                Op::MeanAll(a) => {
                    let [r, c] = self.value(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::RowSums(a) => {
                    let [r, c] = self.value(*a).shape();
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = g.get(i, 0));
                    }
                    acc(*a, d);
                }
                Op::QuantileHuber {
                    pred,
                    target,
                    levels,
                    kappa,
                } => {
                    let p = self.value(*pred);
                    let scale = g.item() / p.rows() as f64;
                    let mut d = Tensor::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        for (j, &level) in levels.iter().enumerate() {
                            let u = target.get(r, j) - p.get(r, j);
                            d.set(r, j, -scale * quantile_huber_du(u, level, *kappa));
                        }
                    }
                    acc(*pred, d);
                }
                Op::PpoClip {
                    log_prob,
                    old_log_prob,
                    advantages,
                    clip,
                } => {
                    let lp = self.value(*log_prob);
                    let scale = g.item() / lp.rows() as f64;
                    let mut d = Tensor::zeros(lp.rows(), 1);
                    for r in 0..lp.rows() {
                        let ratio = (lp.get(r, 0) - old_log_prob[r]).exp();
                        let adv = advantages[r];
                        let clipped = (adv >= 0.0 && ratio > 1.0 + clip) || (adv < 0.0 && ratio < 1.0 - clip);
                        if !clipped {
                            d.set(r, 0, scale * ratio * adv);
                        }
                    }
                    acc(*log_prob, d);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(row.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), row.cols(), "broadcast column mismatch");
    let mut out = a.clone();
    let c = a.cols();
    for r in 0..a.rows() {
        for (x, y) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row.data()) {
            *x = f(*x, *y);
        }
    }
    out
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_weights() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(&[1.5, -2.0, 0.25]));
        let mut g = Graph::new();
        let wn = g.param(&store, w);
        let sq = g.mul(wn, wn);
        let loss = g.sum(sq);
        g.backward(loss, &mut store);
        assert_eq!(store.grad(w).data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(&[3.0; 4]));
        let y = g.softmax_rows(x);
        assert!(g.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn quantile_huber_hand_values() {
        assert!((quantile_huber(1.0, 0.5, 10.0) - 0.025).abs() < 1e-15);
        assert!((quantile_huber(-1.0, 0.9, 10.0) - 0.005).abs() < 1e-15);
        assert_eq!(quantile_huber(0.0, 0.3, 10.0), 0.0);
        // linear branch
        assert!((quantile_huber(20.0, 0.5, 10.0) - 0.5 * 10.0 * 15.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_surrogate_hand_values() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn shared_param_node_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let y = g.add(a, b);
        g.backward(y, &mut store);
        assert_eq!(store.grad(w).item(), 2.0);
    }
}
