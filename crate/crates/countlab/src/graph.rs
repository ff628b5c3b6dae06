//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended in creation order, which is already a topological
//! order; the backward pass walks the tape once in reverse. Gradients
//! accumulate additively, so a tensor used along several paths receives
//! the sum of the path gradients.

use crate::tensor::{matmul_raw, transpose_raw, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: usize, rhs: usize },
    Transpose { input: usize },
    Relu { input: usize },
    Add { lhs: usize, rhs: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    Sum { input: usize },
    Mean { input: usize },
    Softmax { input: usize, axis: usize },
    LayerNorm { input: usize, gamma: usize, beta: usize, epsilon: f64 },
    MseLoss { pred: usize, target: usize },
    ConcatRows { inputs: Vec<usize>, offsets: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Elementwise binary ops accept identical shapes or a trailing-axis vector
/// on the right-hand side; anything else is rejected up front.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    LastAxis,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor.with_grad(), Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { op, value });
        TensorId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> TensorId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].value.requires_grad);
        let mut t = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    // ── Forward operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 {
            return Err(TensorError::NotMatrix { op: "matmul", shape: sa.to_vec() });
        }
        if sb.len() != 2 {
            return Err(TensorError::NotMatrix { op: "matmul", shape: sb.to_vec() });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push_derived(vec![m, n], out, Op::MatMul { lhs: a.0, rhs: b.0 }, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::NotMatrix { op: "transpose", shape: s.to_vec() });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0.0; r * c];
        transpose_raw(self.data(a), &mut out, r, c);
        Ok(self.push_derived(vec![c, r], out, Op::Transpose { input: a.0 }, &[a.0]))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(shape, data, Op::Relu { input: a.0 }, &[a.0])
    }

    fn broadcast_kind(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Broadcast, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::LastAxis)
        } else {
            Err(TensorError::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let kind = self.broadcast_kind(op_name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = match kind {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::LastAxis => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[i % db.len()]))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, data, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { lhs: a.0, rhs: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { lhs: a.0, rhs: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { lhs: a.0, rhs: b.0 })
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(shape, data, Op::Scale { input: a.0, factor }, &[a.0])
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        self.push_derived(vec![1], vec![s], Op::Sum { input: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push_derived(vec![1], vec![s / n], Op::Mean { input: a.0 }, &[a.0])
    }

    /// Numerically stabilized softmax along `axis`: the per-slice maximum is
    /// subtracted before exponentiation.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: shape.len() });
        }
        let data = softmax_slices(self.data(a), &shape, axis);
        Ok(self.push_derived(shape, data, Op::Softmax { input: a.0, axis }, &[a.0]))
    }

    /// Layer normalization over the last axis:
    /// `y = (x - mean) / sqrt(var + epsilon) * gamma + beta`, population variance.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        epsilon: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensor rank >= 1");
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(id);
            if s != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                    lhs: shape.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        if epsilon <= 0.0 {
            return Err(TensorError::Invalid(format!("layer_norm epsilon must be > 0, got {epsilon}")));
        }
        let xs = self.data(x);
        let gs = self.data(gamma);
        let bs = self.data(beta);
        let mut out = vec![0.0; xs.len()];
        for (row, out_row) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, inv_std) = row_moments(row, epsilon);
            for i in 0..d {
                out_row[i] = (row[i] - mean) * inv_std * gs[i] + bs[i];
            }
        }
        Ok(self.push_derived(
            shape,
            out,
            Op::LayerNorm { input: x.0, gamma: gamma.0, beta: beta.0, epsilon },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Mean over all elements of squared differences.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId, TensorError> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: sp.to_vec(),
                rhs: st.to_vec(),
            });
        }
        let (dp, dt) = (self.data(pred), self.data(target));
        let n = dp.len() as f64;
        let loss = dp.iter().zip(dt).map(|(&p, &t)| (p - t) * (p - t)).sum::<f64>() / n;
        Ok(self.push_derived(
            vec![1],
            vec![loss],
            Op::MseLoss { pred: pred.0, target: target.0 },
            &[pred.0, target.0],
        ))
    }

    /// Stacks rank-2 tensors with a common column count along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_rows needs at least one input".into()));
        }
        let cols = {
            let s = self.shape(parts[0]);
            if s.len() != 2 {
                return Err(TensorError::NotMatrix { op: "concat_rows", shape: s.to_vec() });
            }
            s[1]
        };
        let mut rows = 0;
        let mut offsets = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: s.to_vec(),
                });
            }
            offsets.push(rows * cols);
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let input_ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let op = Op::ConcatRows { inputs: input_ids.clone(), offsets };
        Ok(self.push_derived(vec![rows, cols], data, op, &input_ids))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populates `grad` on every `requires_grad` tensor reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape.clone(),
            });
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].value.grad.take() else {
                continue; // not on a path to the loss
            };
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &op, &grad);
            self.nodes[i].value.grad = Some(grad);
        }
        Ok(())
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].value.requires_grad
    }

    fn accumulate(&mut self, idx: usize, delta: &[f64]) {
        self.nodes[idx].value.accumulate_grad(delta);
    }

    fn apply_backward(&mut self, node: usize, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}

            Op::MatMul { lhs, rhs } => {
                let (m, k) = {
                    let s = &self.nodes[lhs].value.shape;
                    (s[0], s[1])
                };
                let n = self.nodes[rhs].value.shape[1];
                if self.wants(lhs) {
                    // dA = G . B^T
                    let mut bt = vec![0.0; k * n];
                    transpose_raw(&self.nodes[rhs].value.data, &mut bt, k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(grad, &bt, &mut da, m, n, k);
                    self.accumulate(lhs, &da);
                }
                if self.wants(rhs) {
                    // dB = A^T . G
                    let mut at = vec![0.0; m * k];
                    transpose_raw(&self.nodes[lhs].value.data, &mut at, m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, grad, &mut db, k, m, n);
                    self.accumulate(rhs, &db);
                }
            }

            Op::Transpose { input } => {
                if self.wants(input) {
                    let s = &self.nodes[node].value.shape;
                    let (r, c) = (s[0], s[1]);
                    let mut dg = vec![0.0; grad.len()];
                    transpose_raw(grad, &mut dg, r, c);
                    self.accumulate(input, &dg);
                }
            }

            Op::Relu { input } => {
                if self.wants(input) {
                    let dg: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[input].value.data)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.accumulate(input, &dg);
                }
            }

            Op::Add { lhs, rhs } => {
                if self.wants(lhs) {
                    self.accumulate(lhs, grad);
                }
                if self.wants(rhs) {
                    let dg = self.reduce_to_input_shape(rhs, grad);
                    self.accumulate(rhs, &dg);
                }
            }

            Op::Sub { lhs, rhs } => {
                if self.wants(lhs) {
                    self.accumulate(lhs, grad);
                }
                if self.wants(rhs) {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    let dg = self.reduce_to_input_shape(rhs, &neg);
                    self.accumulate(rhs, &dg);
                }
            }

            Op::Mul { lhs, rhs } => {
                let rhs_len = self.nodes[rhs].value.data.len();
                if self.wants(lhs) {
                    let rd = &self.nodes[rhs].value.data;
                    let dg: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * rd[i % rhs_len])
                        .collect();
                    self.accumulate(lhs, &dg);
                }
                if self.wants(rhs) {
                    let ld = &self.nodes[lhs].value.data;
                    let full: Vec<f64> = grad.iter().zip(ld).map(|(&g, &a)| g * a).collect();
                    let dg = self.reduce_to_input_shape(rhs, &full);
                    self.accumulate(rhs, &dg);
                }
            }

            Op::Scale { input, factor } => {
                if self.wants(input) {
                    let dg: Vec<f64> = grad.iter().map(|&g| g * factor).collect();
                    self.accumulate(input, &dg);
                }
            }

            Op::Sum { input } => {
                if self.wants(input) {
                    let dg = vec![grad[0]; self.nodes[input].value.data.len()];
                    self.accumulate(input, &dg);
                }
            }

            Op::Mean { input } => {
                if self.wants(input) {
                    let n = self.nodes[input].value.data.len();
                    let dg = vec![grad[0] / n as f64; n];
                    self.accumulate(input, &dg);
                }
            }

            Op::Softmax { input, axis } => {
                if self.wants(input) {
                    let out = &self.nodes[node].value;
                    let dg = softmax_backward(&out.data, grad, &out.shape, axis);
                    self.accumulate(input, &dg);
                }
            }

            Op::LayerNorm { input, gamma, beta, epsilon } => {
                let d = *self.nodes[input].value.shape.last().unwrap();
                let xs = &self.nodes[input].value.data;
                let gs = &self.nodes[gamma].value.data;
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (row_idx, row) in xs.chunks_exact(d).enumerate() {
                    let g_row = &grad[row_idx * d..(row_idx + 1) * d];
                    let (mean, inv_std) = row_moments(row, epsilon);
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mean) * inv_std).collect();
                    for i in 0..d {
                        dgamma[i] += g_row[i] * xhat[i];
                        dbeta[i] += g_row[i];
                    }
                    let dxhat: Vec<f64> = (0..d).map(|i| g_row[i] * gs[i]).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let dn = d as f64;
                    for i in 0..d {
                        dx[row_idx * d + i] =
                            inv_std / dn * (dn * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                    }
                }
                if self.wants(input) {
                    self.accumulate(input, &dx);
                }
                if self.wants(gamma) {
                    self.accumulate(gamma, &dgamma);
                }
                if self.wants(beta) {
                    self.accumulate(beta, &dbeta);
                }
            }

            Op::MseLoss { pred, target } => {
                let n = self.nodes[pred].value.data.len() as f64;
                let scale = 2.0 * grad[0] / n;
                if self.wants(pred) {
                    let dp: Vec<f64> = self.nodes[pred]
                        .value
                        .data
                        .iter()
                        .zip(&self.nodes[target].value.data)
                        .map(|(&p, &t)| scale * (p - t))
                        .collect();
                    self.accumulate(pred, &dp);
                }
                if self.wants(target) {
                    let dt: Vec<f64> = self.nodes[pred]
                        .value
                        .data
                        .iter()
                        .zip(&self.nodes[target].value.data)
                        .map(|(&p, &t)| -scale * (p - t))
                        .collect();
                    self.accumulate(target, &dt);
                }
            }

            Op::ConcatRows { ref inputs, ref offsets } => {
                for (&inp, &off) in inputs.iter().zip(offsets) {
                    if self.wants(inp) {
                        let len = self.nodes[inp].value.data.len();
                        self.accumulate(inp, &grad[off..off + len]);
                    }
                }
            }
        }
    }

    /// Column-sums a full-shape gradient down to a last-axis vector operand;
    /// identity when the operand already has the full shape.
    fn reduce_to_input_shape(&self, input: usize, grad: &[f64]) -> Vec<f64> {
        let len = self.nodes[input].value.data.len();
        if len == grad.len() {
            return grad.to_vec();
        }
        let mut out = vec![0.0; len];
        for (i, &g) in grad.iter().enumerate() {
            out[i % len] += g;
        }
        out
    }
}

fn row_moments(row: &[f64], epsilon: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + epsilon).sqrt())
}

fn softmax_slices(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let max = (0..axis_len).map(|a| data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for a in 0..axis_len {
                let e = (data[at(a)] - max).exp();
                out[at(a)] = e;
                denom += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= denom;
            }
        }
    }
    out
}

fn softmax_backward(out: &[f64], grad: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![0.0; out.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let dot: f64 = (0..axis_len).map(|a| grad[at(a)] * out[at(a)]).sum();
            for a in 0..axis_len {
                dx[at(a)] = out[at(a)] * (grad[at(a)] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} beyond {tol}");
        }
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_close(g.data(s), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn softmax_large_logits_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1000.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let out = g.data(s);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
    }

    // Compensated-summation reference on inputs where overflow is impossible;
    // independent of the max-subtracted path used by the implementation.
    #[test]
    fn softmax_matches_compensated_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let exps: Vec<f64> = xs.iter().map(|&x| x.exp()).collect();
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &e in &exps {
            let y = e - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let reference: Vec<f64> = exps.iter().map(|&e| e / sum).collect();

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(xs));
        let s = g.softmax(x, 0).unwrap();
        assert_close(g.data(s), &reference, 1e-12);
        let total: f64 = g.data(s).iter().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![5.0, 5.0, 5.0, 5.0]));
        let gamma = g.leaf(Tensor::from_vec(vec![1.0; 4]));
        let beta = g.leaf(Tensor::from_vec(vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_affine() {
        // [1,-1] normalizes to [1,-1]; gamma 2, beta 3 gives [5,1].
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -1.0]));
        let gamma = g.leaf(Tensor::from_vec(vec![2.0, 2.0]));
        let beta = g.leaf(Tensor::from_vec(vec![3.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert_close(g.data(y), &[5.0, 1.0], 1e-6);
    }

    // Scalar evaluation of the normalization written as a separate routine.
    fn layer_norm_scalar_oracle(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mut mean = 0.0;
        for &v in x {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for &v in x {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let denom = (var + eps).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, &v)| (v - mean) / denom * gamma[i] + beta[i])
            .collect()
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gamma: Vec<f64> = (0..10).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..10).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let expect = layer_norm_scalar_oracle(&x, &gamma, &beta, 1e-5);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(x));
        let gi = g.leaf(Tensor::from_vec(gamma));
        let bi = g.leaf(Tensor::from_vec(beta));
        let y = g.layer_norm(xi, gi, bi, 1e-5).unwrap();
        assert_close(g.data(y), &expect, 1e-12);
    }

    #[test]
    fn layer_norm_pre_affine_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(x));
        let gi = g.leaf(Tensor::from_vec(vec![1.0; 16]));
        let bi = g.leaf(Tensor::from_vec(vec![0.0; 16]));
        let y = g.layer_norm(xi, gi, bi, 1e-12).unwrap();
        let out = g.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn sum_and_mean() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let m = g.mean(x);
        assert_eq!(g.data(s), &[6.0]);
        assert_eq!(g.data(m), &[2.0]);
    }

    #[test]
    fn mean_matches_naive_accumulation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..97).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for &v in &x {
            acc += v;
        }
        let expect = acc / 97.0;
        let mut g = Graph::new();
        let xi = g.leaf(Tensor::from_vec(x));
        let m = g.mean(xi);
        assert!((g.data(m)[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn mse_zero_when_equal() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let t = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.data(l), &[0.0]);
    }

    #[test]
    fn mse_known_value() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let t = g.leaf(Tensor::from_vec(vec![2.0, 0.0]));
        let l = g.mse_loss(p, t).unwrap();
        assert_eq!(g.data(l), &[2.0]);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..31).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..31).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for i in 0..31 {
            let d = p[i] - t[i];
            acc += d * d;
        }
        let expect = acc / 31.0;
        let mut g = Graph::new();
        let pi = g.leaf(Tensor::from_vec(p));
        let ti = g.leaf(Tensor::from_vec(t));
        let l = g.mse_loss(pi, ti).unwrap();
        assert!((g.data(l)[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(vec![2]));
        let t = g.leaf(Tensor::zeros(vec![3]));
        assert!(g.mse_loss(p, t).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_linear_model_closed_form() {
        // loss = mse(w*x, y) in 1-D: dL/dw = 2(wx - y)x
        let (w, x, y) = (0.7, 1.3, 2.0);
        let mut g = Graph::new();
        let wi = g.param(Tensor::scalar(w));
        let xi = g.leaf(Tensor::scalar(x));
        let yi = g.leaf(Tensor::scalar(y));
        let pred = g.mul(wi, xi).unwrap();
        let loss = g.mse_loss(pred, yi).unwrap();
        g.backward(loss).unwrap();
        let expect = 2.0 * (w * x - y) * x;
        assert!((g.grad(wi).unwrap()[0] - expect).abs() <= 1e-10);
    }

    #[test]
    fn fanout_grads_sum_over_paths() {
        // y = x + x  =>  dy/dx = 2
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn bias_broadcast_grad_is_column_sum() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap());
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = g.mean(c);
        g.backward(m).unwrap();
        assert_close(g.grad(a).unwrap(), &[1.0 / 6.0; 2], 1e-15);
        assert_close(g.grad(b).unwrap(), &[1.0 / 6.0; 4], 1e-15);
    }
}
