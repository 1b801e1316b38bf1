//! Reverse-mode autodiff over dense f64 matrices.
//!
//! Forward passes append nodes to a tape; `backward` walks the tape in
//! reverse and accumulates gradients into named parameter leaves. All
//! arithmetic is f64; parameters enter as exact widenings of their f32
//! master copies, which keeps finite-difference checks clean and multi-worker
//! runs reproducible.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, Axis};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Val {
    Own(Matrix),
    Shared(Arc<Matrix>),
}

impl Val {
    fn get(&self) -> &Matrix {
        match self {
            Val::Own(m) => m,
            Val::Shared(m) => m,
        }
    }
}

enum Op {
    Leaf { name: Option<String> },
    /// A · B
    MatMul(NodeId, NodeId),
    /// A · Bᵀ
    MatMulNT(NodeId, NodeId),
    /// X + b broadcast over rows (b is 1 x n)
    AddBiasRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// softmax(scale * x) per row
    SoftmaxRows { x: NodeId, scale: f64 },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Rows at `indices` replaced by the (1 x d) `row` node.
    ReplaceRows {
        x: NodeId,
        row: NodeId,
        indices: Vec<usize>,
    },
    /// x / (||x||_2 + eps) per row
    L2NormalizeRows { x: NodeId, eps: f64 },
    /// y[i, j] = x[i, j] * s[i, 0]
    ScaleRowsBy { x: NodeId, s: NodeId },
    /// y = x ⊙ mask, mask already divided by the keep probability
    Dropout { x: NodeId, mask: Matrix },
}

struct Node {
    value: Val,
    needs_grad: bool,
    op: Op,
}

/// Gradients keyed by parameter name; only trainable leaves appear.
pub type GradMap = BTreeMap<String, Matrix>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.nodes[id.0].value.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Val::Own(value),
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, false, Op::Leaf { name: None })
    }

    /// Named parameter leaf; gradients are accumulated when `trainable`.
    pub fn param(&mut self, name: &str, value: Arc<Matrix>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value: Val::Shared(value),
            needs_grad: trainable,
            op: Op::Leaf {
                name: Some(name.to_string()),
            },
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, self.ng(a) || self.ng(b), Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, self.ng(a) || self.ng(b), Op::MatMulNT(a, b))
    }

    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let v = self.value(x) + self.value(b);
        self.push(v, self.ng(x) || self.ng(b), Op::AddBiasRow(x, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, self.ng(a) || self.ng(b), Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.push(v, self.ng(x), Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(gelu);
        self.push(v, self.ng(x), Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let d = xv.ncols() as f64;
        let mut out = Matrix::zeros(xv.raw_dim());
        for (i, row) in xv.outer_iter().enumerate() {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let sigma = (var + eps).sqrt();
            for j in 0..row.len() {
                out[[i, j]] = (row[j] - mu) / sigma * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(
            out,
            self.ng(x) || self.ng(gamma) || self.ng(beta),
            Op::LayerNorm { x, gamma, beta, eps },
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId, scale: f64) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.raw_dim());
        for (i, row) in xv.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
            let mut sum = 0.0;
            for j in 0..row.len() {
                let e = (row[j] * scale - m).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in 0..row.len() {
                out[[i, j]] /= sum;
            }
        }
        self.push(out, self.ng(x), Op::SoftmaxRows { x, scale })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, ng, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, ng, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(x)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, self.ng(x), Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(x)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, self.ng(x), Op::SliceCols { x, start, len })
    }

    pub fn replace_rows(&mut self, x: NodeId, row: NodeId, indices: &[usize]) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let mut v = self.value(x).clone();
        let r = self.value(row).row(0).to_owned();
        for &i in indices {
            v.row_mut(i).assign(&r);
        }
        self.push(
            v,
            self.ng(x) || self.ng(row),
            Op::ReplaceRows {
                x,
                row,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        for mut row in v.outer_iter_mut() {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.mapv_inplace(|a| a / (n + eps));
        }
        self.push(v, self.ng(x), Op::L2NormalizeRows { x, eps })
    }

    pub fn scale_rows_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.value(s).ncols(), 1);
        let xv = self.value(x);
        let sv = self.value(s);
        let mut v = xv.clone();
        for (i, mut row) in v.outer_iter_mut().enumerate() {
            row.mapv_inplace(|a| a * sv[[i, 0]]);
        }
        self.push(v, self.ng(x) || self.ng(s), Op::ScaleRowsBy { x, s })
    }

    /// Inverted dropout; `mask` entries are 0 or 1/keep.
    pub fn dropout(&mut self, x: NodeId, mask: Matrix) -> NodeId {
        let v = self.value(x) * &mask;
        self.push(v, self.ng(x), Op::Dropout { x, mask })
    }

    /// Runs the reverse sweep from the given (node, upstream gradient) seeds
    /// and returns gradients for trainable parameter leaves.
    pub fn backward(&self, seeds: &[(NodeId, Matrix)]) -> GradMap {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            debug_assert_eq!(g.raw_dim(), self.value(*id).raw_dim());
            accumulate(&mut grads[id.0], g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g); // keep for extraction
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.ng(*a) {
                        let da = g.dot(self.value(*b));
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        let db = g.t().dot(self.value(*a));
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddBiasRow(x, b) => {
                    if self.ng(*b) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[b.0], db);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(x, c) => {
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], g * *c);
                    }
                }
                Op::Gelu(x) => {
                    if self.ng(*x) {
                        let dx = self.value(*x).mapv(gelu_grad) * &g;
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let d = xv.ncols() as f64;
                    let mut dx = Matrix::zeros(xv.raw_dim());
                    let mut dgamma = Matrix::zeros((1, xv.ncols()));
                    let mut dbeta = Matrix::zeros((1, xv.ncols()));
                    for (i, row) in xv.outer_iter().enumerate() {
                        let mu = row.sum() / d;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        let sigma = (var + eps).sqrt();
                        // xhat, dyhat, and their row means
                        let mut mean_dyh = 0.0;
                        let mut mean_dyh_xh = 0.0;
                        let n = row.len();
                        let mut xhat = vec![0.0; n];
                        let mut dyh = vec![0.0; n];
                        for j in 0..n {
                            xhat[j] = (row[j] - mu) / sigma;
                            dyh[j] = g[[i, j]] * gv[[0, j]];
                            mean_dyh += dyh[j];
                            mean_dyh_xh += dyh[j] * xhat[j];
                            dgamma[[0, j]] += g[[i, j]] * xhat[j];
                            dbeta[[0, j]] += g[[i, j]];
                        }
                        mean_dyh /= d;
                        mean_dyh_xh /= d;
                        for j in 0..n {
                            dx[[i, j]] = (dyh[j] - mean_dyh - xhat[j] * mean_dyh_xh) / sigma;
                        }
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.ng(*gamma) {
                        accumulate(&mut grads[gamma.0], dgamma);
                    }
                    if self.ng(*beta) {
                        accumulate(&mut grads[beta.0], dbeta);
                    }
                }
                Op::SoftmaxRows { x, scale } => {
                    if self.ng(*x) {
                        let y = self.value(NodeId(idx));
                        let mut dx = Matrix::zeros(y.raw_dim());
                        for i in 0..y.nrows() {
                            let mut dot = 0.0;
                            for j in 0..y.ncols() {
                                dot += g[[i, j]] * y[[i, j]];
                            }
                            for j in 0..y.ncols() {
                                dx[[i, j]] = scale * y[[i, j]] * (g[[i, j]] - dot);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.ng(p) {
                            let dp = g.slice(ndarray::s![at..at + n, ..]).to_owned();
                            accumulate(&mut grads[p.0], dp);
                        }
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        if self.ng(p) {
                            let dp = g.slice(ndarray::s![.., at..at + n]).to_owned();
                            accumulate(&mut grads[p.0], dp);
                        }
                        at += n;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    if self.ng(*x) {
                        let mut dx = Matrix::zeros(self.value(*x).raw_dim());
                        dx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(&g);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.ng(*x) {
                        let mut dx = Matrix::zeros(self.value(*x).raw_dim());
                        dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&g);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::ReplaceRows { x, row, indices } => {
                    if self.ng(*row) {
                        let mut dr = Matrix::zeros((1, g.ncols()));
                        for &i in indices {
                            for j in 0..g.ncols() {
                                dr[[0, j]] += g[[i, j]];
                            }
                        }
                        accumulate(&mut grads[row.0], dr);
                    }
                    if self.ng(*x) {
                        let mut dx = g;
                        for &i in indices {
                            dx.row_mut(i).fill(0.0);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::L2NormalizeRows { x, eps } => {
                    if self.ng(*x) {
                        let xv = self.value(*x);
                        let mut dx = Matrix::zeros(xv.raw_dim());
                        for (i, row) in xv.outer_iter().enumerate() {
                            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                            let denom = n + eps;
                            let mut dot = 0.0;
                            for j in 0..row.len() {
                                dot += row[j] * g[[i, j]];
                            }
                            for j in 0..row.len() {
                                let correction = if n > 1e-300 {
                                    row[j] * dot / (n * denom * denom)
                                } else {
                                    0.0
                                };
                                dx[[i, j]] = g[[i, j]] / denom - correction;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::ScaleRowsBy { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    if self.ng(*s) {
                        let mut ds = Matrix::zeros((xv.nrows(), 1));
                        for i in 0..xv.nrows() {
                            for j in 0..xv.ncols() {
                                ds[[i, 0]] += g[[i, j]] * xv[[i, j]];
                            }
                        }
                        accumulate(&mut grads[s.0], ds);
                    }
                    if self.ng(*x) {
                        let mut dx = g;
                        for (i, mut r) in dx.outer_iter_mut().enumerate() {
                            r.mapv_inplace(|a| a * sv[[i, 0]]);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.ng(*x) {
                        accumulate(&mut grads[x.0], g * mask);
                    }
                }
            }
        }

        let mut out = GradMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if node.needs_grad {
                    if let Some(g) = grads[idx].take() {
                        // A parameter may appear as several leaves (e.g. a tied
                        // tensor used by multiple views); sum contributions.
                        match out.get_mut(name) {
                            Some(acc) => *acc += &g,
                            None => {
                                out.insert(name.clone(), g);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// loss(params) = sum(W ⊙ f(params)); checks analytic vs central FD.
    fn fd_check<F>(param_shapes: &[(usize, usize)], f: F)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params: Vec<Matrix> = param_shapes.iter().map(|&(r, c)| randm(&mut rng, r, c)).collect();

        let build = |vals: &[Matrix]| -> (Graph, NodeId, Vec<NodeId>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = vals
                .iter()
                .enumerate()
                .map(|(i, v)| g.param(&format!("p{i}"), Arc::new(v.clone()), true))
                .collect();
            let out = f(&mut g, &ids);
            (g, out, ids)
        };

        let (g, out, _) = build(&params);
        let w = randm(&mut rng, g.value(out).nrows(), g.value(out).ncols());
        let loss = |vals: &[Matrix]| -> f64 {
            let (g, out, _) = build(vals);
            (g.value(out) * &w).sum()
        };
        let grads = g.backward(&[(out, w.clone())]);

        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = &grads[&format!("p{pi}")];
            for probe in 0..4.min(p.len()) {
                let (r, c) = (probe % p.nrows(), (probe * 7 + 1) % p.ncols());
                let mut plus = params.clone();
                plus[pi][[r, c]] += h;
                let mut minus = params.clone();
                minus[pi][[r, c]] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!(
                    (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                    "param {pi} [{r},{c}]: analytic {a} vs fd {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        fd_check(&[(3, 4), (4, 5), (3, 5)], |g, p| {
            let mm = g.matmul(p[0], p[1]);
            g.add(mm, p[2])
        });
    }

    #[test]
    fn matmul_nt_and_bias_gradients() {
        fd_check(&[(3, 4), (5, 4), (1, 5)], |g, p| {
            let mm = g.matmul_nt(p[0], p[1]);
            g.add_bias_row(mm, p[2])
        });
    }

    #[test]
    fn gelu_and_scale_gradients() {
        fd_check(&[(3, 4)], |g, p| {
            let s = g.scale(p[0], 1.7);
            g.gelu(s)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        fd_check(&[(3, 6), (1, 6), (1, 6)], |g, p| {
            g.layer_norm(p[0], p[1], p[2], 1e-6)
        });
    }

    #[test]
    fn softmax_gradients() {
        fd_check(&[(3, 5)], |g, p| g.softmax_rows(p[0], 0.7));
    }

    #[test]
    fn concat_slice_replace_gradients() {
        fd_check(&[(2, 4), (3, 4), (1, 4)], |g, p| {
            let cat = g.concat_rows(&[p[0], p[1]]);
            let rep = g.replace_rows(cat, p[2], &[1, 3]);
            g.slice_rows(rep, 1, 3)
        });
        fd_check(&[(3, 2), (3, 3)], |g, p| {
            let cat = g.concat_cols(&[p[0], p[1]]);
            g.slice_cols(cat, 1, 3)
        });
    }

    #[test]
    fn l2_normalize_and_scale_rows_gradients() {
        fd_check(&[(3, 4), (3, 1)], |g, p| {
            let n = g.l2_normalize_rows(p[0], 1e-6);
            g.scale_rows_by(n, p[1])
        });
    }

    #[test]
    fn frozen_leaves_get_no_entries() {
        let mut g = Graph::new();
        let a = g.param("a", Arc::new(Matrix::ones((2, 2))), true);
        let b = g.param("b", Arc::new(Matrix::ones((2, 2))), false);
        let out = g.matmul(a, b);
        let grads = g.backward(&[(out, Matrix::ones((2, 2)))]);
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
    }

    #[test]
    fn tied_parameter_grads_are_summed() {
        // loss = sum(a · aᵀ); d/da = 2a summed over both uses
        let mut g = Graph::new();
        let a = g.param("a", Arc::new(Matrix::from_shape_fn((2, 3), |(i, j)| (i + j) as f64)), true);
        let out = g.matmul_nt(a, a);
        let grads = g.backward(&[(out, Matrix::ones((2, 2)))]);
        let av = g.value(a).clone();
        // d sum(a aᵀ)/da with all-ones upstream = (1·1ᵀ)a + (1·1ᵀ)a
        let ones = Matrix::ones((2, 2));
        let expect = ones.dot(&av) + ones.t().dot(&av);
        let diff = (&grads["a"] - &expect).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
