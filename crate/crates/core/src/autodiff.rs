//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation records its inputs and enough
//! forward state to replay the chain rule once, in reverse. Tensors are
//! identified by [`Tid`] handles into the tape arena; parameters live
//! outside the graph in [`Param`] slots and are bound per forward pass.
//!
//! A graph and its tensors are confined to one thread; independent
//! training runs build independent graphs.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("backward already ran on this graph; build a fresh graph to differentiate again")]
    BackwardAlreadyRun,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor id {0} is not part of this graph")]
    Detached(usize),
    #[error("gradients are not populated for parameter '{0}'")]
    MissingGradient(String),
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// (e^x - 1) / x with the removable singularity filled in; used for
/// zero-order-hold discretization so the A -> 0 limit is exact.
fn expm1_over(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 + x / 2.0 + x * x / 6.0
    } else {
        x.exp_m1() / x
    }
}

fn expm1_over_deriv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        0.5 + x / 3.0 + x * x / 8.0
    } else {
        (x.exp() * (x - 1.0) + 1.0) / (x * x)
    }
}

const LAYER_NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    AddN(Vec<Tid>),
    Neg(Tid),
    Scale(Tid, f64),
    AddScalar(Tid),
    Exp(Tid),
    Log(Tid),
    Tanh(Tid),
    Sigmoid(Tid),
    Softplus(Tid),
    Expm1Over(Tid),
    MatVec(Tid, Tid),
    MatMul(Tid, Tid),
    Slice(Tid, usize, usize),
    Concat(Vec<Tid>),
    ReduceSum(Tid),
    LayerNorm {
        x: Tid,
        gamma: Tid,
        beta: Tid,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    ClipSt(Tid, f64, f64),
    Outer(Tid, Tid),
    RepeatInner(Tid, usize),
    SumInner(Tid),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// The tape. Operations are recorded in topological order by construction;
/// [`Graph::backward`] replays them exactly once.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Tid {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        Tid(self.nodes.len() - 1)
    }

    fn vals(&self, t: Tid) -> &[f64] {
        &self.nodes[t.0].values
    }

    fn requires(&self, t: Tid) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tid) -> &[f64] {
        self.vals(t)
    }

    pub fn scalar(&self, t: Tid) -> f64 {
        assert_eq!(
            self.nodes[t.0].values.len(),
            1,
            "scalar() on non-scalar tensor"
        );
        self.nodes[t.0].values[0]
    }

    /// Gradient of the backward root with respect to tensor `t`.
    /// Zero-length until [`Graph::backward`] has run.
    pub fn grad(&self, t: Tid) -> &[f64] {
        self.grads.get(t.0).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Leaf tensor that does not require gradients (data, targets).
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Tid {
        self.push(shape.to_vec(), values, false, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Tid {
        self.constant(&[1], vec![v])
    }

    /// Leaf tensor that accumulates gradients.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Tid {
        self.push(shape.to_vec(), values, true, Op::Leaf)
    }

    /// Bind a parameter's current value as a gradient-requiring leaf.
    pub fn param(&mut self, p: &Param) -> Tid {
        self.push(p.shape.clone(), p.value.clone(), true, Op::Leaf)
    }

    fn check_same_shape(&self, what: &str, a: Tid, b: Tid) {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(sa == sb, "{what}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        self.check_same_shape("add", a, b);
        let values = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(self.nodes[a.0].shape.clone(), values, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        self.check_same_shape("sub", a, b);
        let values = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(self.nodes[a.0].shape.clone(), values, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        self.check_same_shape("mul", a, b);
        let values = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        self.push(self.nodes[a.0].shape.clone(), values, rg, Op::Mul(a, b))
    }

    /// Elementwise sum of two or more same-shape tensors.
    pub fn add_n(&mut self, terms: &[Tid]) -> Tid {
        assert!(!terms.is_empty(), "add_n: empty term list");
        for &t in &terms[1..] {
            self.check_same_shape("add_n", terms[0], t);
        }
        let mut values = self.vals(terms[0]).to_vec();
        for &t in &terms[1..] {
            for (v, x) in values.iter_mut().zip(self.vals(t)) {
                *v += x;
            }
        }
        let rg = terms.iter().any(|&t| self.requires(t));
        self.push(
            self.nodes[terms[0].0].shape.clone(),
            values,
            rg,
            Op::AddN(terms.to_vec()),
        )
    }

    pub fn neg(&mut self, a: Tid) -> Tid {
        let values = self.vals(a).iter().map(|x| -x).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), values, rg, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let values = self.vals(a).iter().map(|x| c * x).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), values, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Tid, c: f64) -> Tid {
        let values = self.vals(a).iter().map(|x| x + c).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), values, rg, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Tid, f: impl Fn(f64) -> f64, op: Op) -> Tid {
        let values = self.vals(a).iter().map(|&x| f(x)).collect();
        let rg = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), values, rg, op)
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Tid) -> Tid {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Tid) -> Tid {
        self.unary(a, stable_softplus, Op::Softplus(a))
    }

    /// (e^x - 1)/x elementwise, exact at x = 0.
    pub fn expm1_over(&mut self, a: Tid) -> Tid {
        self.unary(a, expm1_over, Op::Expm1Over(a))
    }

    /// Matrix-vector product: `w` of shape [m, n] times `x` of shape [n].
    pub fn matvec(&mut self, w: Tid, x: Tid) -> Tid {
        let ws = self.nodes[w.0].shape.clone();
        let xs = self.nodes[x.0].shape.clone();
        assert!(
            ws.len() == 2 && xs.len() == 1 && ws[1] == xs[0],
            "matvec: shape mismatch {ws:?} vs {xs:?}"
        );
        let (m, n) = (ws[0], ws[1]);
        let wv = self.vals(w);
        let xv = self.vals(x);
        let mut values = vec![0.0; m];
        for i in 0..m {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xv[j];
            }
            values[i] = acc;
        }
        let rg = self.requires(w) || self.requires(x);
        self.push(vec![m], values, rg, Op::MatVec(w, x))
    }

    /// Matrix product: [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape mismatch {sa:?} vs {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.vals(a);
        let bv = self.vals(b);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let out = &mut values[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += aip * brow[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![m, n], values, rg, Op::MatMul(a, b))
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, a: Tid, start: usize, len: usize) -> Tid {
        let sa = self.nodes[a.0].shape.clone();
        assert!(
            sa.len() == 1 && start + len <= sa[0],
            "slice: [{start}, {start}+{len}) out of shape {sa:?}"
        );
        let values = self.vals(a)[start..start + len].to_vec();
        let rg = self.requires(a);
        self.push(vec![len], values, rg, Op::Slice(a, start, len))
    }

    /// Concatenation of 1-D tensors.
    pub fn concat(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty(), "concat: empty part list");
        let mut values = Vec::new();
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            assert!(sp.len() == 1, "concat: expected 1-D part, got shape {sp:?}");
            values.extend_from_slice(self.vals(p));
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        let n = values.len();
        self.push(vec![n], values, rg, Op::Concat(parts.to_vec()))
    }

    /// Sum of all elements, as a scalar.
    pub fn reduce_sum(&mut self, a: Tid) -> Tid {
        let total: f64 = self.vals(a).iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![total], rg, Op::ReduceSum(a))
    }

    /// Layer normalization over the whole tensor, then scale and shift:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid) -> Tid {
        self.check_same_shape("layer_norm(gamma)", x, gamma);
        self.check_same_shape("layer_norm(beta)", x, beta);
        let xv = self.vals(x);
        let n = xv.len() as f64;
        let mean = xv.iter().sum::<f64>() / n;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = xv.iter().map(|v| (v - mean) * inv_std).collect();
        let gv = self.vals(gamma);
        let bv = self.vals(beta);
        let values = xhat
            .iter()
            .zip(gv.iter().zip(bv))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            self.nodes[x.0].shape.clone(),
            values,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Clamp values to [lo, hi]; the gradient passes through unchanged
    /// where the input lies inside the interval and is zero outside.
    pub fn clip_straight_through(&mut self, a: Tid, lo: f64, hi: f64) -> Tid {
        assert!(lo < hi, "clip_straight_through: lo {lo} >= hi {hi}");
        let values = self.vals(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.requires(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            values,
            rg,
            Op::ClipSt(a, lo, hi),
        )
    }

    /// Outer product: [m] x [n] -> [m, n].
    pub fn outer(&mut self, a: Tid, b: Tid) -> Tid {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(
            sa.len() == 1 && sb.len() == 1,
            "outer: expected 1-D operands, got {sa:?} and {sb:?}"
        );
        let (m, n) = (sa[0], sb[0]);
        let av = self.vals(a);
        let bv = self.vals(b);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[i * n + j] = av[i] * bv[j];
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(vec![m, n], values, rg, Op::Outer(a, b))
    }

    /// Repeat each element of a [d] tensor n times: result shape [d, n].
    pub fn repeat_inner(&mut self, a: Tid, n: usize) -> Tid {
        let sa = self.nodes[a.0].shape.clone();
        assert!(
            sa.len() == 1,
            "repeat_inner: expected 1-D input, got {sa:?}"
        );
        let d = sa[0];
        let av = self.vals(a);
        let mut values = vec![0.0; d * n];
        for i in 0..d {
            for j in 0..n {
                values[i * n + j] = av[i];
            }
        }
        let rg = self.requires(a);
        self.push(vec![d, n], values, rg, Op::RepeatInner(a, n))
    }

    /// Sum over the inner axis of a [d, n] tensor: result shape [d].
    pub fn sum_inner(&mut self, a: Tid) -> Tid {
        let sa = self.nodes[a.0].shape.clone();
        assert!(sa.len() == 2, "sum_inner: expected 2-D input, got {sa:?}");
        let (d, n) = (sa[0], sa[1]);
        let av = self.vals(a);
        let mut values = vec![0.0; d];
        for i in 0..d {
            values[i] = av[i * n..(i + 1) * n].iter().sum();
        }
        let rg = self.requires(a);
        self.push(vec![d], values, rg, Op::SumInner(a))
    }

    /// Reverse pass from a scalar loss. Populates the gradient of every
    /// gradient-requiring tensor on the tape. A graph can run backward
    /// only once.
    pub fn backward(&mut self, loss: Tid) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::Detached(loss.0));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(
                self.nodes[loss.0].shape.clone(),
            ));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        self.grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = std::mem::take(&mut self.grads[i]);
            self.apply_backward(i, &gout);
            self.grads[i] = gout;
        }
        self.backward_done = true;
        Ok(())
    }

    #[allow(clippy::needless_range_loop)]
    fn apply_backward(&mut self, i: usize, g: &[f64]) {
        // Inputs always precede outputs on the tape, so indexing into
        // self.grads for inputs never aliases g (taken from slot i).
        macro_rules! acc {
            ($t:expr, $idx:expr, $val:expr) => {
                self.grads[$t.0][$idx] += $val;
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(a, k, gv);
                    }
                }
                if self.requires(b) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(b, k, gv);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(a, k, gv);
                    }
                }
                if self.requires(b) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(b, k, -gv);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let bv = self.nodes[b.0].values[k];
                        acc!(a, k, gv * bv);
                    }
                }
                if self.requires(b) {
                    for (k, gv) in g.iter().enumerate() {
                        let av = self.nodes[a.0].values[k];
                        acc!(b, k, gv * av);
                    }
                }
            }
            Op::AddN(terms) => {
                for &t in terms.clone().iter() {
                    if self.requires(t) {
                        for (k, gv) in g.iter().enumerate() {
                            acc!(t, k, gv);
                        }
                    }
                }
            }
            &Op::Neg(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(a, k, -gv);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(a, k, c * gv);
                    }
                }
            }
            &Op::AddScalar(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(a, k, gv);
                    }
                }
            }
            &Op::Exp(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let out = self.nodes[i].values[k];
                        acc!(a, k, gv * out);
                    }
                }
            }
            &Op::Log(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let av = self.nodes[a.0].values[k];
                        acc!(a, k, gv / av);
                    }
                }
            }
            &Op::Tanh(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let out = self.nodes[i].values[k];
                        acc!(a, k, gv * (1.0 - out * out));
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let out = self.nodes[i].values[k];
                        acc!(a, k, gv * out * (1.0 - out));
                    }
                }
            }
            &Op::Softplus(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let av = self.nodes[a.0].values[k];
                        acc!(a, k, gv * stable_sigmoid(av));
                    }
                }
            }
            &Op::Expm1Over(a) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let av = self.nodes[a.0].values[k];
                        acc!(a, k, gv * expm1_over_deriv(av));
                    }
                }
            }
            &Op::MatVec(w, x) => {
                let n = self.nodes[x.0].shape[0];
                let m = g.len();
                if self.requires(w) {
                    for ii in 0..m {
                        let gi = g[ii];
                        if gi != 0.0 {
                            for j in 0..n {
                                let xv = self.nodes[x.0].values[j];
                                acc!(w, ii * n + j, gi * xv);
                            }
                        }
                    }
                }
                if self.requires(x) {
                    for ii in 0..m {
                        let gi = g[ii];
                        if gi != 0.0 {
                            for j in 0..n {
                                let wv = self.nodes[w.0].values[ii * n + j];
                                acc!(x, j, gi * wv);
                            }
                        }
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let k_dim = self.nodes[a.0].shape[1];
                let m = self.nodes[a.0].shape[0];
                let n = self.nodes[b.0].shape[1];
                if self.requires(a) {
                    // ga = g . b^T
                    for ii in 0..m {
                        for p in 0..k_dim {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[ii * n + j] * self.nodes[b.0].values[p * n + j];
                            }
                            acc!(a, ii * k_dim + p, acc);
                        }
                    }
                }
                if self.requires(b) {
                    // gb = a^T . g
                    for p in 0..k_dim {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for ii in 0..m {
                                acc += self.nodes[a.0].values[ii * k_dim + p] * g[ii * n + j];
                            }
                            acc!(b, p * n + j, acc);
                        }
                    }
                }
            }
            &Op::Slice(a, start, len) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate().take(len) {
                        acc!(a, start + k, gv);
                    }
                }
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for t in parts {
                    let len = self.nodes[t.0].values.len();
                    if self.requires(t) {
                        for (k, gv) in g[offset..offset + len].iter().enumerate() {
                            acc!(t, k, gv);
                        }
                    }
                    offset += len;
                }
            }
            &Op::ReduceSum(a) => {
                if self.requires(a) {
                    let gv = g[0];
                    let len = self.nodes[a.0].values.len();
                    for k in 0..len {
                        acc!(a, k, gv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta, inv_std) = (*x, *gamma, *beta, *inv_std);
                let xhat = xhat.clone();
                let n = g.len();
                let nf = n as f64;
                if self.requires(gamma) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(gamma, k, gv * xhat[k]);
                    }
                }
                if self.requires(beta) {
                    for (k, gv) in g.iter().enumerate() {
                        acc!(beta, k, gv);
                    }
                }
                if self.requires(x) {
                    let gxhat: Vec<f64> = (0..n)
                        .map(|k| g[k] * self.nodes[gamma.0].values[k])
                        .collect();
                    let mean_g = gxhat.iter().sum::<f64>() / nf;
                    let mean_gx = gxhat.iter().zip(&xhat).map(|(gk, hk)| gk * hk).sum::<f64>() / nf;
                    for k in 0..n {
                        acc!(x, k, inv_std * (gxhat[k] - mean_g - xhat[k] * mean_gx));
                    }
                }
            }
            &Op::ClipSt(a, lo, hi) => {
                if self.requires(a) {
                    for (k, gv) in g.iter().enumerate() {
                        let av = self.nodes[a.0].values[k];
                        if (lo..=hi).contains(&av) {
                            acc!(a, k, gv);
                        }
                    }
                }
            }
            &Op::Outer(a, b) => {
                let m = self.nodes[a.0].shape[0];
                let n = self.nodes[b.0].shape[0];
                if self.requires(a) {
                    for ii in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[ii * n + j] * self.nodes[b.0].values[j];
                        }
                        acc!(a, ii, acc);
                    }
                }
                if self.requires(b) {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for ii in 0..m {
                            acc += g[ii * n + j] * self.nodes[a.0].values[ii];
                        }
                        acc!(b, j, acc);
                    }
                }
            }
            &Op::RepeatInner(a, n) => {
                if self.requires(a) {
                    let d = self.nodes[a.0].shape[0];
                    for ii in 0..d {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[ii * n + j];
                        }
                        acc!(a, ii, acc);
                    }
                }
            }
            &Op::SumInner(a) => {
                if self.requires(a) {
                    let n = self.nodes[a.0].shape[1];
                    for (ii, gv) in g.iter().enumerate() {
                        for j in 0..n {
                            acc!(a, ii * n + j, gv);
                        }
                    }
                }
            }
        }
    }
}

/// A named learnable tensor with its gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub grad_ready: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Self {
        assert_eq!(numel(shape), value.len(), "param value length mismatch");
        let n = value.len();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
            grad_ready: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.grad_ready = false;
    }
}

/// Copy tape gradients back into parameter slots after a backward pass.
/// `binding` pairs each parameter index with the leaf it was bound to.
pub fn accumulate_grads(params: &mut [Param], graph: &Graph, binding: &[(usize, Tid)]) {
    for &(pi, tid) in binding {
        let g = graph.grad(tid);
        let p = &mut params[pi];
        for (slot, gv) in p.grad.iter_mut().zip(g) {
            *slot += gv;
        }
        p.grad_ready = true;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators for Adam, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Consumes and clears gradients.
pub fn adam_step(
    params: &mut [Param],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    for p in params.iter() {
        if !p.grad_ready {
            return Err(AutodiffError::MissingGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for k in 0..p.value.len() {
            let g = p.grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p.value[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for k in 0..x.len() {
            let orig = xp[k];
            xp[k] = orig + h;
            let fp = f(&xp);
            xp[k] = orig - h;
            let fm = f(&xp);
            xp[k] = orig;
            grad[k] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![0.0]);
        let y = g.softplus(x);
        g.backward(y).unwrap();
        assert!((g.grad(x)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let wt = g.leaf(&[16], w.clone());
        let sq = g.mul(wt, wt);
        let loss = g.reduce_sum(sq);
        g.backward(loss).unwrap();
        for (gv, wv) in g.grad(wt).iter().zip(&w) {
            assert_eq!(*gv, 2.0 * wv);
        }
    }

    #[test]
    fn reduce_sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&[5], vec![1.0, -2.0, 3.0, 0.0, 7.0]);
        let s = g.reduce_sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0; 5]);
    }

    #[test]
    fn grad_is_empty_before_backward() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]);
        assert!(g.grad(x).is_empty());
    }

    #[test]
    fn detached_loss_is_error() {
        let mut g1 = Graph::new();
        let a = g1.leaf(&[1], vec![1.0]);
        let b = g1.mul(a, a);
        let c = g1.mul(b, b);
        let mut g2 = Graph::new();
        let _ = g2.leaf(&[1], vec![1.0]);
        assert!(matches!(g2.backward(c), Err(AutodiffError::Detached(_))));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let w = g.leaf(&[3], vec![1.0, 2.0, 3.0]);
        let c = g.constant_scalar(5.0);
        g.backward(c).unwrap();
        assert_eq!(g.grad(w), &[0.0; 3]);
    }

    #[test]
    fn repeated_backward_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![2.0]);
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(AutodiffError::BackwardAlreadyRun));
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]);
        assert!(matches!(
            g.backward(x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn elementwise_shape_mismatch_panics() {
        let mut g = Graph::new();
        let a = g.leaf(&[2], vec![1.0, 2.0]);
        let b = g.leaf(&[3], vec![1.0, 2.0, 3.0]);
        let _ = g.add(a, b);
    }

    #[test]
    fn matmul_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Loss: weighted sum of the 4x3 product so every entry matters.
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |av: &[f64], bv: &[f64]| {
            let mut g = Graph::new();
            let at = g.leaf(&[4, 5], av.to_vec());
            let bt = g.leaf(&[5, 3], bv.to_vec());
            let prod = g.matmul(at, bt);
            let wt = g.constant(&[4, 3], w.clone());
            let weighted = g.mul(prod, wt);
            let loss = g.reduce_sum(weighted);
            (g, at, bt, loss)
        };
        let (mut g, at, bt, loss) = run(&a, &b);
        g.backward(loss).unwrap();
        let ga = g.grad(at).to_vec();
        let gb = g.grad(bt).to_vec();

        let fa = |av: &[f64]| {
            let (g, _, _, loss) = run(av, &b);
            g.scalar(loss)
        };
        let fb = |bv: &[f64]| {
            let (g, _, _, loss) = run(&a, bv);
            g.scalar(loss)
        };
        let na = central_diff(fa, &a, 1e-5);
        let nb = central_diff(fb, &b, 1e-5);
        for (an, num) in ga.iter().zip(&na) {
            assert!((an - num).abs() / num.abs().max(1e-3) < 1e-6);
        }
        for (an, num) in gb.iter().zip(&nb) {
            assert!((an - num).abs() / num.abs().max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One composite expression touching every differentiable primitive.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let w: Vec<f64> = (0..24).map(|_| rng.random_range(-0.7..0.7)).collect();
            let gamma: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
            let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();

            let run = |xv: &[f64], wv: &[f64], gv: &[f64], bv: &[f64]| {
                let mut g = Graph::new();
                let xt = g.leaf(&[6], xv.to_vec());
                let wt = g.leaf(&[4, 6], wv.to_vec());
                let gt = g.leaf(&[6], gv.to_vec());
                let bt = g.leaf(&[6], bv.to_vec());
                let ln = g.layer_norm(xt, gt, bt);
                let mv = g.matvec(wt, ln);
                let sp = g.softplus(mv);
                let tg = g.tanh(sp);
                let sg = g.sigmoid(tg);
                let lg = g.add_scalar(sg, 1.0);
                let lg = g.log(lg);
                let ex = g.exp(lg);
                let eo = g.expm1_over(ex);
                let sc = g.scale(eo, 1.7);
                let ng = g.neg(sc);
                let half_a = g.slice(ng, 0, 2);
                let half_b = g.slice(ng, 2, 2);
                let joined = g.concat(&[half_a, half_b]);
                let prod = g.mul(joined, joined);
                let diff = g.sub(prod, joined);
                let rep = g.repeat_inner(diff, 3);
                let si = g.sum_inner(rep);
                let ot = g.outer(si, si);
                let ssum = g.sum_inner(ot);
                let total = g.add_n(&[ssum, si]);
                let loss = g.reduce_sum(total);
                (g, xt, wt, gt, bt, loss)
            };

            let (mut g, xt, wt, gt, bt, loss) = run(&x, &w, &gamma, &beta);
            g.backward(loss).unwrap();
            let analytic: Vec<Vec<f64>> = vec![
                g.grad(xt).to_vec(),
                g.grad(wt).to_vec(),
                g.grad(gt).to_vec(),
                g.grad(bt).to_vec(),
            ];
            let inputs: Vec<Vec<f64>> = vec![x.clone(), w.clone(), gamma.clone(), beta.clone()];
            for (which, input) in inputs.iter().enumerate() {
                let f = |v: &[f64]| {
                    let args: Vec<&[f64]> = (0..4)
                        .map(|i| if i == which { v } else { inputs[i].as_slice() })
                        .collect();
                    let (g, _, _, _, _, loss) = run(args[0], args[1], args[2], args[3]);
                    g.scalar(loss)
                };
                let numeric = central_diff(f, input, 1e-5);
                for (an, num) in analytic[which].iter().zip(&numeric) {
                    let denom = num.abs().max(1e-4);
                    assert!(
                        (an - num).abs() / denom < 1e-4,
                        "input {which}: analytic {an} vs numeric {num}"
                    );
                }
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_before_scale_shift() {
        let mut g = Graph::new();
        let x = g.leaf(&[8], vec![0.4, -1.2, 2.2, 0.9, -0.3, 1.4, -2.0, 0.1]);
        let ones = g.constant(&[8], vec![1.0; 8]);
        let zeros = g.constant(&[8], vec![0.0; 8]);
        let y = g.layer_norm(x, ones, zeros);
        let v = g.value(y);
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn clip_straight_through_gradient_mask() {
        let mut g = Graph::new();
        let x = g.leaf(&[4], vec![-12.0, -9.0, 0.3, 2.5]);
        let y = g.clip_straight_through(x, -9.0, 1.5);
        assert_eq!(g.value(y), &[-9.0, -9.0, 0.3, 1.5]);
        let s = g.reduce_sum(y);
        g.backward(s).unwrap();
        // Zero outside, identity inside (boundary counts as inside).
        assert_eq!(g.grad(x), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn expm1_over_limit_and_value() {
        let mut g = Graph::new();
        let x = g.leaf(&[3], vec![0.0, 1.0, -0.5]);
        let y = g.expm1_over(x);
        let v = g.value(y);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (1.0f64.exp() - 1.0)).abs() < 1e-15);
        assert!((v[2] - ((-0.5f64).exp_m1() / -0.5)).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(&[4], vec![0.3, 1.7, -0.2, 0.9]);
            let e = g.exp(x);
            let t = g.tanh(e);
            let s = g.reduce_sum(t);
            g.scalar(s)
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn adam_single_step_moves_by_lr() {
        // f(w) = w^2 from w = 1: Adam's normalized step is ~lr toward 0.
        let mut params = vec![Param::new("w", &[1], vec![1.0])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        params[0].grad = vec![2.0];
        params[0].grad_ready = true;
        adam_step(&mut params, &mut state, &cfg).unwrap();
        assert!((params[0].value[0] - 0.9).abs() < 1e-6);
        assert!(!params[0].grad_ready);
        assert_eq!(params[0].grad[0], 0.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut params = vec![Param::new("w", &[2], vec![1.0, -3.0])];
        let mut state = AdamState::new(&params);
        params[0].grad_ready = true;
        adam_step(&mut params, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params[0].value, vec![1.0, -3.0]);
    }

    #[test]
    fn adam_missing_gradient_is_error() {
        let mut params = vec![Param::new("w", &[1], vec![1.0])];
        let mut state = AdamState::new(&params);
        assert!(matches!(
            adam_step(&mut params, &mut state, &AdamConfig::default()),
            Err(AutodiffError::MissingGradient(_))
        ));
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        let mut params = vec![Param::new("w", &[3], vec![1.0, -2.0, 0.5])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(&params[0]);
            let sq = g.mul(w, w);
            let loss = g.reduce_sum(sq);
            g.backward(loss).unwrap();
            accumulate_grads(&mut params, &g, &[(0, w)]);
            adam_step(&mut params, &mut state, &cfg).unwrap();
        }
        for v in &params[0].value {
            assert!(v.abs() < 1e-3, "w = {v}");
        }
    }
}
