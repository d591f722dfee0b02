//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass together with
//! the primitive that produced it. Handles into the tape are plain [`Var`]
//! indices, so a forward pass is ordinary method calls on the tape:
//!
//! ```
//! use ibg_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```
//!
//! Gradients accumulate across repeated [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called. A tape is single-threaded; run one tape per
//! worker for parallel workloads.

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading extent; vectors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Activation, Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GaussianKl {
        mu: Var,
        log_sigma: Var,
    },
}

/// Ordered record of primitive operations; nodes are appended in
/// topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Records an input tensor. Non-finite data is rejected here so every
    /// downstream value stays finite for inputs in range.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("tape leaf"));
        }
        Ok(self.push(value, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient of the last backward roots w.r.t. `v`, if `v`
    /// participated in any of them.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.values[v.0].shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.shape[1] != vb.shape[0] {
            return Err(Error::dim("matmul", &va.shape, &vb.shape));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let out = matmul_kernel(&va.data, &vb.data, m, k, n);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
        ))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::dim("elementwise", &va.shape, &vb.shape));
        }
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// Adds vector `bias` (length n) to every row of the `m×n` matrix `a`.
    /// This is the only broadcasting form the engine supports.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if !va.is_matrix() || vb.shape.len() != 1 || vb.shape[0] != va.shape[1] {
            return Err(Error::dim("add_row", &va.shape, &vb.shape));
        }
        let n = va.shape[1];
        let data = va.data.iter().enumerate().map(|(i, x)| x + vb.data[i % n]).collect();
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, bias)))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * c).collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .map(|&x| match kind {
                Activation::Tanh => x.tanh(),
                Activation::Relu => x.max(0.0),
                Activation::Exp => x.exp(),
            })
            .collect();
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, Op::Act(kind, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Exp)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = va.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = va.shape.clone();
        self.push(Tensor { shape, data }, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(Error::dim("transpose", &va.shape, &[]));
        }
        let (m, n) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data[i * n + j];
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::Transpose(a),
        ))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if !vt.is_matrix() {
            return Err(Error::dim("gather_rows", &vt.shape, &[]));
        }
        let (rows, cols) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "row",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor {
            shape: vec![ids.len(), cols],
            data,
        };
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Mean negative log-probability of `labels` under row-wise softmax of
    /// `logits` (`m×C`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if !vl.is_matrix() || vl.shape[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &vl.shape, &[labels.len()]));
        }
        let (m, c) = (vl.shape[0], vl.shape[1]);
        let mut probs = vl.data.clone();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    what: "label",
                    index: label,
                    bound: c,
                });
            }
            let row = &vl.data[r * c..(r + 1) * c];
            total += log_sum_exp(row) - row[label];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total / m as f64), op))
    }

    /// KL divergence between diagonal Gaussians N(mu, exp(log_sigma)^2) and
    /// the standard normal, summed over the trailing dimension and averaged
    /// over rows.
    pub fn gaussian_kl(&mut self, mu: Var, log_sigma: Var) -> Result<Var> {
        let (vm, vs) = (self.value(mu), self.value(log_sigma));
        if vm.shape != vs.shape {
            return Err(Error::dim("gaussian_kl", &vm.shape, &vs.shape));
        }
        let rows = vm.rows() as f64;
        let total: f64 = vm
            .data
            .iter()
            .zip(&vs.data)
            .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0))
            .sum();
        Ok(self.push(Tensor::scalar(total / rows), Op::GaussianKl { mu, log_sigma }))
    }

    /// Propagates d(root)/d(node) to every node that `root` depends on and
    /// adds the result into the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape
            )));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite("backward root"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(stored) => stored.iter_mut().zip(&g).for_each(|(s, x)| *s += x),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, node: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = &self.values[node];
        match &self.ops[node] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = matmul_a_bt(g, &vb.data, m, n, k);
                add_into(slot(adj, *a, m * k), &ga);
                let gb = matmul_at_b(&va.data, g, m, k, n);
                add_into(slot(adj, *b, k * n), &gb);
            }
            Op::Binary(kind, a, b) => {
                let n = g.len();
                match kind {
                    BinaryKind::Add => {
                        add_into(slot(adj, *a, n), g);
                        add_into(slot(adj, *b, n), g);
                    }
                    BinaryKind::Sub => {
                        add_into(slot(adj, *a, n), g);
                        let sb = slot(adj, *b, n);
                        sb.iter_mut().zip(g).for_each(|(s, x)| *s -= x);
                    }
                    BinaryKind::Mul => {
                        let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                        let sa = slot(adj, *a, n);
                        for i in 0..n {
                            sa[i] += g[i] * vb[i];
                        }
                        let sb = slot(adj, *b, n);
                        for i in 0..n {
                            sb[i] += g[i] * va[i];
                        }
                    }
                }
            }
            Op::AddRow(a, bias) => {
                add_into(slot(adj, *a, g.len()), g);
                let n = self.value(*bias).len();
                let sb = slot(adj, *bias, n);
                for row in g.chunks(n) {
                    add_into(sb, row);
                }
            }
            Op::Scale(a, c) => {
                let sa = slot(adj, *a, g.len());
                sa.iter_mut().zip(g).for_each(|(s, x)| *s += c * x);
            }
            Op::Act(kind, a) => {
                let x = &self.value(*a).data;
                let y = &out.data;
                let sa = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Activation::Tanh => 1.0 - y[i] * y[i],
                        Activation::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Exp => y[i],
                    };
                    sa[i] += g[i] * d;
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let sa = slot(adj, *a, g.len());
                for ((y, gr), s) in out.data.chunks(cols).zip(g.chunks(cols)).zip(sa.chunks_mut(cols)) {
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        s[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Transpose(a) => {
                // out is n×m, input m×n
                let (n, m) = (out.shape[0], out.shape[1]);
                let sa = slot(adj, *a, g.len());
                for i in 0..m {
                    for j in 0..n {
                        sa[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.cols();
                let st = slot(adj, *table, vt.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut st[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                slot(adj, *a, n).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let m = labels.len();
                let c = probs.len() / m;
                let scale = g[0] / m as f64;
                let sl = slot(adj, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        sl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::GaussianKl { mu, log_sigma } => {
                let vm = self.value(*mu);
                let vs = self.value(*log_sigma);
                let scale = g[0] / vm.rows() as f64;
                let n = vm.len();
                let sm = slot(adj, *mu, n);
                for (a, m) in sm.iter_mut().zip(&vm.data) {
                    *a += scale * m;
                }
                let ss = slot(adj, *log_sigma, n);
                for (a, ls) in ss.iter_mut().zip(&vs.data) {
                    *a += scale * ((2.0 * ls).exp() - 1.0);
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

// G (m×n) · Bᵀ where B is k×n → m×k
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// Aᵀ (k×m) · G (m×n) → k×n
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * grow[j];
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
