//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes only ever
//! reference earlier nodes, so the tape is a topological order by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters are borrowed rather than copied, which keeps a forward pass
//! over a few million weights cheap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
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

    /// Rows of a 2D tensor; a 1D tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    /// `[n, m] * [n, 1]`, each row scaled by its own factor.
    ScaleRows(Var, Var),
    Mul(Var, Var),
    /// Max over consecutive groups of `group` rows; stores the winning row per output entry.
    MaxPoolRows { input: Var, argmax: Vec<usize> },
    /// Elementwise max; `true` where the first input won (ties included).
    Maximum { a: Var, b: Var, took_a: Vec<bool> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { input: Var, start: usize },
    SelectRows { input: Var, rows: Vec<usize> },
    RepeatRows(Var),
    SumRows(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    AddScalars(Vec<Var>),
    /// Scalar with a gradient linearized at forward time (`d out / d input`).
    Linearized { input: Var, grad: Vec<f64> },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

/// Gradient buffers indexed by node, as returned by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached `v` (it does not influence the loss,
    /// or does not require one).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    check_finite: bool,
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    // single-row and rank-one products skip the packing step, which
    // dominates for wide decoder layers
    if k == 1 {
        for i in 0..m {
            let ai = a[i * rsa as usize];
            for (j, cj) in c[i * n..(i + 1) * n].iter_mut().enumerate() {
                *cj += ai * b[j * csb as usize];
            }
        }
        return;
    }
    if m == 1 && csb == 1 {
        let c = &mut c[..n];
        for kk in 0..k {
            let av = a[kk * csa as usize];
            let row = &b[kk * rsb as usize..kk * rsb as usize + n];
            for (cj, bj) in c.iter_mut().zip(row) {
                *cj += av * bj;
            }
        }
        return;
    }
    if m == 1 && rsb == 1 && csa == 1 {
        let a = &a[..k];
        for (j, cj) in c[..n].iter_mut().enumerate() {
            let col = &b[j * csb as usize..j * csb as usize + k];
            *cj += a.iter().zip(col).map(|(x, y)| x * y).sum::<f64>();
        }
        return;
    }
    // SAFETY: the caller passes buffers whose extents match (m, k, n) and the
    // strides; c is a dense row-major m x n block that does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panic on the first non-finite op output (test instrumentation).
    pub fn with_finite_check(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.check_finite {
            if let Some(bad) = value.data.iter().find(|x| !x.is_finite()) {
                panic!("non-finite value {bad} produced by node {}", self.nodes.len());
            }
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf borrowed from the parameter store.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf that requires a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(k, tb.rows(), "matmul inner dims {:?} x {:?}", ta.shape, tb.shape);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, (k as isize, 1), &tb.data, (n as isize, 1), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), ng)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        assert_eq!(tb.len(), n, "bias length");
        let mut out = tx.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let shape = tx.shape.clone();
        let ng = self.ng(x) || self.ng(bias);
        self.push(Tensor { shape, data: out }, Op::AddRowBias(x, bias), ng)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add operand sizes");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "mul operand sizes");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Mul(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = t.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::Sigmoid(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| v * s).collect();
        let shape = t.shape.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape, data }, Op::Scale(x, s), ng)
    }

    /// Multiplies row `r` of `x` by `factors[r]` (`factors` is `[rows, 1]`).
    pub fn scale_rows(&mut self, x: Var, factors: Var) -> Var {
        let (tx, tf) = (self.value(x), self.value(factors));
        assert_eq!(tf.len(), tx.rows(), "one factor per row");
        let n = tx.cols();
        let mut data = tx.data.clone();
        for (row, f) in data.chunks_exact_mut(n).zip(&tf.data) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let shape = tx.shape.clone();
        let ng = self.ng(x) || self.ng(factors);
        self.push(Tensor { shape, data }, Op::ScaleRows(x, factors), ng)
    }

    /// Channel-wise max over each consecutive block of `group` rows:
    /// `[g * group, m] -> [g, m]`. The first maximal row wins ties.
    pub fn max_pool_rows(&mut self, x: Var, group: usize) -> Var {
        let t = self.value(x);
        let (rows, m) = (t.rows(), t.cols());
        assert!(group > 0 && rows % group == 0, "rows {rows} not divisible by group {group}");
        let groups = rows / group;
        let mut out = vec![f64::NEG_INFINITY; groups * m];
        let mut argmax = vec![0usize; groups * m];
        for g in 0..groups {
            let o = &mut out[g * m..(g + 1) * m];
            let am = &mut argmax[g * m..(g + 1) * m];
            for r in g * group..(g + 1) * group {
                let row = &t.data[r * m..(r + 1) * m];
                for c in 0..m {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        am[c] = r;
                    }
                }
            }
        }
        // rows of -inf never win; make argmax point somewhere valid
        for g in 0..groups {
            for c in 0..m {
                if out[g * m + c] == f64::NEG_INFINITY {
                    argmax[g * m + c] = g * group;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor { shape: vec![groups, m], data: out },
            Op::MaxPoolRows { input: x, argmax },
            ng,
        )
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "maximum operand sizes");
        let took_a: Vec<bool> = ta.data.iter().zip(&tb.data).map(|(x, y)| x >= y).collect();
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| if x >= y { *x } else { *y }).collect();
        let shape = ta.shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor { shape, data }, Op::Maximum { a, b, took_a }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor { shape: vec![rows, total], data }, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let m = t.cols();
        assert!(start + len <= t.rows(), "slice out of range");
        let data = t.data[start * m..(start + len) * m].to_vec();
        let ng = self.ng(x);
        self.push(Tensor { shape: vec![len, m], data }, Op::SliceRows { input: x, start }, ng)
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let m = t.cols();
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(&t.data[r * m..(r + 1) * m]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor { shape: vec![rows.len(), m], data },
            Op::SelectRows { input: x, rows: rows.to_vec() },
            ng,
        )
    }

    /// `[1, m] -> [times, m]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), 1, "repeat_rows expects a single row");
        let m = t.cols();
        let data = t.data.repeat(times);
        let ng = self.ng(x);
        self.push(Tensor { shape: vec![times, m], data }, Op::RepeatRows(x), ng)
    }

    /// `[n, m] -> [1, m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.cols();
        let mut data = vec![0.0; m];
        for row in t.data.chunks_exact(m) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor { shape: vec![1, m], data }, Op::SumRows(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(shape.iter().product::<usize>(), t.len(), "reshape size");
        let data = t.data.clone();
        let ng = self.ng(x);
        self.push(Tensor { shape: shape.to_vec(), data }, Op::Reshape(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Var {
        let mut s = 0.0;
        for &x in xs {
            let t = self.value(x);
            assert!(t.is_scalar(), "add_scalars expects scalars");
            s += t.item();
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::scalar(s), Op::AddScalars(xs.to_vec()), ng)
    }

    /// A scalar `value` depending on `input` through the fixed local
    /// gradient `grad` (same length as the input). Used for losses whose
    /// derivative is determined by a discrete selection made during the
    /// forward pass, such as nearest-neighbour matching.
    pub fn linearized(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.value(input).len(), "linearized gradient size");
        let ng = self.ng(input);
        self.push(Tensor::scalar(value), Op::Linearized { input, grad }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(&self.value(v).shape));
        }
        f(&mut slot.as_mut().unwrap().data);
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = &g.data;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC B^T
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, gd, (n as isize, 1), &tb.data, (1, n as isize), ga, true)
                });
                // dB = A^T dC
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, n, &ta.data, (1, k as isize), gd, (n as isize, 1), gb, true)
                });
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
                let n = self.value(*b).len();
                self.accumulate(grads, *b, |gb| {
                    for row in gd.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(gd).zip(&tb.data) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(gd).zip(&ta.data) {
                        *o += gv * av;
                    }
                });
            }
            Op::Relu(x) => {
                let out = self.nodes[id].value.get();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(gd).zip(&out.data) {
                        if *y > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[id].value.get();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gv), y) in gx.iter_mut().zip(gd).zip(&out.data) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, gv) in gx.iter_mut().zip(gd) {
                        *o += gv * s;
                    }
                });
            }
            Op::ScaleRows(x, f) => {
                let (tx, tf) = (self.value(*x), self.value(*f));
                let n = tx.cols();
                self.accumulate(grads, *x, |gx| {
                    for ((orow, grow), fv) in gx.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(&tf.data) {
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += gv * fv;
                        }
                    }
                });
                self.accumulate(grads, *f, |gf| {
                    for ((o, grow), xrow) in gf.iter_mut().zip(gd.chunks_exact(n)).zip(tx.data.chunks_exact(n)) {
                        *o += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MaxPoolRows { input, argmax } => {
                let m = self.value(*input).cols();
                self.accumulate(grads, *input, |gx| {
                    for (j, (&r, gv)) in argmax.iter().zip(gd).enumerate() {
                        gx[r * m + j % m] += gv;
                    }
                });
            }
            Op::Maximum { a, b, took_a } => {
                self.accumulate(grads, *a, |ga| {
                    for ((o, gv), &t) in ga.iter_mut().zip(gd).zip(took_a) {
                        if t {
                            *o += gv;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gv), &t) in gb.iter_mut().zip(gd).zip(took_a) {
                        if !t {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &gd[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { input, start } => {
                let m = self.value(*input).cols();
                self.accumulate(grads, *input, |gx| add_into(&mut gx[start * m..start * m + gd.len()], gd));
            }
            Op::SelectRows { input, rows } => {
                let m = self.value(*input).cols();
                self.accumulate(grads, *input, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * m..(r + 1) * m], &gd[k * m..(k + 1) * m]);
                    }
                });
            }
            Op::RepeatRows(x) => {
                let m = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for row in gd.chunks_exact(m) {
                        add_into(gx, row);
                    }
                });
            }
            Op::SumRows(x) => {
                let m = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for row in gx.chunks_exact_mut(m) {
                        add_into(row, gd);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, gd)),
            Op::SumAll(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::MeanAll(x) => {
                let s = gd[0] / self.value(*x).len() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::AddScalars(xs) => {
                for &x in xs {
                    self.accumulate(grads, x, |gx| gx[0] += gd[0]);
                }
            }
            Op::Linearized { input, grad } => {
                let s = gd[0];
                self.accumulate(grads, *input, |gx| {
                    for (o, l) in gx.iter_mut().zip(grad) {
                        *o += s * l;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.variable(Tensor::scalar(3.0));
        let z = g.mul(x, y);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(4.0));
        let x = g.variable(Tensor::scalar(1.5));
        let z = g.mul(c, x);
        let grads = g.backward(z).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn max_pool_ties_pick_first_row() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::matrix(3, 2, vec![1.0, 5.0, 1.0, 2.0, 0.0, 5.0]).unwrap());
        let p = g.max_pool_rows(x, 3);
        assert_eq!(g.value(p).data(), &[1.0, 5.0]);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maximum_ties_route_to_first() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap());
        let b = g.variable(Tensor::new(vec![3], vec![1.0, 3.0, -2.0]).unwrap());
        let m = g.maximum(a, b);
        assert_eq!(g.value(m).data(), &[1.0, 3.0, -1.0]);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    /// Builds a scalar through every op and checks it against central differences.
    fn composite(g: &mut Graph<'_>, a: Var, w: Var, b: Var, f: Var) -> Var {
        let h = g.linear(a, w, Some(b)); // [6, 4]
        let h = g.sigmoid(h);
        let h2 = g.relu(h);
        let sc = g.scale_rows(h2, f);
        let mx = g.max_pool_rows(sc, 3); // [2, 4]
        let sel = g.select_rows(sc, &[5, 0, 2]);
        let sr = g.sum_rows(sel); // [1, 4]
        let rep = g.repeat_rows(sr, 2); // [2, 4]
        let m = g.maximum(mx, rep);
        let cc = g.concat_cols(&[m, rep]); // [2, 8]
        let cr = g.concat_rows(&[cc, cc]); // [4, 8]
        let sl = g.slice_rows(cr, 1, 2);
        let rs = g.reshape(sl, &[4, 4]);
        let pr = g.mul(rs, rs);
        let ad = g.add(pr, rs);
        let sc2 = g.scale(ad, 0.7);
        let s1 = g.sum(sc2);
        let s2 = g.mean(pr);
        let lin_in = g.value(rs).data().to_vec();
        let lin = g.linearized(rs, lin_in.iter().map(|v| v * v).sum(), lin_in.iter().map(|v| 2.0 * v).collect());
        g.add_scalars(&[s1, s2, lin])
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let inputs = [
            rand_tensor(&[6, 3], 1),
            rand_tensor(&[3, 4], 2),
            rand_tensor(&[4], 3),
            rand_tensor(&[6, 1], 4),
        ];
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new().with_finite_check();
            let v: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
            let out = composite(&mut g, v[0], v[1], v[2], v[3]);
            let val = g.value(out).item();
            let grads = g.backward(out).unwrap();
            let gs: Vec<Tensor> = v.iter().map(|&x| grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(g.value(x).shape()))).collect();
            (val, gs)
        };
        let (_, analytic) = eval(&inputs);
        let h = 1e-6;
        for t in 0..inputs.len() {
            for k in 0..inputs[t].len() {
                let mut plus = inputs.clone();
                plus[t].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[t].data_mut()[k] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic[t].data()[k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "input {t}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let a = rand_tensor(&[5, 7], 10);
        let b = rand_tensor(&[7, 3], 11);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb);
        for i in 0..5 {
            for j in 0..3 {
                let naive: f64 = (0..7).map(|k| a.data()[i * 7 + k] * b.data()[k * 3 + j]).sum();
                assert!((g.value(c).data()[i * 3 + j] - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn borrowed_params_are_not_copied_into_grad() {
        let w = rand_tensor(&[2, 2], 5);
        let mut g = Graph::new();
        let pw = g.param(&w);
        let x = g.constant(rand_tensor(&[1, 2], 6));
        let y = g.matmul(x, pw);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let xv = g.value(x).data().to_vec();
        assert_eq!(grads.get(pw).unwrap().data(), &[xv[0], xv[0], xv[1], xv[1]]);
    }
}
