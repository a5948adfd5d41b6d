//! Dense `f64` tensors and a taped reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every loss evaluation. Values live in an arena of
//! nodes addressed by [`Var`] handles; every operation appends one node whose
//! inputs were appended earlier, so the arena order is already topological and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately absent. The only mixed-shape operations are the
//! explicit ones: [`Graph::add_bias`] (row vector added to every row),
//! [`Graph::scale`] (constant factor) and [`Graph::mul_scalar`] (scalar node).
//!
//! Stop-gradient points ([`Graph::detach`] and [`Graph::stop_scalar`]) are
//! logged. A graph created with [`Graph::with_replay`] substitutes the logged
//! values instead of recomputing them, which turns "a loss with some quantities
//! held constant" into an ordinary function of the parameters that finite
//! differences can check.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{numeric_err, shape_err, Result};

/// Added under the square root of every euclidean distance.
pub const DIST_EPS: f64 = 1e-12;
/// Floor applied to the reference distribution inside [`Graph::kl_div`].
pub const KL_FLOOR: f64 = 1e-9;
const LN_EPS: f64 = 1e-5;

/// Plain dense tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dimension in shape {:?}", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
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

    /// `(rows, cols)` view: scalars are 1x1, vectors a single row, higher ranks
    /// fold every leading dimension into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        rows_cols(&self.shape)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NarrowRows(Var, usize),
    NarrowCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    EuclidDist(Var, Var),
    KlDiv(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Stack(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Taped computation graph. Confined to one thread; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stopped: Vec<Vec<f64>>,
    replay: Option<Vec<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose stop-gradient points return `stopped` (in recording order)
    /// instead of the values computed in this graph.
    pub fn with_replay(stopped: Vec<Vec<f64>>) -> Self {
        Self {
            replay: Some(stopped),
            ..Self::default()
        }
    }

    /// Values seen at every stop-gradient point so far, in order.
    pub fn stopped_values(&self) -> &[Vec<f64>] {
        &self.stopped
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn next_stopped(&mut self, live: Vec<f64>) -> Vec<f64> {
        let k = self.stopped.len();
        let v = match &self.replay {
            Some(r) if k < r.len() && r[k].len() == live.len() => r[k].clone(),
            _ => live,
        };
        self.stopped.push(v.clone());
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let live = self.node(x).value.clone();
        let shape = self.node(x).shape.clone();
        let v = self.next_stopped(live);
        self.push(shape, v, Op::Leaf, false)
    }

    /// Logs a coefficient that is used as a constant (never differentiated).
    pub fn stop_scalar(&mut self, live: f64) -> f64 {
        self.next_stopped(vec![live])[0]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply by a constant that does not participate in differentiation.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Multiply every entry of `a` by the single-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("mul_scalar: {:?} is not a scalar", self.shape(s)));
        }
        let c = self.scalar(s);
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, s]);
        Ok(self.push(shape, value, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, libm::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(numeric_err!("log of non-positive value {x}"));
        }
        Ok(self.map(a, libm::log, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| gelu(x).0, Op::Gelu(a))
    }

    fn dims2(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err!("{what}: expected a matrix, got shape {:?}", s)),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err!(
                "matmul_nt: inner dimensions disagree for {:?} x {:?}^T",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Adds the vector `b` (length = last dim of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(b).len() != cols {
            return Err(shape_err!(
                "add_bias: bias {:?} does not match rows of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for (o, &bb) in out[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, out, Op::AddBias(x, b), rg))
    }

    /// Row-wise layer normalization with affine gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(shape_err!(
                "layer_norm: affine params {:?}/{:?} vs input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + bt[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along the last axis (a vector is one row). Uses max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, false)
    }

    /// Row-wise softmax where, for a square score matrix, entry `(i, j)` with
    /// `j > i` is excluded.
    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, true)
    }

    fn softmax_masked(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        if xv.iter().any(|v| v.is_nan()) {
            return Err(numeric_err!("softmax: NaN input"));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let lim = if causal { (r + 1).min(cols) } else { cols };
            let row = &xv[r * cols..r * cols + lim];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * cols..r * cols + lim];
            let mut z = 0.0;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = libm::exp(v - max);
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Rows of `table` selected by `ids`: `[n_ids, width]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("gather_rows: id {bad} out of range for {rows} rows"));
        }
        if ids.is_empty() {
            return Err(shape_err!("gather_rows: empty id list"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate matrices along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err!("concat_rows: nothing to concatenate"));
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err!(
                    "concat_rows: width {c} vs {cols} ({:?})",
                    self.shape(p)
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenate matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err!("concat_cols: nothing to concatenate"));
        };
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err!("concat_cols: {r} rows vs {rows}"));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * cols + off..r * cols + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "narrow_rows")?;
        if len == 0 || start + len > rows {
            return Err(shape_err!("narrow_rows: {start}..{} out of {rows} rows", start + len));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, cols], out, Op::NarrowRows(x, start), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "narrow_cols")?;
        if len == 0 || start + len > cols {
            return Err(shape_err!("narrow_cols: {start}..{} out of {cols} cols", start + len));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, len], out, Op::NarrowCols(x, start), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.narrow_rows(x, i, 1)?;
        let w = self.shape(r)[1];
        self.reshape(r, &[w])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("reshape: {:?} -> {:?}", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    /// Mean of several scalar nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let s = self.stack(xs)?;
        Ok(self.mean(s))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err!("stack: nothing to stack"));
        }
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(shape_err!("stack: {:?} is not a scalar", self.shape(x)));
            }
            out.push(self.scalar(x));
        }
        let rg = self.rg(xs);
        Ok(self.push(vec![xs.len()], out, Op::Stack(xs.to_vec()), rg))
    }

    /// `sqrt(|a-b|^2 + DIST_EPS)`, defined and differentiable everywhere.
    pub fn euclid_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err!(
                "euclid_dist: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let d = dist_eps(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Vec::new(), vec![d], Op::EuclidDist(a, b), rg))
    }

    /// `sum_i p_i ln(p_i / max(q_i, KL_FLOOR))`, with `0 ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_div")?;
        let pv = self.value(p);
        let qv = self.value(q);
        if pv.iter().chain(qv).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(numeric_err!("kl_div: entries must be finite and non-negative"));
        }
        let mut s = 0.0;
        for (&pi, &qi) in pv.iter().zip(qv) {
            if pi > 0.0 {
                s += pi * (libm::log(pi) - libm::log(qi.max(KL_FLOOR)));
            }
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Vec::new(), vec![s], Op::KlDiv(p, q), rg))
    }

    /// Mean token cross-entropy over rows whose target is `Some`. Returns 0
    /// when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if targets.len() != rows {
            return Err(shape_err!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            ));
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(shape_err!("cross_entropy: target {t} outside {cols} classes"));
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| v.is_nan()) {
            return Err(numeric_err!("cross_entropy: NaN logits"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *pi = libm::exp(v - max);
                z += *pi;
            }
            for pi in &mut probs[r * cols..(r + 1) * cols] {
                *pi /= z;
            }
            total += libm::log(z) + max - row[t];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        if self.value(logits).len() != labels.len() {
            return Err(shape_err!(
                "bce_with_logits: {} labels for {:?}",
                labels.len(),
                self.shape(logits)
            ));
        }
        let n = labels.len() as f64;
        let s = self
            .value(logits)
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - y * z + libm::log1p(libm::exp(-z.abs())))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![s],
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into whatever
    /// earlier `backward` calls left behind; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::MulScalar(a, sc) => {
                let av = &nodes[a.0].value;
                let c = nodes[sc.0].value[0];
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                acc(*sc, &mut |s| s[0] += av.iter().zip(g).map(|(x, y)| x * y).sum::<f64>());
            }
            Op::Exp(a) => {
                let out = &node.value;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k];
                    }
                });
            }
            Op::Log(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / av[k];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * gelu(av[k]).1;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                // dA = dC B^T, dB = A^T dC
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s));
                acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = nodes[b.0].shape[0];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                // C = A B^T: dA = dC B, dB = dC^T A
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, false, s));
                acc(*b, &mut |s| gemm(n, m, k, g, true, av, false, s));
            }
            Op::Transpose(a) => {
                let (m, n) = rows_cols(&nodes[a.0].shape);
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let cols = nodes[b.0].value.len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(cols) {
                        add_into(s, row);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &nodes[gamma.0].value;
                let cols = gv.len();
                acc(*beta, &mut |s| {
                    for row in g.chunks(cols) {
                        add_into(s, row);
                    }
                });
                acc(*gamma, &mut |s| {
                    for (row, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            s[c] += row[c] * xh[c];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for (r, (row, xh)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let d = row[c] * gv[c];
                            m1 += d;
                            m2 += d * xh[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let d = row[c] * gv[c];
                            s[r * cols + c] += rstd[r] * (d - m1 - xh[c] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, cols) = rows_cols(&node.shape);
                acc(*x, &mut |s| {
                    for (r, (yr, gr)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            s[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let cols = nodes[table.0].shape[1];
                acc(*table, &mut |s| {
                    for (row, &id) in g.chunks(cols).zip(ids) {
                        add_into(&mut s[id * cols..(id + 1) * cols], row);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = rows_cols(&node.shape);
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(*p, &mut |s| {
                        for r in 0..rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * cols + off..r * cols + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::NarrowRows(x, start) => {
                let cols = nodes[x.0].shape[1];
                acc(*x, &mut |s| add_into(&mut s[start * cols..start * cols + g.len()], g));
            }
            Op::NarrowCols(x, start) => {
                let cols = nodes[x.0].shape[1];
                let w = node.shape[1];
                acc(*x, &mut |s| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut s[r * cols + start..r * cols + start + w], row);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Stack(xs) => {
                for (k, x) in xs.iter().enumerate() {
                    acc(*x, &mut |s| s[0] += g[k]);
                }
            }
            Op::EuclidDist(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let d = node.value[0];
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (av[k] - bv[k]) / d;
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[0] * (av[k] - bv[k]) / d;
                    }
                });
            }
            Op::KlDiv(p, q) => {
                let pv = &nodes[p.0].value;
                let qv = &nodes[q.0].value;
                acc(*p, &mut |s| {
                    for k in 0..s.len() {
                        if pv[k] > 0.0 {
                            s[k] += g[0] * (libm::log(pv[k]) - libm::log(qv[k].max(KL_FLOOR)) + 1.0);
                        }
                    }
                });
                acc(*q, &mut |s| {
                    for k in 0..s.len() {
                        if qv[k] > KL_FLOOR {
                            s[k] -= g[0] * pv[k] / qv[k];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let cols = probs.len() / targets.len();
                let w = g[0] / *count as f64;
                acc(*logits, &mut |s| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..cols {
                            s[r * cols + c] += w * probs[r * cols + c];
                        }
                        s[r * cols + t] -= w;
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let zv = &nodes[logits.0].value;
                let n = labels.len() as f64;
                acc(*logits, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[0] * (sigmoid(zv[k]) - labels[k]) / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let v = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (v, d)
}

/// `sqrt(|a-b|^2 + DIST_EPS)` on raw slices.
pub fn dist_eps(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(sq_dist(a, b) + DIST_EPS)
}

/// Plain euclidean distance on raw slices.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(sq_dist(a, b))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `c += op(a) * op(b)` where `op(a)` is `[m,k]` and `op(b)` is `[k,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // of the borrowed slices, whose lengths are asserted in debug builds and
    // guaranteed by shape checks at every call site.
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
