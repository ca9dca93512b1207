//! Small dense-matrix reverse-mode automatic differentiation, the Adam
//! optimizer, and the named-slice parameter store behind every trainable
//! model in this crate. Gradients from the tape are validated against
//! central finite differences in the test suites.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("parameter store does not match the expected layout: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Mat {
        Mat {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Mat {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    fn matmul_nt(&self, other: &Mat) -> Mat {
        // self (r x k) * other^T (k x c) where other is (c x k)
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * other.at(j, k);
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    fn matmul_tn(&self, other: &Mat) -> Mat {
        // self^T (k x r) * other (k x c) where self is (k x r)? no:
        // computes self^T * other with self (k x r), other (k x c) -> (r x c)
        assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.at(k, i);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a * b^T
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// k * a + c, elementwise; only k matters for the gradient
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SumAll(NodeId),
    /// log(sum(exp(row))) per row -> (rows x 1)
    LogSumExpRows(NodeId),
    SoftmaxRow(NodeId),
    LogSoftmaxRow(NodeId),
    Min(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
}

struct Node {
    op: Op,
    value: Mat,
}

/// Computation tape. Build a graph forward, then call [`Tape::backward`]
/// from a scalar node to obtain gradients for every node.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!(m.data.len(), 1, "expected scalar node");
        m.data[0]
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(Op::MatMulNT(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    pub fn affine(&mut self, a: NodeId, k: f64, c: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| k * x + c);
        self.push(Op::Affine(a, k), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let mut data = Vec::new();
        for r in 0..rows {
            for &p in parts {
                let m = &self.nodes[p].value;
                assert_eq!(m.rows, rows);
                data.extend_from_slice(&m.data[r * m.cols..(r + 1) * m.cols]);
            }
        }
        let cols = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        self.push(Op::ConcatCols(parts.to_vec()), Mat::from_vec(rows, cols, data))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let m = &self.nodes[a].value;
        let mut data = Vec::with_capacity(m.rows * len);
        for r in 0..m.rows {
            data.extend_from_slice(&m.data[r * m.cols + start..r * m.cols + start + len]);
        }
        let rows = m.rows;
        self.push(Op::SliceCols(a, start, len), Mat::from_vec(rows, len, data))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        self.push(Op::SumAll(a), Mat::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.data.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        let mut out = Vec::with_capacity(m.rows);
        for r in 0..m.rows {
            let row = &m.data[r * m.cols..(r + 1) * m.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        let rows = m.rows;
        self.push(Op::LogSumExpRows(a), Mat::from_vec(rows, 1, out))
    }

    pub fn softmax_row(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!(m.rows, 1);
        let mx = m.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = m.data.iter().map(|&v| (v - mx).exp()).collect();
        let s: f64 = ex.iter().sum();
        let v = Mat::row_vec(ex.into_iter().map(|e| e / s).collect());
        self.push(Op::SoftmaxRow(a), v)
    }

    pub fn log_softmax_row(&mut self, a: NodeId) -> NodeId {
        let m = &self.nodes[a].value;
        assert_eq!(m.rows, 1);
        let mx = m.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx
            + m.data
                .iter()
                .map(|&v| (v - mx).exp())
                .sum::<f64>()
                .ln();
        let v = m.map(|x| x - lse);
        self.push(Op::LogSoftmaxRow(a), v)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, f64::min);
        self.push(Op::Min(a, b), v)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v)
    }

    /// Linear layer on a row vector: x * w + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[x].value.rows, 1);
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Gradients of a scalar node with respect to every node on the tape.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Mat>> {
        assert_eq!(
            self.nodes[loss].value.data.len(),
            1,
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Mat::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[*b].value);
                    let db = self.nodes[*a].value.matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value);
                    let db = g.matmul_tn(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&self.nodes[*b].value, |x, y| x * y);
                    let db = g.zip(&self.nodes[*a].value, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Affine(a, k) => accumulate(&mut grads, *a, g.map(|v| v * k)),
                Op::Sigmoid(a) => {
                    let da = g.zip(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = g.zip(&self.nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Softplus(a) => {
                    let da = g.zip(&self.nodes[*a].value, |gv, x| gv * sigmoid(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip(&node.value, |gv, y| gv * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let da = g.zip(&self.nodes[*a].value, |gv, x| gv / x);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows;
                    let mut col = 0;
                    for &p in parts {
                        let pm = &self.nodes[p].value;
                        let mut dp = Mat::zeros(pm.rows, pm.cols);
                        for r in 0..rows {
                            for c in 0..pm.cols {
                                dp.data[r * pm.cols + c] = g.at(r, col + c);
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        col += pm.cols;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let am = &self.nodes[*a].value;
                    let mut da = Mat::zeros(am.rows, am.cols);
                    for r in 0..am.rows {
                        for c in 0..*len {
                            da.data[r * am.cols + start + c] = g.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let am = &self.nodes[*a].value;
                    let da = Mat::from_vec(am.rows, am.cols, vec![g.data[0]; am.data.len()]);
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSumExpRows(a) => {
                    let am = &self.nodes[*a].value;
                    let mut da = Mat::zeros(am.rows, am.cols);
                    for r in 0..am.rows {
                        let row = &am.data[r * am.cols..(r + 1) * am.cols];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                        for c in 0..am.cols {
                            da.data[r * am.cols + c] = g.at(r, 0) * (row[c] - mx).exp() / s;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRow(a) => {
                    let y = &node.value;
                    let dot: f64 = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).sum();
                    let da = g.zip(y, |gv, yv| yv * (gv - dot));
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRow(a) => {
                    let am = &self.nodes[*a].value;
                    let mx = am.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = am.data.iter().map(|&v| (v - mx).exp()).collect();
                    let s: f64 = ex.iter().sum();
                    let gsum: f64 = g.data.iter().sum();
                    let da = Mat::row_vec(
                        g.data
                            .iter()
                            .zip(&ex)
                            .map(|(gv, e)| gv - gsum * e / s)
                            .collect(),
                    );
                    accumulate(&mut grads, *a, da);
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut da = Mat::zeros(av.rows, av.cols);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    for i in 0..g.data.len() {
                        if av.data[i] <= bv.data[i] {
                            da.data[i] = g.data[i];
                        } else {
                            db.data[i] = g.data[i];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = g.zip(&self.nodes[*a].value, |gv, x| {
                        if x > *lo && x < *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
    match &mut grads[id] {
        Some(g) => {
            for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                *gv += dv;
            }
        }
        slot => *slot = Some(delta),
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    offset: usize,
}

/// One flat f64 vector with named (rows x cols) slices per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    slices: Vec<SliceInfo>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            slices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize) {
        assert!(
            self.slices.iter().all(|s| s.name != name),
            "duplicate slice {name}"
        );
        self.slices.push(SliceInfo {
            name: name.to_string(),
            rows,
            cols,
            offset: self.data.len(),
        });
        self.data.extend(std::iter::repeat_n(0.0, rows * cols));
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice_names(&self) -> impl Iterator<Item = &str> {
        self.slices.iter().map(|s| s.name.as_str())
    }

    pub fn slice_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.offset..s.offset + s.rows * s.cols)
    }

    pub fn get(&self, name: &str) -> Mat {
        let info = self
            .slices
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown slice {name}"));
        Mat::from_vec(
            info.rows,
            info.cols,
            self.data[info.offset..info.offset + info.rows * info.cols].to_vec(),
        )
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.data.len(),
                values.len()
            )));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Random initialization: each slice gets N(0, scale/sqrt(fan_in)).
    pub fn init_random<R: rand::Rng>(&mut self, rng: &mut R, scale: f64) {
        use rand_distr::Distribution;
        for info in &self.slices {
            let fan_in = info.rows.max(1) as f64;
            let std = scale / fan_in.sqrt();
            let normal = rand_distr::Normal::new(0.0, std).unwrap();
            for i in info.offset..info.offset + info.rows * info.cols {
                self.data[i] = normal.sample(rng);
            }
        }
    }

    /// Mount every slice as a tape leaf; returns leaf ids in slice order.
    pub fn leaves(&self, tape: &mut Tape) -> ParamLeaves {
        let ids = self
            .slices
            .iter()
            .map(|info| {
                tape.leaf(Mat::from_vec(
                    info.rows,
                    info.cols,
                    self.data[info.offset..info.offset + info.rows * info.cols].to_vec(),
                ))
            })
            .collect();
        ParamLeaves { ids }
    }

    /// Collect the flat gradient aligned with [`ParamStore::flat`] from the
    /// tape gradients of `leaves`.
    pub fn flat_gradient(&self, leaves: &ParamLeaves, grads: &[Option<Mat>]) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for (info, &id) in self.slices.iter().zip(&leaves.ids) {
            if let Some(g) = &grads[id] {
                out[info.offset..info.offset + g.data.len()].copy_from_slice(&g.data);
            }
        }
        out
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape leaf ids for a parameter store, in registration order.
pub struct ParamLeaves {
    ids: Vec<NodeId>,
}

impl ParamLeaves {
    pub fn by_name(&self, store: &ParamStore, name: &str) -> NodeId {
        let idx = store
            .slices
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("unknown slice {name}"));
        self.ids[idx]
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        assert_eq!(params.len(), grads.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradient"));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned container for trained parameters: named slices plus the
/// training configuration and seed, shared by predictor and policy models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: ParamStore,
}

pub const CHECKPOINT_FORMAT: &str = "logsim-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value, params: ParamStore) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            seed,
            config,
            params,
        }
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), NnError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!(
                "unknown format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Central finite differences on a scalar function of flat params.
    fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, params: &[f64], idx: usize) -> f64 {
        let h = 1e-5 * params[idx].abs().max(1.0);
        let mut p = params.to_vec();
        p[idx] = params[idx] + h;
        let up = f(&p);
        p[idx] = params[idx] - h;
        let down = f(&p);
        (up - down) / (2.0 * h)
    }

    /// A composite function exercising every tape op; the FD check on this
    /// is what certifies the backward pass implementations.
    fn composite_loss(params: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let w = tape.leaf(Mat::from_vec(3, 4, params[0..12].to_vec()));
        let b = tape.leaf(Mat::row_vec(params[12..16].to_vec()));
        let w2 = tape.leaf(Mat::from_vec(4, 3, params[16..28].to_vec()));
        let x = tape.constant(Mat::row_vec(vec![0.3, -0.7, 1.2]));
        let y = tape.matmul(x, w);
        let y = tape.add(y, b);
        let t = tape.tanh(y);
        let s = tape.sigmoid(y);
        let r = tape.relu(y);
        let sp = tape.softplus(y);
        let cat = tape.concat_cols(&[t, s]);
        let left = tape.slice_cols(cat, 0, 4);
        let prod = tape.mul(left, r);
        let aff = tape.affine(prod, 1.5, -0.2);
        let m = tape.min(aff, sp);
        let cl = tape.clamp(m, -0.8, 0.9);
        let z = tape.matmul(cl, w2);
        let zt = tape.matmul_nt(z, w2); // (1x3)*(4x3)^T -> 1x4
        let sm = tape.softmax_row(z);
        let lsm = tape.log_softmax_row(z);
        let lse = tape.logsumexp_rows(zt);
        let e = tape.exp(lsm);
        let pos = tape.softplus(z);
        let l = tape.ln(pos);
        let mix = tape.mul(sm, e);
        let total1 = tape.sum_all(mix);
        let total2 = tape.sum_all(lse);
        let total3 = tape.mean_all(l);
        let part = tape.add(total1, total2);
        let sub = tape.sub(part, total3);
        tape.scalar_value(sub)
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let params: Vec<f64> = (0..28).map(|_| rng.gen_range(-0.9..0.9)).collect();

        // analytic gradient via the tape
        let mut tape = Tape::new();
        let w = tape.leaf(Mat::from_vec(3, 4, params[0..12].to_vec()));
        let b = tape.leaf(Mat::row_vec(params[12..16].to_vec()));
        let w2 = tape.leaf(Mat::from_vec(4, 3, params[16..28].to_vec()));
        let x = tape.constant(Mat::row_vec(vec![0.3, -0.7, 1.2]));
        let y = tape.matmul(x, w);
        let y = tape.add(y, b);
        let t = tape.tanh(y);
        let s = tape.sigmoid(y);
        let r = tape.relu(y);
        let sp = tape.softplus(y);
        let cat = tape.concat_cols(&[t, s]);
        let left = tape.slice_cols(cat, 0, 4);
        let prod = tape.mul(left, r);
        let aff = tape.affine(prod, 1.5, -0.2);
        let m = tape.min(aff, sp);
        let cl = tape.clamp(m, -0.8, 0.9);
        let z = tape.matmul(cl, w2);
        let zt = tape.matmul_nt(z, w2);
        let sm = tape.softmax_row(z);
        let lsm = tape.log_softmax_row(z);
        let lse = tape.logsumexp_rows(zt);
        let e = tape.exp(lsm);
        let pos = tape.softplus(z);
        let l = tape.ln(pos);
        let mix = tape.mul(sm, e);
        let total1 = tape.sum_all(mix);
        let total2 = tape.sum_all(lse);
        let total3 = tape.mean_all(l);
        let part = tape.add(total1, total2);
        let sub = tape.sub(part, total3);
        let grads = tape.backward(sub);

        let mut flat = vec![0.0; 28];
        flat[0..12].copy_from_slice(&grads[w].as_ref().unwrap().data);
        flat[12..16].copy_from_slice(&grads[b].as_ref().unwrap().data);
        flat[16..28].copy_from_slice(&grads[w2].as_ref().unwrap().data);

        for i in 0..28 {
            let fd = fd_gradient(&composite_loss, &params, i);
            let an = flat[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "param {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut adam = Adam::new(0.1, 2);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            adam.apply(&mut params, &grads).unwrap();
        }
        assert!(params.iter().all(|p| p.abs() < 1e-2));
    }

    #[test]
    fn param_store_round_trips_through_checkpoint() {
        let mut store = ParamStore::new();
        store.register("layer.w", 2, 3);
        store.register("layer.b", 1, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        store.init_random(&mut rng, 1.0);
        let ckpt = Checkpoint::new("predictor", 5, serde_json::json!({"hidden": 8}), store.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.write_file(&path).unwrap();
        let loaded = Checkpoint::read_file(&path).unwrap();
        assert_eq!(loaded.kind, "predictor");
        assert_eq!(loaded.params.flat(), store.flat()); // exact float round trip
        assert_eq!(loaded.params.get("layer.w").rows, 2);
    }
}

