//! Reverse-mode gradient tape.
//!
//! Operations evaluate eagerly as they are recorded, so intermediate values
//! can be inspected mid-build (closest-point assignments are computed from
//! current values and then recorded as fixed index sets, the usual subgradient
//! convention for Chamfer-style losses). The backward pass walks the tape once
//! in reverse order and only produces gradients for watched leaves and the
//! nodes between them and the loss.

use std::sync::Arc;

use super::{tensor::matmul, NumericsError, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // aux fields retained for Debug output
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId, f64),
    MatMul(VarId, VarId),
    AddRow(VarId, VarId),
    MulRow(VarId, VarId),
    MulCol(VarId, VarId),
    LeakyRelu(VarId, f64),
    Exp(VarId),
    Ln(VarId),
    Powf(VarId, f64),
    SoftmaxRows(VarId),
    SumAll(VarId),
    MeanAll(VarId),
    MeanRows(VarId),
    GatherRows(VarId, Arc<Vec<usize>>),
    ScatterAddRows(VarId, Arc<Vec<usize>>, usize),
    GroupWeightedSum(VarId, VarId, usize),
    RotatePoints(VarId, VarId),
    Reshape(VarId),
    SliceCols(VarId, usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation graph for one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node, `None` if the node was not watched (or not
    /// reachable from the loss).
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Watched leaf: backward will produce its gradient.
    pub fn var(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    /// Unwatched leaf: backward will not produce a gradient for it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn record(&mut self, op: Op, value: Tensor, inputs: &[VarId]) -> Result<VarId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op_name(&op) });
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(op, value, needs))
    }

    fn same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record(Op::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record(Op::Mul(a, b), v, &[a, b])
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> Result<VarId, NumericsError> {
        let v = map(self.value(a), |x| x * k);
        self.record(Op::Scale(a, k), v, &[a])
    }

    pub fn add_scalar(&mut self, a: VarId, k: f64) -> Result<VarId, NumericsError> {
        let v = map(self.value(a), |x| x + k);
        self.record(Op::AddScalar(a, k), v, &[a])
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId, NumericsError> {
        let v = map(self.value(a), |x| if x > 0.0 { x } else { slope * x });
        self.record(Op::LeakyRelu(a, slope), v, &[a])
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let v = map(self.value(a), f64::exp);
        self.record(Op::Exp(a), v, &[a])
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let v = map(self.value(a), f64::ln);
        self.record(Op::Ln(a), v, &[a])
    }

    pub fn powf(&mut self, a: VarId, p: f64) -> Result<VarId, NumericsError> {
        let v = map(self.value(a), |x| x.powf(p));
        self.record(Op::Powf(a, p), v, &[a])
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let v = matmul(self.value(a), self.value(b))?;
        self.record(Op::MatMul(a, b), v, &[a, b])
    }

    /// `x (r×c) + row (1×c)`, broadcast down rows.
    pub fn add_row(&mut self, x: VarId, row: VarId) -> Result<VarId, NumericsError> {
        self.check_row("add_row", x, row)?;
        let v = broadcast_row(self.value(x), self.value(row), |a, b| a + b);
        self.record(Op::AddRow(x, row), v, &[x, row])
    }

    /// `x (r×c) ⊙ row (1×c)`, broadcast down rows.
    pub fn mul_row(&mut self, x: VarId, row: VarId) -> Result<VarId, NumericsError> {
        self.check_row("mul_row", x, row)?;
        let v = broadcast_row(self.value(x), self.value(row), |a, b| a * b);
        self.record(Op::MulRow(x, row), v, &[x, row])
    }

    /// `x (r×c) ⊙ col (r×1)`, broadcast across columns.
    pub fn mul_col(&mut self, x: VarId, col: VarId) -> Result<VarId, NumericsError> {
        let (xr, cr, cc) = (
            self.value(x).rows(),
            self.value(col).rows(),
            self.value(col).cols(),
        );
        if cr != xr || cc != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_col",
                detail: format!("x {:?} vs col {:?}", self.value(x).shape(), self.value(col).shape()),
            });
        }
        let xs = self.value(x);
        let cols = xs.cols();
        let mut data = Vec::with_capacity(xs.len());
        for i in 0..xr {
            let s = self.value(col).data()[i];
            for j in 0..cols {
                data.push(xs.at(i, j) * s);
            }
        }
        let v = Tensor::new(vec![xr, cols], data)?;
        self.record(Op::MulCol(x, col), v, &[x, col])
    }

    fn check_row(&self, op: &'static str, x: VarId, row: VarId) -> Result<(), NumericsError> {
        if self.value(row).rows() != 1 || self.value(row).cols() != self.value(x).cols() {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!(
                    "x {:?} vs row {:?}",
                    self.value(x).shape(),
                    self.value(row).shape()
                ),
            });
        }
        Ok(())
    }

    // -- softmax & reductions ------------------------------------------------

    /// Softmax along the last axis (per row), computed with max-subtraction.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut denom = 0.0;
            let exps: Vec<f64> = row
                .iter()
                .map(|&v| {
                    let e = (v - m).exp();
                    denom += e;
                    e
                })
                .collect();
            data.extend(exps.into_iter().map(|e| e / denom));
        }
        let v = Tensor::new(vec![r, c], data)?;
        self.record(Op::SoftmaxRows(a), v, &[a])
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let s: f64 = self.value(a).data().iter().sum();
        self.record(Op::SumAll(a), Tensor::scalar(s), &[a])
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let x = self.value(a);
        let s: f64 = x.data().iter().sum();
        let v = Tensor::scalar(s / x.len() as f64);
        self.record(Op::MeanAll(a), v, &[a])
    }

    /// Column means: `(r×c) → (1×c)`.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x.at(i, j);
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let v = Tensor::new(vec![1, c], out)?;
        self.record(Op::MeanRows(a), v, &[a])
    }

    // -- indexing ------------------------------------------------------------

    pub fn gather_rows(&mut self, a: VarId, idx: Arc<Vec<usize>>) -> Result<VarId, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(NumericsError::Contract(format!(
                    "gather_rows: index {i} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        self.record(Op::GatherRows(a, idx), v, &[a])
    }

    /// Adds each row of `a` into output row `dst[e]`; output has `n_out` rows.
    pub fn scatter_add_rows(
        &mut self,
        a: VarId,
        dst: Arc<Vec<usize>>,
        n_out: usize,
    ) -> Result<VarId, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if dst.len() != r {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_add_rows",
                detail: format!("{} rows vs {} destinations", r, dst.len()),
            });
        }
        let mut data = vec![0.0f64; n_out * c];
        for (e, &d) in dst.iter().enumerate() {
            if d >= n_out {
                return Err(NumericsError::Contract(format!(
                    "scatter_add_rows: destination {d} out of range for {n_out} rows"
                )));
            }
            for j in 0..c {
                data[d * c + j] += x.at(e, j);
            }
        }
        let v = Tensor::new(vec![n_out, c], data)?;
        self.record(Op::ScatterAddRows(a, dst, n_out), v, &[a])
    }

    /// `t (e×(m·c))` viewed as `(e, m, c)`, weighted by `q (e×m)` and summed
    /// over `m`: `out[e, c] = Σ_m q[e, m] · t[e, m·c + c]`.
    pub fn group_weighted_sum(
        &mut self,
        t: VarId,
        q: VarId,
        m: usize,
    ) -> Result<VarId, NumericsError> {
        let tv = self.value(t);
        let qv = self.value(q);
        let e = tv.rows();
        if qv.rows() != e || qv.cols() != m || tv.cols() % m != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "group_weighted_sum",
                detail: format!("t {:?}, q {:?}, m {}", tv.shape(), qv.shape(), m),
            });
        }
        let c = tv.cols() / m;
        let mut data = vec![0.0f64; e * c];
        for row in 0..e {
            for g in 0..m {
                let w = qv.at(row, g);
                let base = row * m * c + g * c;
                for j in 0..c {
                    data[row * c + j] += w * tv.data()[base + j];
                }
            }
        }
        let v = Tensor::new(vec![e, c], data)?;
        self.record(Op::GroupWeightedSum(t, q, m), v, &[t, q])
    }

    // -- geometry ------------------------------------------------------------

    /// Rotates each row of `points (p×3)` by the rotation with axis-angle
    /// vector `r (1×3)` (Rodrigues map, series-expanded near zero angle).
    pub fn rotate_points(&mut self, r: VarId, points: VarId) -> Result<VarId, NumericsError> {
        let rv = self.value(r);
        if rv.len() != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "rotate_points",
                detail: format!("axis-angle shape {:?}", rv.shape()),
            });
        }
        let p = self.value(points);
        if p.cols() != 3 {
            return Err(NumericsError::ShapeMismatch {
                op: "rotate_points",
                detail: format!("points shape {:?}", p.shape()),
            });
        }
        let rot = rodrigues([rv.data()[0], rv.data()[1], rv.data()[2]]);
        let n = p.rows();
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            let q = [p.at(i, 0), p.at(i, 1), p.at(i, 2)];
            for row in &rot {
                data.push(row[0] * q[0] + row[1] * q[1] + row[2] * q[2]);
            }
        }
        let v = Tensor::new(vec![n, 3], data)?;
        self.record(Op::RotatePoints(r, points), v, &[r, points])
    }

    // -- shape ----------------------------------------------------------------

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId, NumericsError> {
        let v = self.value(a).reshaped(shape)?;
        self.record(Op::Reshape(a), v, &[a])
    }

    pub fn slice_cols(
        &mut self,
        a: VarId,
        start: usize,
        len: usize,
    ) -> Result<VarId, NumericsError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if start + len > c {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {start}..{} of {c} columns", start + len),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(vec![r, len], data)?;
        self.record(Op::SliceCols(a, start, len), v, &[a])
    }

    // -- backward --------------------------------------------------------------

    /// Reverse pass from a scalar loss node. Visits each node once in reverse
    /// topological (= recording) order.
    pub fn backward(&self, loss: VarId) -> Result<Gradients, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep_leaf = matches!(self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &g, &mut grads)?;
            if keep_leaf {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || zip_map(g, self.value(*b), |x, y| x * y));
                self.accum(grads, *b, || zip_map(g, self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accum(grads, *a, || map(g, |x| x * k));
            }
            Op::AddScalar(a, _) => {
                self.accum(grads, *a, || g.clone());
            }
            Op::MatMul(a, b) => {
                self.accum(grads, *a, || {
                    matmul(g, &self.value(*b).transposed()).expect("matmul backward shape")
                });
                self.accum(grads, *b, || {
                    matmul(&self.value(*a).transposed(), g).expect("matmul backward shape")
                });
            }
            Op::AddRow(x, row) => {
                self.accum(grads, *x, || g.clone());
                self.accum(grads, *row, || column_sums(g));
            }
            Op::MulRow(x, row) => {
                self.accum(grads, *x, || broadcast_row(g, self.value(*row), |a, b| a * b));
                self.accum(grads, *row, || {
                    column_sums(&zip_map(g, self.value(*x), |a, b| a * b))
                });
            }
            Op::MulCol(x, col) => {
                self.accum(grads, *x, || {
                    let cv = self.value(*col);
                    let (r, c) = (g.rows(), g.cols());
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let s = cv.data()[i];
                        for j in 0..c {
                            data.push(g.at(i, j) * s);
                        }
                    }
                    Tensor::new(vec![r, c], data).unwrap()
                });
                self.accum(grads, *col, || {
                    let xv = self.value(*x);
                    let (r, c) = (g.rows(), g.cols());
                    let mut data = vec![0.0f64; r];
                    for i in 0..r {
                        for j in 0..c {
                            data[i] += g.at(i, j) * xv.at(i, j);
                        }
                    }
                    Tensor::new(vec![r, 1], data).unwrap()
                });
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                self.accum(grads, *a, || {
                    zip_map(g, self.value(*a), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            gv * slope
                        }
                    })
                });
            }
            Op::Exp(a) => {
                self.accum(grads, *a, || zip_map(g, &node.value, |gv, ev| gv * ev));
            }
            Op::Ln(a) => {
                self.accum(grads, *a, || zip_map(g, self.value(*a), |gv, xv| gv / xv));
            }
            Op::Powf(a, p) => {
                let p = *p;
                self.accum(grads, *a, || {
                    zip_map(g, self.value(*a), |gv, xv| gv * p * xv.powf(p - 1.0))
                });
            }
            Op::SoftmaxRows(a) => {
                self.accum(grads, *a, || {
                    let s = &node.value;
                    let (r, c) = (s.rows(), s.cols());
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g.at(i, j) * s.at(i, j);
                        }
                        for j in 0..c {
                            data.push(s.at(i, j) * (g.at(i, j) - dot));
                        }
                    }
                    Tensor::new(vec![r, c], data).unwrap()
                });
            }
            Op::SumAll(a) => {
                let seed = g.item();
                self.accum(grads, *a, || {
                    Tensor::filled(self.value(*a).shape().to_vec(), seed)
                });
            }
            Op::MeanAll(a) => {
                let seed = g.item() / self.value(*a).len() as f64;
                self.accum(grads, *a, || {
                    Tensor::filled(self.value(*a).shape().to_vec(), seed)
                });
            }
            Op::MeanRows(a) => {
                self.accum(grads, *a, || {
                    let x = self.value(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        for j in 0..c {
                            data.push(g.at(0, j) / r as f64);
                        }
                    }
                    Tensor::new(vec![r, c], data).unwrap()
                });
            }
            Op::GatherRows(a, idx) => {
                self.accum(grads, *a, || {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut data = vec![0.0f64; x.len()];
                    for (e, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            data[src * c + j] += g.at(e, j);
                        }
                    }
                    Tensor::new(x.shape().to_vec(), data).unwrap()
                });
            }
            Op::ScatterAddRows(a, dst, _) => {
                self.accum(grads, *a, || {
                    let c = g.cols();
                    let mut data = Vec::with_capacity(dst.len() * c);
                    for &d in dst.iter() {
                        data.extend_from_slice(&g.data()[d * c..(d + 1) * c]);
                    }
                    Tensor::new(vec![dst.len(), c], data).unwrap()
                });
            }
            Op::GroupWeightedSum(t, q, m) => {
                let m = *m;
                let c = self.value(*t).cols() / m;
                let e = self.value(*t).rows();
                self.accum(grads, *t, || {
                    let qv = self.value(*q);
                    let mut data = vec![0.0f64; e * m * c];
                    for row in 0..e {
                        for gi in 0..m {
                            let w = qv.at(row, gi);
                            for j in 0..c {
                                data[row * m * c + gi * c + j] = w * g.at(row, j);
                            }
                        }
                    }
                    Tensor::new(vec![e, m * c], data).unwrap()
                });
                self.accum(grads, *q, || {
                    let tv = self.value(*t);
                    let mut data = vec![0.0f64; e * m];
                    for row in 0..e {
                        for gi in 0..m {
                            let mut s = 0.0;
                            for j in 0..c {
                                s += tv.data()[row * m * c + gi * c + j] * g.at(row, j);
                            }
                            data[row * m + gi] = s;
                        }
                    }
                    Tensor::new(vec![e, m], data).unwrap()
                });
            }
            Op::RotatePoints(r, points) => {
                let rv = self.value(*r);
                let raxis = [rv.data()[0], rv.data()[1], rv.data()[2]];
                self.accum(grads, *points, || {
                    let rot = rodrigues(raxis);
                    let n = g.rows();
                    let mut data = Vec::with_capacity(n * 3);
                    for i in 0..n {
                        let gi = [g.at(i, 0), g.at(i, 1), g.at(i, 2)];
                        // transpose of R applied to the output gradient
                        for col in 0..3 {
                            data.push(
                                rot[0][col] * gi[0] + rot[1][col] * gi[1] + rot[2][col] * gi[2],
                            );
                        }
                    }
                    Tensor::new(vec![n, 3], data).unwrap()
                });
                self.accum(grads, *r, || {
                    rotate_points_r_grad(raxis, self.value(*points), g)
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, || {
                    g.reshaped(self.value(*a).shape().to_vec()).unwrap()
                });
            }
            Op::SliceCols(a, start, len) => {
                let (start, len) = (*start, *len);
                self.accum(grads, *a, || {
                    let x = self.value(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut data = vec![0.0f64; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            data[i * c + start + j] = g.at(i, j);
                        }
                    }
                    Tensor::new(vec![r, c], data).unwrap()
                });
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], target: VarId, contribution: impl FnOnce() -> Tensor) {
        if !self.needs(target) {
            return;
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                let ed = existing.data_mut();
                for (e, v) in ed.iter_mut().zip(c.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::MulCol(..) => "mul_col",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Powf(..) => "powf",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::MeanRows(..) => "mean_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::ScatterAddRows(..) => "scatter_add_rows",
        Op::GroupWeightedSum(..) => "group_weighted_sum",
        Op::RotatePoints(..) => "rotate_points",
        Op::Reshape(..) => "reshape",
        Op::SliceCols(..) => "slice_cols",
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .unwrap()
}

fn broadcast_row(x: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(x.at(i, j), row.data()[j]));
        }
    }
    Tensor::new(vec![r, c], data).unwrap()
}

fn column_sums(g: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let mut data = vec![0.0f64; c];
    for i in 0..r {
        for j in 0..c {
            data[j] += g.at(i, j);
        }
    }
    Tensor::new(vec![1, c], data).unwrap()
}

// ---------------------------------------------------------------------------
// Rodrigues map
// ---------------------------------------------------------------------------

/// sin(θ)/θ and (1−cos θ)/θ², series-expanded for small θ.
fn rot_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// d(sinθ/θ)/dθ / θ and d((1−cosθ)/θ²)/dθ / θ, series-expanded near zero.
fn rot_coeff_derivs(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (-1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0)
    } else {
        let (s, c) = theta.sin_cos();
        let alpha = (theta * c - s) / (theta * theta * theta);
        let beta = (theta * s - 2.0 * (1.0 - c)) / (theta * theta * theta * theta);
        (alpha, beta)
    }
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn rodrigues(r: [f64; 3]) -> [[f64; 3]; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let (a, b) = rot_coeffs(theta);
    let k = [
        [0.0, -r[2], r[1]],
        [r[2], 0.0, -r[0]],
        [-r[1], r[0], 0.0],
    ];
    let mut k2 = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for l in 0..3 {
                k2[i][j] += k[i][l] * k[l][j];
            }
        }
    }
    let mut rot = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rot[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    rot
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Gradient of `Σ_i ḡ_i · R(r) p_i` with respect to `r`.
///
/// With c1 = r×p, c2 = r×c1 and y = p + a·c1 + b·c2:
/// ∂y/∂r = −a[p]× − b([c1]× + [r]×[p]×) + α c1 rᵀ + β c2 rᵀ,
/// where α = a′(θ)/θ and β = b′(θ)/θ.
fn rotate_points_r_grad(r: [f64; 3], points: &Tensor, g: &Tensor) -> Tensor {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let (a, b) = rot_coeffs(theta);
    let (alpha, beta) = rot_coeff_derivs(theta);
    let n = points.rows();
    let mut acc = [0.0f64; 3];
    for i in 0..n {
        let p = [points.at(i, 0), points.at(i, 1), points.at(i, 2)];
        let gi = [g.at(i, 0), g.at(i, 1), g.at(i, 2)];
        let c1 = cross(r, p);
        let c2 = cross(r, c1);
        // jac[row][col] = ∂y_row/∂r_col
        let px = [
            [0.0, -p[2], p[1]],
            [p[2], 0.0, -p[0]],
            [-p[1], p[0], 0.0],
        ];
        let c1x = [
            [0.0, -c1[2], c1[1]],
            [c1[2], 0.0, -c1[0]],
            [-c1[1], c1[0], 0.0],
        ];
        let rx = [
            [0.0, -r[2], r[1]],
            [r[2], 0.0, -r[0]],
            [-r[1], r[0], 0.0],
        ];
        let mut rx_px = [[0.0f64; 3]; 3];
        for row in 0..3 {
            for col in 0..3 {
                for l in 0..3 {
                    rx_px[row][col] += rx[row][l] * px[l][col];
                }
            }
        }
        for row in 0..3 {
            for col in 0..3 {
                let jac = -a * px[row][col]
                    - b * (c1x[row][col] + rx_px[row][col])
                    + alpha * c1[row] * r[col]
                    + beta * c2[row] * r[col];
                acc[col] += gi[row] * jac;
            }
        }
    }
    Tensor::new(vec![1, 3], acc.to_vec()).unwrap()
}
