//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records a define-by-run graph of matrix operations. Values are
//! computed eagerly; [`Tape::backward`] walks the recorded ops in reverse and
//! accumulates gradients for every node that transitively depends on a
//! gradient-carrying leaf. All arithmetic is plain `f64` in a fixed order, so
//! two runs over the same inputs produce bit-identical values and gradients.

use ndarray::{concatenate, s, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowVec(usize, usize),
    MulRowVec(usize, usize),
    Exp(usize),
    Tanh(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, f64),
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or a zero matrix of the given shape when the loss
    /// does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => Matrix::zeros(shape),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant: nothing upstream of it gets a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) + self.value(b);
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) - self.value(b);
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Sub(a.0, b.0), g)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).dim(), self.value(b).dim());
        let v = self.value(a) * self.value(b);
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Mul(a.0, b.0), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).ncols(), self.value(b).nrows());
        let v = self.value(a).dot(self.value(b));
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::MatMul(a.0, b.0), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.ng(a.0);
        self.push(v, Op::Scale(a.0, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let g = self.ng(a.0);
        self.push(v, Op::AddScalar(a.0), g)
    }

    /// `x + b` with `b` a `1×d` row broadcast over the rows of `x`.
    pub fn add_row_vec(&mut self, x: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        debug_assert_eq!(self.value(x).ncols(), self.value(b).ncols());
        let v = self.value(x) + &self.value(b).row(0);
        let g = self.ng(x.0) || self.ng(b.0);
        self.push(v, Op::AddRowVec(x.0, b.0), g)
    }

    /// `x ⊙ g` with `g` a `1×d` row broadcast over the rows of `x`.
    pub fn mul_row_vec(&mut self, x: Var, gamma: Var) -> Var {
        debug_assert_eq!(self.value(gamma).nrows(), 1);
        debug_assert_eq!(self.value(x).ncols(), self.value(gamma).ncols());
        let v = self.value(x) * &self.value(gamma).row(0);
        let g = self.ng(x.0) || self.ng(gamma.0);
        self.push(v, Op::MulRowVec(x.0, gamma.0), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let g = self.ng(a.0);
        self.push(v, Op::Exp(a.0), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.ng(a.0);
        self.push(v, Op::Tanh(a.0), g)
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        let g = self.ng(a.0);
        self.push(v, Op::Gelu(a.0), g)
    }

    /// Row-wise softmax, numerically stabilised by the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - mx).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let g = self.ng(a.0);
        self.push(v, Op::SoftmaxRows(a.0), g)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|e| (e - mx).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        let g = self.ng(a.0);
        self.push(v, Op::LogSoftmaxRows(a.0), g)
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|e| (e - mean) * inv);
        }
        let g = self.ng(a.0);
        self.push(v, Op::LayerNormRows(a.0, eps), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let g = self.ng(a.0);
        self.push(v, Op::Transpose(a.0), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.ng(a.0);
        self.push(Matrix::from_elem((1, 1), s), Op::SumAll(a.0), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / (m.len() as f64);
        let g = self.ng(a.0);
        self.push(Matrix::from_elem((1, 1), s), Op::MeanAll(a.0), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let g = self.ng(a.0);
        self.push(v, Op::SliceRows(a.0, start), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let g = self.ng(a.0);
        self.push(v, Op::SliceCols(a.0, start), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let g = idx.iter().any(|&i| self.ng(i));
        self.push(v, Op::ConcatRows(idx), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let g = idx.iter().any(|&i| self.ng(i));
        self.push(v, Op::ConcatCols(idx), g)
    }

    /// Backpropagate from a `1×1` loss node. Gradients are accumulated only
    /// into nodes reachable from gradient-carrying leaves.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dout = grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.apply_backward(&op, i, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match grads[idx] {
            Some(ref mut g) => *g += &delta,
            None => grads[idx] = Some(delta),
        }
    }

    fn apply_backward(&self, op: &Op, node: usize, dout: &Matrix, grads: &mut [Option<Matrix>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, dout.clone());
                self.acc(grads, b, dout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, dout.clone());
                self.acc(grads, b, -dout);
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, dout * &self.nodes[b].value);
                }
                if self.ng(b) {
                    self.acc(grads, b, dout * &self.nodes[a].value);
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, dout.dot(&self.nodes[b].value.t()));
                }
                if self.ng(b) {
                    self.acc(grads, b, self.nodes[a].value.t().dot(dout));
                }
            }
            Op::Scale(a, c) => self.acc(grads, a, dout * c),
            Op::AddScalar(a) => self.acc(grads, a, dout.clone()),
            Op::AddRowVec(x, b) => {
                self.acc(grads, x, dout.clone());
                if self.ng(b) {
                    let db = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, b, db);
                }
            }
            Op::MulRowVec(x, g) => {
                if self.ng(x) {
                    self.acc(grads, x, dout * &self.nodes[g].value.row(0));
                }
                if self.ng(g) {
                    let dg = (dout * &self.nodes[x].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.acc(grads, g, dg);
                }
            }
            Op::Exp(a) => self.acc(grads, a, dout * &self.nodes[node].value),
            Op::Tanh(a) => {
                let y = &self.nodes[node].value;
                self.acc(grads, a, dout * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a].value;
                self.acc(grads, a, dout * &x.mapv(gelu_grad_scalar));
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (dout − rowsum(dout ⊙ y))
                let y = &self.nodes[node].value;
                let mut dx = dout.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                        *d = (*d - dot) * y;
                    }
                }
                self.acc(grads, a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = dout − softmax ⊙ rowsum(dout); softmax = exp(value)
                let y = &self.nodes[node].value;
                let mut dx = dout.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dsum: f64 = drow.sum();
                    for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= y.exp() * dsum;
                    }
                }
                self.acc(grads, a, dx);
            }
            Op::LayerNormRows(a, eps) => {
                let x = &self.nodes[a].value;
                let y = &self.nodes[node].value;
                let d = x.ncols() as f64;
                let mut dx = Matrix::zeros(x.raw_dim());
                for ((xrow, yrow), (drow, mut out)) in x
                    .rows()
                    .into_iter()
                    .zip(y.rows())
                    .zip(dout.rows().into_iter().zip(dx.rows_mut()))
                {
                    let mean = xrow.sum() / d;
                    let var = xrow.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let dmean: f64 = drow.sum() / d;
                    let dymean: f64 =
                        drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    for ((o, dy), yv) in out.iter_mut().zip(drow.iter()).zip(yrow.iter()) {
                        *o = inv * (dy - dmean - yv * dymean);
                    }
                }
                self.acc(grads, a, dx);
            }
            Op::Transpose(a) => self.acc(grads, a, dout.t().to_owned()),
            Op::SumAll(a) => {
                let c = dout[(0, 0)];
                let shape = self.nodes[a].value.raw_dim();
                self.acc(grads, a, Matrix::from_elem(shape, c));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.len() as f64;
                let c = dout[(0, 0)] / n;
                let shape = self.nodes[a].value.raw_dim();
                self.acc(grads, a, Matrix::from_elem(shape, c));
            }
            Op::SliceRows(a, start) => {
                let mut dx = Matrix::zeros(self.nodes[a].value.raw_dim());
                dx.slice_mut(s![start..start + dout.nrows(), ..])
                    .assign(dout);
                self.acc(grads, a, dx);
            }
            Op::SliceCols(a, start) => {
                let mut dx = Matrix::zeros(self.nodes[a].value.raw_dim());
                dx.slice_mut(s![.., start..start + dout.ncols()])
                    .assign(dout);
                self.acc(grads, a, dx);
            }
            Op::ConcatRows(ref parts) => {
                let mut row = 0;
                for &p in parts {
                    let n = self.nodes[p].value.nrows();
                    if self.ng(p) {
                        let d = dout.slice(s![row..row + n, ..]).to_owned();
                        self.acc(grads, p, d);
                    }
                    row += n;
                }
            }
            Op::ConcatCols(ref parts) => {
                let mut col = 0;
                for &p in parts {
                    let n = self.nodes[p].value.ncols();
                    if self.ng(p) {
                        let d = dout.slice(s![.., col..col + n]).to_owned();
                        self.acc(grads, p, d);
                    }
                    col += n;
                }
            }
        }
    }
}
