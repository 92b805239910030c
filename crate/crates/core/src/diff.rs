//! Reverse-mode differentiation over batched matrices.
//!
//! A [`Graph`] records every primitive applied to its nodes during the
//! forward pass. [`Graph::backward`] then walks the record in reverse and
//! accumulates the gradient of a scalar root into every node that was built
//! from a trainable leaf ([`Graph::param`]). Constant leaves never receive
//! gradients, so frozen networks and data can share the same code path.
//!
//! Only the primitives exposed as methods exist; anything else simply cannot
//! be put on a tape.
//!
//! Piecewise primitives (rectifier, `min`, `clamp`) are subdifferentiated
//! deterministically: the rectifier passes gradient only for strictly
//! positive inputs, `min` routes to the first argument on ties, and `clamp`
//! passes gradient on the closed interval. The graph also tracks how close
//! any trainable path came to such a kink ([`Graph::kink_margin`]) so finite
//! difference checks can skip non-smooth points.

use crate::linalg::{gemm, Matrix};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ColAffine(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Mean(Var),
    Sum(Var),
    SumCols(Var),
    Cols(Var, usize),
    Concat(Vec<Var>),
    RowLinear(Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    trainable: bool,
}

/// Tape of batched matrix operations.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kink_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from a kink (rectifier at 0, `min` tie, `clamp`
    /// bound) observed on any trainable path so far.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn push(&mut self, value: Matrix, op: Op, trainable: bool) -> Var {
        self.nodes.push(Node { value, op, trainable });
        Var(self.nodes.len() - 1)
    }

    fn note_kink(&mut self, trainable: bool, distance: f64) {
        if trainable {
            self.kink_margin = self.kink_margin.min(distance.abs());
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.map(f);
        let t = node.trainable;
        self.push(value, op, t)
    }

    fn binary_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "{what}: shape mismatch");
        let value = va.zip_map(vb, f);
        let t = self.nodes[a.0].trainable || self.nodes[b.0].trainable;
        self.push(value, op, t)
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(&self.nodes[a.0].value, false, &self.nodes[b.0].value, false);
        let t = self.nodes[a.0].trainable || self.nodes[b.0].trainable;
        self.push(value, Op::MatMul(a, b), t)
    }

    /// Adds the `1×n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(vx.cols(), vb.cols(), "add_row: width mismatch");
        let mut value = vx.clone();
        for r in 0..value.rows() {
            for (v, bias) in value.row_mut(r).iter_mut().zip(vb.as_slice()) {
                *v += bias;
            }
        }
        let t = self.nodes[x.0].trainable || self.nodes[b.0].trainable;
        self.push(value, Op::AddRow(x, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies every entry of `x` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let factor = self.nodes[s.0].value.item();
        let value = self.nodes[x.0].value.map(|v| v * factor);
        let t = self.nodes[x.0].trainable || self.nodes[s.0].trainable;
        self.push(value, Op::MulScalar(x, s), t)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, |x| x + offset, Op::Shift(a))
    }

    /// Per-column affine map `y[r][c] = x[r][c]·scale[c] + offset[c]`.
    pub fn col_affine(&mut self, x: Var, scale: &[f64], offset: &[f64]) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.cols(), scale.len(), "col_affine: scale width mismatch");
        assert_eq!(vx.cols(), offset.len(), "col_affine: offset width mismatch");
        let mut value = vx.clone();
        for r in 0..value.rows() {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * scale[c] + offset[c];
            }
        }
        let t = self.nodes[x.0].trainable;
        self.push(value, Op::ColAffine(x, scale.to_vec()), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let margin = self.nodes[a.0].value.as_slice().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(self.nodes[a.0].trainable, margin);
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: empty interval");
        let margin = self.nodes[a.0]
            .value
            .as_slice()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min((v - lo).abs()).min((v - hi).abs()));
        self.note_kink(self.nodes[a.0].trainable, margin);
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties take the first argument.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let t = self.nodes[a.0].trainable || self.nodes[b.0].trainable;
        let margin = self.nodes[a.0]
            .value
            .as_slice()
            .iter()
            .zip(self.nodes[b.0].value.as_slice())
            .fold(f64::INFINITY, |m, (x, y)| m.min((x - y).abs()));
        self.note_kink(t, margin);
        self.binary_same(a, b, "min", |x, y| if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Mean over every entry, as a `1×1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(!v.is_empty(), "mean of an empty matrix");
        let value = Matrix::scalar(v.sum() / v.len() as f64);
        let t = self.nodes[a.0].trainable;
        self.push(value, Op::Mean(a), t)
    }

    /// Sum over every entry, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.nodes[a.0].value.sum());
        let t = self.nodes[a.0].trainable;
        self.push(value, Op::Sum(a), t)
    }

    /// Sum of each row, as a column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let sums: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let t = self.nodes[a.0].trainable;
        self.push(Matrix::column_vector(&sums), Op::SumCols(a), t)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(start + len <= v.cols(), "cols: range {start}..{} out of {}", start + len, v.cols());
        let mut value = Matrix::zeros(v.rows(), len);
        for r in 0..v.rows() {
            value.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let t = self.nodes[a.0].trainable;
        self.push(value, Op::Cols(a, start), t)
    }

    pub fn col(&mut self, a: Var, index: usize) -> Var {
        self.cols(a, index, 1)
    }

    /// Side-by-side concatenation of equal-height nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat: height mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let t = parts.iter().any(|p| self.nodes[p.0].trainable);
        self.push(value, Op::Concat(parts.to_vec()), t)
    }

    /// Per-row linear map: row `r` of the result is `G_r · u_r`, where
    /// `gains` holds each `n×m` matrix `G_r` flattened row-major in row `r`.
    pub fn row_linear(&mut self, u: Var, gains: Matrix, out_dim: usize) -> Var {
        let vu = &self.nodes[u.0].value;
        let m = vu.cols();
        assert_eq!(gains.rows(), vu.rows(), "row_linear: batch mismatch");
        assert_eq!(gains.cols(), out_dim * m, "row_linear: gain width mismatch");
        let mut value = Matrix::zeros(vu.rows(), out_dim);
        for r in 0..vu.rows() {
            let g = gains.row(r);
            let ur = vu.row(r);
            for j in 0..out_dim {
                value[(r, j)] = (0..m).map(|k| g[j * m + k] * ur[k]).sum();
            }
        }
        let t = self.nodes[u.0].trainable;
        self.push(value, Op::RowLinear(u, gains), t)
    }

    /// Reverse sweep from the `1×1` node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].trainable {
            return Gradients { grads };
        }
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.trainable || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.nodes[v.0].trainable {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].trainable;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, gemm(dy, false, val(*b), true));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, gemm(val(*a), true, dy, false));
                }
            }
            Op::AddRow(x, b) => {
                if wants(*b) {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (acc, d) in db.as_mut_slice().iter_mut().zip(dy.row(r)) {
                            *acc += d;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, dy.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if wants(*b) {
                    self.accumulate(grads, *b, dy.map(|d| -d));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, dy.zip_map(val(*b), |d, y| d * y));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, dy.zip_map(val(*a), |d, x| d * x));
                }
            }
            Op::MulScalar(x, s) => {
                let factor = val(*s).item();
                if wants(*x) {
                    self.accumulate(grads, *x, dy.map(|d| d * factor));
                }
                if wants(*s) {
                    let ds = dy.as_slice().iter().zip(val(*x).as_slice()).map(|(d, v)| d * v).sum();
                    self.accumulate(grads, *s, Matrix::scalar(ds));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, dy.map(|d| d * f)),
            Op::Shift(a) => self.accumulate(grads, *a, dy.clone()),
            Op::ColAffine(a, scale) => {
                let mut d = dy.clone();
                for r in 0..d.rows() {
                    for (v, s) in d.row_mut(r).iter_mut().zip(scale) {
                        *v *= s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                self.accumulate(grads, *a, dy.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 }))
            }
            Op::Tanh(a) => self.accumulate(grads, *a, dy.zip_map(&node.value, |d, y| d * (1.0 - y * y))),
            Op::Exp(a) => self.accumulate(grads, *a, dy.zip_map(&node.value, |d, y| d * y)),
            Op::Log(a) => self.accumulate(grads, *a, dy.zip_map(val(*a), |d, x| d / x)),
            Op::Square(a) => self.accumulate(grads, *a, dy.zip_map(val(*a), |d, x| 2.0 * x * d)),
            Op::Sin(a) => self.accumulate(grads, *a, dy.zip_map(val(*a), |d, x| d * x.cos())),
            Op::Cos(a) => self.accumulate(grads, *a, dy.zip_map(val(*a), |d, x| -d * x.sin())),
            Op::Softplus(a) => self.accumulate(grads, *a, dy.zip_map(val(*a), |d, x| d * sigmoid(x))),
            Op::Clamp(a, lo, hi) => self.accumulate(
                grads,
                *a,
                dy.zip_map(val(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 }),
            ),
            Op::Min(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let mut g = dy.clone();
                    for ((g, x), y) in g.as_mut_slice().iter_mut().zip(va.as_slice()).zip(vb.as_slice()) {
                        if x > y {
                            *g = 0.0;
                        }
                    }
                    self.accumulate(grads, *a, g);
                }
                if wants(*b) {
                    let mut g = dy.clone();
                    for ((g, x), y) in g.as_mut_slice().iter_mut().zip(va.as_slice()).zip(vb.as_slice()) {
                        if x <= y {
                            *g = 0.0;
                        }
                    }
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Mean(a) => {
                let v = val(*a);
                let d = dy.item() / v.len() as f64;
                self.accumulate(grads, *a, Matrix::filled(v.rows(), v.cols(), d));
            }
            Op::Sum(a) => {
                let v = val(*a);
                self.accumulate(grads, *a, Matrix::filled(v.rows(), v.cols(), dy.item()));
            }
            Op::SumCols(a) => {
                let v = val(*a);
                let mut g = Matrix::zeros(v.rows(), v.cols());
                for r in 0..v.rows() {
                    let d = dy[(r, 0)];
                    g.row_mut(r).iter_mut().for_each(|x| *x = d);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Cols(a, start) => {
                let v = val(*a);
                let mut g = Matrix::zeros(v.rows(), v.cols());
                for r in 0..v.rows() {
                    g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if wants(*p) {
                        let mut g = Matrix::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, g);
                    }
                    offset += w;
                }
            }
            Op::RowLinear(u, gains) => {
                let vu = val(*u);
                let m = vu.cols();
                let n = dy.cols();
                let mut g = Matrix::zeros(vu.rows(), m);
                for r in 0..vu.rows() {
                    let gr = gains.row(r);
                    for k in 0..m {
                        g[(r, k)] = (0..n).map(|j| gr[j * m + k] * dy[(r, j)]).sum();
                    }
                }
                self.accumulate(grads, *u, g);
            }
        }
    }
}

/// Evaluates the scalar function `f` of `params` on a fresh tape and returns
/// its value together with the gradient for every parameter.
///
/// Panics if `f` does not return a `1×1` node.
pub fn value_and_grad<F>(params: &[Matrix], f: F) -> (f64, Vec<Matrix>)
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars);
    let value = g.scalar(root);
    let grads = g.backward(root);
    let out = vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();
    (value, out)
}
