use std::collections::BTreeMap;

use ndarray::{Array2, Axis, Zip};

use super::linalg::{matmul, matmul_nt, matmul_tn};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Array2<f64>),
    Borrowed(&'a Array2<f64>),
}

impl Value<'_> {
    fn get(&self) -> &Array2<f64> {
        match self {
            Value::Owned(a) => a,
            Value::Borrowed(a) => a,
        }
    }
}

enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    SoftmaxRows(Var),
    RowDot(Var, Var),
    Dot(Var, Var),
    MeanRows(Var),
    Hinge(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations in execution order so gradients can be pulled back.
///
/// Parameters and large constants are borrowed rather than copied; the tape
/// therefore cannot outlive them. [`Tape::backward`] consumes the tape and
/// returns the gradients keyed by parameter name.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_same(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.nodes[v.0].value.get()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.value(v);
        if a.dim() != (1, 1) {
            return Err(Error::shape("scalar", format!("{:?}", a.shape())));
        }
        Ok(a[[0, 0]])
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_ref(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf; its gradient is reported under `param.name`.
    pub fn param(&mut self, param: &'a Parameter) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(param.value.array()),
            op: Op::Param(param.name.clone()),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", x.shape(), y.shape())));
        }
        let out = matmul(x.view(), y.view());
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(Error::shape("matmul_nt", format!("{:?} · {:?}ᵀ", x.shape(), y.shape())));
        }
        let out = matmul_nt(x.view(), y.view());
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.nrows() != 1 || r.ncols() != x.ncols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape(), r.shape())));
        }
        let out = x + r;
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies row i of `a` by `w[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(w));
        if c.ncols() != 1 || c.nrows() != x.nrows() {
            return Err(Error::shape("scale_rows", format!("{:?} by {:?}", x.shape(), c.shape())));
        }
        let out = x * c;
        Ok(self.push(out, Op::ScaleRows(a, w), &[a, w]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            softmax_in_place(row.as_slice_mut().expect("row-major"));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// `n x 1` column of row-wise inner products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("row_dot", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((x.nrows(), 1));
        Zip::from(out.rows_mut())
            .and(x.rows())
            .and(y.rows())
            .for_each(|mut o, xr, yr| o[0] = xr.dot(&yr));
        Ok(self.push(out, Op::RowDot(a, b), &[a, b]))
    }

    /// Full inner product as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("dot", self.value(a), self.value(b))?;
        let s: f64 = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, &x, &y| acc + x * y);
        Ok(self.push(Array2::from_elem((1, 1), s), Op::Dot(a, b), &[a, b]))
    }

    /// Mean over rows, giving `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / x.nrows() as f64;
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// `max(0, x)` elementwise.
    pub fn hinge(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Hinge(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), s), Op::Mean(a), &[a])
    }

    /// Scales each row to unit Euclidean norm. A zero row is an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { row: i });
            }
            row /= n;
            norms.push(n);
        }
        Ok(self.push(out, Op::NormalizeRows(a, norms), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.value(*first).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .expect("rows checked")
            .as_standard_layout()
            .into_owned();
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Column `j` as an `n x 1` node.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let x = self.value(a);
        if j >= x.ncols() {
            return Err(Error::shape("column", format!("column {j} of {:?}", x.shape())));
        }
        let out = x.column(j).to_owned().insert_axis(Axis(1));
        Ok(self.push(out, Op::Column(a, j), &[a]))
    }

    /// Pulls `d loss / d param` back through every recorded node.
    ///
    /// Nodes are visited once each in reverse recording order, which is a
    /// reverse topological order because inputs are always recorded first.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = node.value.get();
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.entry(name.clone())
                        .and_modify(|t: &mut Tensor| t.0 += &g)
                        .or_insert_with(|| Tensor(g));
                }
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let ga = matmul_nt(g.view(), self.value(*b).view());
                        acc(&mut grads, *a, ga);
                    }
                    if self.wants(*b) {
                        let gb = matmul_tn(self.value(*a).view(), g.view());
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.wants(*a) {
                        let ga = matmul(g.view(), self.value(*b).view());
                        acc(&mut grads, *a, ga);
                    }
                    if self.wants(*b) {
                        let gb = matmul_tn(g.view(), self.value(*a).view());
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.wants(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.wants(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.wants(*b) {
                        acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::ScaleRows(a, w) => {
                    if self.wants(*w) {
                        let x = self.value(*a);
                        let mut gw = Array2::zeros((x.nrows(), 1));
                        Zip::from(gw.rows_mut())
                            .and(g.rows())
                            .and(x.rows())
                            .for_each(|mut o, gr, xr| o[0] = gr.dot(&xr));
                        acc(&mut grads, *w, gw);
                    }
                    if self.wants(*a) {
                        acc(&mut grads, *a, &g * self.value(*w));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &t| *g *= 1.0 - t * t);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &s| *g *= s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= if x > 0.0 { 1.0 } else { *slope });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g;
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let inner = gr.dot(&yr);
                        Zip::from(&mut gr).and(&yr).for_each(|g, &p| *g = p * (*g - inner));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    // g is n x 1
                    if self.wants(*a) {
                        acc(&mut grads, *a, self.value(*b) * &g);
                    }
                    if self.wants(*b) {
                        acc(&mut grads, *b, self.value(*a) * &g);
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[[0, 0]];
                    if self.wants(*a) {
                        acc(&mut grads, *a, self.value(*b) * s);
                    }
                    if self.wants(*b) {
                        acc(&mut grads, *b, self.value(*a) * s);
                    }
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let row = &g / x.nrows() as f64;
                    let ga = row.broadcast(x.dim()).expect("1 x n").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Hinge(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| if x <= 0.0 { *g = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g / self.value(*a);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| if x < *lo || x > *hi { *g = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Array2::from_elem(x.dim(), g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
                }
                Op::NormalizeRows(a, norms) => {
                    let mut ga = g;
                    for ((mut gr, yr), &n) in ga.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let inner = gr.dot(&yr);
                        Zip::from(&mut gr).and(&yr).for_each(|g, &u| *g = (*g - u * inner) / n);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        if self.wants(p) {
                            let slice = g.slice(ndarray::s![.., start..start + width]).to_owned();
                            acc(&mut grads, p, slice);
                        }
                        start += width;
                    }
                }
                Op::Column(a, j) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.dim());
                    ga.column_mut(*j).assign(&g.column(0));
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients(out))
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Max-subtracted softmax of a slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}
