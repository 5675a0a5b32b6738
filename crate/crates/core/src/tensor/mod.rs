//! Dense 2-D tensors, named parameters and a small reverse-mode tape.
//!
//! Every value is a row-major `f64` matrix; vectors are `1 x n` rows and
//! scalars are `1 x 1`. This is enough for the attention, autoencoder,
//! discriminator and logistic-regression graphs built elsewhere in the crate.

mod adam;
pub mod linalg;
mod tape;

pub use adam::{Adam, AdamConfig, Moments};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::softmax_in_place;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor(Array2<f64>);

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor(Array2::zeros((rows, cols)))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor(Array2::from_elem((1, 1), v))
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array2::from_shape_vec((rows, cols), data)
            .map(Tensor)
            .map_err(|e| Error::shape("from_vec", e.to_string()))
    }

    /// A `1 x n` row.
    pub fn row(v: Array1<f64>) -> Self {
        let n = v.len();
        Tensor(v.into_shape_with_order((1, n)).expect("contiguous"))
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.0.dim() != (1, 1) {
            return Err(Error::shape("item", format!("{:?} is not a scalar", self.shape())));
        }
        Ok(self.0[[0, 0]])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(rng.random_range(-bound..bound));
        }
        Tensor(Array2::from_shape_vec((rows, cols), data).expect("sized"))
    }
}

impl From<Array2<f64>> for Tensor {
    fn from(a: Array2<f64>) -> Self {
        Tensor(a)
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.0.fill(0.0);
    }

    /// Adds this parameter's entry of `grads`, if any.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.get(&self.name) {
            self.grad.0 += g.array();
        }
    }
}

/// A dense affine map `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::new(format!("{prefix}.weight"), Tensor::glorot(input, output, rng)),
            bias: Parameter::new(format!("{prefix}.bias"), Tensor::zeros(1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.cols()
    }

    /// Records the layer with trainable weights.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    /// Records the layer with its weights held fixed.
    pub fn record_frozen<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.constant_ref(self.weight.value.array());
        let b = tape.constant_ref(self.bias.value.array());
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::glorot(10, 14, &mut rng);
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(t.array().iter().all(|v| v.abs() < bound));
        assert_eq!(t.shape(), &[10, 14]);
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(1, 2).item().is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert_eq!(Tensor::from_vec(2, 3, vec![0.0; 6]).unwrap().len(), 6);
    }
}
