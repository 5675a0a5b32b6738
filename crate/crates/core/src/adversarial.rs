//! Discriminator and Gaussian prior for the adversarial regularizer.
//!
//! The discriminator `D` maps a latent code to the probability that it was
//! drawn from the prior. It is trained to minimize
//! `mean(-log D(real)) + mean(-log(1 - D(fake)))`; the encoder is then trained
//! to minimize `mean(-log D(fake))` with `D` held fixed.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Linear, Parameter, Tape, Var};

/// Slope of the hidden-layer leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub layers: Vec<Linear>,
}

impl DiscriminatorParams {
    /// `latent -> hidden.. -> 1`
    pub fn new<R: Rng + ?Sized>(latent: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut widths = vec![latent];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("discriminator.{i}"), w[0], w[1], rng))
            .collect();
        DiscriminatorParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    /// Records `D(x)` as a `B x 1` column of probabilities.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, x: Var, trainable: bool) -> Result<Var> {
        let width = tape.value(x).ncols();
        if width != self.input_dim() {
            return Err(Error::argument(format!(
                "discriminator expects dimension {}, got {width}",
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if trainable {
                layer.record(tape, h)?
            } else {
                layer.record_frozen(tape, h)?
            };
            h = if i < last {
                tape.leaky_relu(h, LEAKY_SLOPE)
            } else {
                tape.sigmoid(h)
            };
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
    pub dim: usize,
}

impl PriorSpec {
    pub fn gaussian(std: f64, dim: usize) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::argument(format!("prior std must be positive, got {std}")));
        }
        if dim == 0 {
            return Err(Error::argument("prior dimension must be positive"));
        }
        Ok(PriorSpec { mean: 0.0, std, dim })
    }
}

/// `n x dim` i.i.d. Gaussian samples, drawn row by row.
pub fn sample_prior<R: Rng + ?Sized>(spec: &PriorSpec, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::argument("need at least one prior sample"));
    }
    let normal = Normal::new(spec.mean, spec.std).map_err(|e| Error::argument(e.to_string()))?;
    let data: Vec<f64> = (0..n * spec.dim).map(|_| normal.sample(rng)).collect();
    Ok(Array2::from_shape_vec((n, spec.dim), data).expect("length matches"))
}

/// `D(x)` for every row of `x`.
pub fn discriminate(x: ArrayView2<'_, f64>, params: &DiscriminatorParams) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let input = tape.constant(x.to_owned());
    let out = params.record(&mut tape, input, false)?;
    Ok(tape.value(out).column(0).to_owned())
}

fn neg_log(p: f64) -> f64 {
    -p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
}

/// Discriminator loss from already-evaluated probabilities.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::argument("discriminator loss needs non-empty batches"));
    }
    let r: f64 = real.iter().map(|&p| neg_log(p)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|&p| neg_log(1.0 - p)).sum::<f64>() / fake.len() as f64;
    Ok(r + f)
}

/// `mean(-log D(x_i))` from already-evaluated probabilities.
pub fn generator_loss(fake: &[f64]) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::argument("generator loss needs a non-empty batch"));
    }
    Ok(fake.iter().map(|&p| neg_log(p)).sum::<f64>() / fake.len() as f64)
}

fn record_mean_neg_log<'a>(tape: &mut Tape<'a>, p: Var) -> Var {
    let c = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let l = tape.log(c);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

/// Records the discriminator loss with trainable `D`. Both inputs are `B x d`.
pub fn record_discriminator_loss<'a>(
    tape: &mut Tape<'a>,
    params: &'a DiscriminatorParams,
    real: Var,
    fake: Var,
) -> Result<Var> {
    if tape.value(real).nrows() == 0 || tape.value(fake).nrows() == 0 {
        return Err(Error::argument("discriminator loss needs non-empty batches"));
    }
    let d_real = params.record(tape, real, true)?;
    let d_fake = params.record(tape, fake, true)?;
    let real_term = record_mean_neg_log(tape, d_real);
    let one_minus = {
        let neg = tape.scale(d_fake, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let fake_term = record_mean_neg_log(tape, one_minus);
    tape.add(real_term, fake_term)
}

/// Records `mean(-log D(fake))` with `D` frozen.
pub fn record_generator_loss<'a>(tape: &mut Tape<'a>, params: &'a DiscriminatorParams, fake: Var) -> Result<Var> {
    if tape.value(fake).nrows() == 0 {
        return Err(Error::argument("generator loss needs a non-empty batch"));
    }
    let d = params.record(tape, fake, false)?;
    Ok(record_mean_neg_log(tape, d))
}
