//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multiscale_embed::adversarial::{record_discriminator_loss, record_generator_loss, DiscriminatorParams};
use multiscale_embed::attention::{
    normalize_rows, record_fusion, record_reconstruction_loss, AttentionParams, AutoencoderParams, BatchInputs,
};
use multiscale_embed::graph::{normalize, power_family, Graph};
use multiscale_embed::tensor::{Gradients, Parameter, Tape};
use multiscale_embed::Result;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn erdos_renyi(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges).unwrap()
}

/// Finite-difference stencil for one coordinate.
#[derive(Debug, Clone, Copy)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central(f64),
    /// Richardson extrapolation of central differences at `h` and `h/2`.
    /// `h` shrinks until forward and backward one-sided estimates agree,
    /// which fails whenever a kink lies within `2h` of the point.
    Richardson(f64),
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub failed: usize,
    /// Largest |analytic| among coordinates over tolerance.
    pub largest_failed: f64,
    pub worst: f64,
    pub worst_at: String,
}

impl FdReport {
    pub fn summary(&self, label: &str) -> String {
        let mut line = format!("{label}: {} coords, max rel err {:.2e}", self.checked, self.worst);
        if self.failed > 0 {
            line += &format!(
                ", {} over tolerance with |grad| <= {:.1e} [worst {}]",
                self.failed, self.largest_failed, self.worst_at
            );
        }
        line
    }
}

/// Parameters of the attention/autoencoder/discriminator stack on a small graph.
pub struct GradFixture {
    pub attention: AttentionParams,
    pub autoencoder: AutoencoderParams,
    pub discriminator: DiscriminatorParams,
    batch: BatchInputs,
    negatives: Vec<Array2<f64>>,
    real: Array2<f64>,
}

type LossFn = fn(&GradFixture) -> Result<(f64, Gradients)>;

impl GradFixture {
    /// Random graph without isolated nodes, K = 3, hidden 16, latent 6,
    /// 3 negatives per node and a widened attention matrix.
    pub fn new(nodes: usize, edge_prob: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = loop {
            let g = erdos_renyi(nodes, edge_prob, &mut rng);
            if g.isolated_nodes().is_empty() {
                break g;
            }
        };
        let family = power_family(&normalize(&g)?, 3)?;
        let all: Vec<usize> = (0..nodes).collect();
        let batch = BatchInputs::gather(&family, &all);
        let negatives = (1..=3)
            .map(|j| {
                let picks: Vec<usize> = all.iter().map(|&n| (n + 3 * j) % nodes).collect();
                normalize_rows(family.gather_context(&picks))
            })
            .collect::<Result<_>>()?;
        let real = Array2::from_shape_fn((nodes, 6), |_| rng.random_range(-2.0..2.0));
        let mut attention = AttentionParams::new(nodes, None, &mut rng);
        let autoencoder = AutoencoderParams::new(nodes, &[16], 6, &mut rng);
        let discriminator = DiscriminatorParams::new(6, &[16, 16], &mut rng);
        // glorot M is too small to move attention away from uniform
        for p in attention.params_mut() {
            p.value.array_mut().mapv_inplace(|v| v * 20.0);
        }
        Ok(GradFixture {
            attention,
            autoencoder,
            discriminator,
            batch,
            negatives,
            real,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.attention.params_mut();
        v.extend(self.autoencoder.params_mut());
        v.extend(self.discriminator.params_mut());
        v
    }

    pub fn reconstruction(&self) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let f = record_fusion(&mut tape, &self.batch, &self.attention, true)?;
        let code = self.autoencoder.record_encoder(&mut tape, f.fused, true)?;
        let r = self.autoencoder.record_decoder(&mut tape, code)?;
        let (_, loss) = record_reconstruction_loss(&mut tape, r, f.fused, &self.negatives)?;
        let v = tape.scalar(loss)?;
        Ok((v, tape.backward(loss)?))
    }

    pub fn discriminator_loss(&self) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let f = record_fusion(&mut tape, &self.batch, &self.attention, false)?;
        let code = self.autoencoder.record_encoder(&mut tape, f.fused, false)?;
        let r = tape.constant_ref(&self.real);
        let loss = record_discriminator_loss(&mut tape, &self.discriminator, r, code)?;
        let v = tape.scalar(loss)?;
        Ok((v, tape.backward(loss)?))
    }

    pub fn generator_loss(&self) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let f = record_fusion(&mut tape, &self.batch, &self.attention, true)?;
        let code = self.autoencoder.record_encoder(&mut tape, f.fused, true)?;
        let loss = record_generator_loss(&mut tape, &self.discriminator, code)?;
        let v = tape.scalar(loss)?;
        Ok((v, tape.backward(loss)?))
    }

    /// The three losses with the parameter groups each one trains.
    pub fn losses() -> [(&'static str, &'static [&'static str], LossFn); 3] {
        [
            ("reconstruction", &["attention", "encoder", "decoder"], GradFixture::reconstruction),
            ("discriminator", &["discriminator"], GradFixture::discriminator_loss),
            ("generator", &["attention", "encoder"], GradFixture::generator_loss),
        ]
    }

    fn coord(&mut self, name: &str, idx: (usize, usize)) -> &mut f64 {
        let p = self.params_mut().into_iter().find(|p| p.name == name).expect("known parameter");
        &mut p.value.array_mut()[idx]
    }

    /// Loss with one coordinate shifted by `offset`, restored afterwards.
    fn shifted(&mut self, loss: LossFn, name: &str, idx: (usize, usize), offset: f64) -> Result<f64> {
        let original = *self.coord(name, idx);
        *self.coord(name, idx) = original + offset;
        let v = loss(self).map(|(v, _)| v);
        *self.coord(name, idx) = original;
        v
    }

    fn central(&mut self, loss: LossFn, name: &str, idx: (usize, usize), h: f64) -> Result<f64> {
        Ok((self.shifted(loss, name, idx, h)? - self.shifted(loss, name, idx, -h)?) / (2.0 * h))
    }

    /// Second-order one-sided difference from the side given by the sign of `h`.
    fn one_sided(&mut self, loss: LossFn, name: &str, idx: (usize, usize), h: f64) -> Result<f64> {
        let f0 = loss(self)?.0;
        let f1 = self.shifted(loss, name, idx, h)?;
        let f2 = self.shifted(loss, name, idx, 2.0 * h)?;
        Ok((-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h))
    }

    fn adaptive(&mut self, loss: LossFn, name: &str, idx: (usize, usize), mut h: f64, tol: f64) -> Result<f64> {
        let scale = loss(self)?.0.abs().max(1.0);
        loop {
            // rounding in f(x ± 2h) relative to the step
            let noise = 16.0 * f64::EPSILON * scale / h;
            let forward = self.one_sided(loss, name, idx, h)?;
            let backward = self.one_sided(loss, name, idx, -h)?;
            if (forward - backward).abs() <= tol * forward.abs().max(backward.abs()) + noise || h < 1e-6 {
                let (c1, c2) = (self.central(loss, name, idx, h)?, self.central(loss, name, idx, h / 2.0)?);
                return Ok((4.0 * c2 - c1) / 3.0);
            }
            h /= 4.0;
        }
    }

    /// Compares tape gradients of `loss` with finite differences on every
    /// coordinate of the parameters whose names start with one of `groups`.
    /// Coordinates where both gradients are at most `min_grad` are skipped.
    pub fn check(
        &mut self,
        loss: LossFn,
        groups: &[&str],
        stencil: Stencil,
        min_grad: f64,
        rel_tol: f64,
    ) -> Result<FdReport> {
        let mut report = FdReport::default();
        let (_, grads) = loss(self)?;
        let params: Vec<(String, (usize, usize))> = self
            .params_mut()
            .iter()
            .filter(|p| groups.iter().any(|g| p.name.starts_with(g)))
            .map(|p| (p.name.clone(), p.value.array().dim()))
            .collect();
        for (name, shape) in &params {
            let analytic = grads.get(name).map(|g| g.array().clone()).unwrap_or_else(|| Array2::zeros(*shape));
            for idx in ndarray::indices(*shape) {
                let numeric = match stencil {
                    Stencil::Central(h) => self.central(loss, name, idx, h)?,
                    Stencil::Richardson(h) => self.adaptive(loss, name, idx, h, 0.1 * rel_tol)?,
                };
                let a = analytic[idx];
                if a.abs().max(numeric.abs()) <= min_grad {
                    continue;
                }
                report.checked += 1;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                if rel >= rel_tol {
                    report.failed += 1;
                    report.largest_failed = report.largest_failed.max(a.abs());
                }
                if rel > report.worst {
                    report.worst = rel;
                    report.worst_at = format!("{name}{idx:?} analytic {a:.6e} numeric {numeric:.6e}");
                }
            }
        }
        Ok(report)
    }
}
