//! Three-phase mini-batch training.
//!
//! Each batch runs, in order:
//! 1. reconstruction: hinge loss minimized over `M`, encoder and decoder;
//! 2. discriminator: fresh prior samples versus frozen codes, over `D` only;
//! 3. generator: `λ_adv · mean(-log D(code))` over `M` and the encoder, `D` frozen.
//!
//! Phases 2 and 3 are skipped when the adversarial component is off.
//!
//! All randomness comes from one ChaCha8 stream seeded with `seed`, consumed
//! in this order: parameter initialization (attention, encoder, decoder,
//! discriminator, each weight row-major); then per epoch a shuffle of the
//! trainable nodes; then per batch the negatives of each batch node in batch
//! order, followed by the prior samples.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{record_discriminator_loss, record_generator_loss, sample_prior, DiscriminatorParams, PriorSpec};
use crate::attention::{
    record_fusion, record_reconstruction_loss, sample_negative_nodes, AttentionParams,
    AutoencoderParams, BatchInputs,
};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::graph::{normalize, power_family, Graph, ScaleFamily, ScaleOrientation};
use crate::tensor::{Adam, AdamConfig, Parameter, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// K, number of transition scales.
    pub max_scale: usize,
    /// d, latent dimension.
    pub latent_dim: usize,
    /// m, negatives per node.
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub adversarial: bool,
    pub prior_std: f64,
    /// λ_adv, weight on the generator loss.
    pub adversarial_weight: f64,
    /// Width of the encoder/decoder hidden layer.
    pub hidden_dim: usize,
    /// Width of both discriminator hidden layers.
    pub discriminator_hidden: usize,
    pub orientation: ScaleOrientation,
    /// Factor `M = U Vᵀ` with this rank instead of storing it densely.
    pub attention_rank: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_scale: 8,
            latent_dim: 128,
            negatives: 7,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            adversarial: true,
            prior_std: 1.0,
            adversarial_weight: 1.0,
            hidden_dim: 512,
            discriminator_hidden: 512,
            orientation: ScaleOrientation::Row,
            attention_rank: None,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against a graph with `trainable` non-isolated nodes.
    pub fn validate(&self, trainable: usize) -> Result<()> {
        let positive = [
            ("max_scale", self.max_scale),
            ("latent_dim", self.latent_dim),
            ("negatives", self.negatives),
            ("batch_size", self.batch_size),
            ("hidden_dim", self.hidden_dim),
            ("discriminator_hidden", self.discriminator_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::argument(format!("{name} must be positive")));
            }
        }
        if self.max_scale > crate::graph::MAX_SCALE {
            return Err(Error::argument(format!(
                "max_scale {} exceeds {}",
                self.max_scale,
                crate::graph::MAX_SCALE
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::argument("lr must be positive"));
        }
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::argument("prior_std must be positive"));
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return Err(Error::argument("adversarial_weight must be non-negative"));
        }
        if self.attention_rank == Some(0) {
            return Err(Error::argument("attention_rank must be positive"));
        }
        if self.negatives >= trainable {
            return Err(Error::argument(format!(
                "{} negatives need more than {trainable} connected nodes",
                self.negatives
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Attention, autoencoder and discriminator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attention: AttentionParams,
    pub autoencoder: AutoencoderParams,
    pub discriminator: DiscriminatorParams,
}

impl ModelParams {
    pub fn new(nodes: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let attention = AttentionParams::new(nodes, cfg.attention_rank, rng);
        let autoencoder = AutoencoderParams::new(nodes, &[cfg.hidden_dim], cfg.latent_dim, rng);
        let discriminator =
            DiscriminatorParams::new(cfg.latent_dim, &[cfg.discriminator_hidden, cfg.discriminator_hidden], rng);
        ModelParams {
            attention,
            autoencoder,
            discriminator,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.attention.params();
        out.extend(self.autoencoder.params());
        out.extend(self.discriminator.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.attention.params_mut();
        out.extend(self.autoencoder.params_mut());
        out.extend(self.discriminator.params_mut());
        out
    }
}

/// Losses of one batch or, averaged over nodes, one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLosses {
    pub reconstruction: f64,
    pub discriminator: Option<f64>,
    pub generator: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<PhaseLosses>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(nodes: usize, config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::new(nodes, &config, &mut rng);
        let optimizer = Adam::new(config.adam());
        TrainState {
            config,
            params,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            rng,
        }
    }
}

/// Everything derived from the graph once before training.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub family: ScaleFamily,
    /// Non-isolated nodes, ascending; the batch and negative pool.
    pub pool: Vec<usize>,
    /// Unit-normalized context vector per node (zero rows for isolated nodes).
    unit_context: Array2<f64>,
}

impl TrainingData {
    pub fn new(graph: &Graph, cfg: &TrainConfig) -> Result<Self> {
        let a = normalize(graph)?;
        let family = power_family(&a, cfg.max_scale)?.with_orientation(cfg.orientation);
        Ok(Self::from_family(family))
    }

    pub fn from_family(family: ScaleFamily) -> Self {
        let pool = family.connected_nodes();
        let all: Vec<usize> = (0..family.node_count()).collect();
        let mut unit_context = family.gather_context(&all);
        for mut row in unit_context.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        TrainingData {
            family,
            pool,
            unit_context,
        }
    }

    pub fn node_count(&self) -> usize {
        self.family.node_count()
    }
}

fn training_error(phase: &str, detail: impl Into<String>) -> Error {
    Error::Training {
        phase: phase.into(),
        detail: detail.into(),
    }
}

fn finite(phase: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(training_error(phase, format!("loss is {v}")))
    }
}

fn step_params(optimizer: &mut Adam, params: Vec<&mut Parameter>, phase: &str) -> Result<()> {
    let mut params = params;
    optimizer.step(&mut params).map_err(|e| match e {
        Error::Training { detail, .. } => training_error(phase, detail),
        other => other,
    })
}

/// Runs the three phases on one batch and returns their losses.
pub fn train_step(state: &mut TrainState, data: &TrainingData, batch: &[usize]) -> Result<PhaseLosses> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    if let Some(&node) = batch.iter().find(|&&n| n >= data.node_count() || data.family.is_isolated(n)) {
        return Err(Error::argument(format!("node {node} cannot be trained (isolated or out of range)")));
    }
    let cfg = state.config.clone();
    let b = batch.len();

    let mut negatives = vec![Array2::zeros((b, data.node_count())); cfg.negatives];
    for (row, &node) in batch.iter().enumerate() {
        let picks = sample_negative_nodes(&data.pool, node, cfg.negatives, &mut state.rng)?;
        for (j, pick) in picks.into_iter().enumerate() {
            negatives[j].row_mut(row).assign(&data.unit_context.row(pick));
        }
    }
    let inputs = BatchInputs::gather(&data.family, batch);

    // phase 1
    let reconstruction = {
        let params = &state.params;
        let mut tape = Tape::new();
        let fusion = record_fusion(&mut tape, &inputs, &params.attention, true)?;
        let code = params.autoencoder.record_encoder(&mut tape, fusion.fused, true)?;
        let recon = params.autoencoder.record_decoder(&mut tape, code)?;
        let (_, loss) = record_reconstruction_loss(&mut tape, recon, fusion.fused, &negatives)
            .map_err(|e| training_error("reconstruction", e.to_string()))?;
        let value = finite("reconstruction", tape.scalar(loss)?)?;
        let grads = tape.backward(loss)?;
        let mut ps = state.params.attention.params_mut();
        ps.extend(state.params.autoencoder.params_mut());
        for p in ps.iter_mut() {
            p.accumulate(&grads);
        }
        step_params(&mut state.optimizer, ps, "reconstruction")?;
        value
    };

    if !cfg.adversarial {
        return Ok(PhaseLosses {
            reconstruction,
            discriminator: None,
            generator: None,
        });
    }

    // phase 2
    let prior = PriorSpec::gaussian(cfg.prior_std, cfg.latent_dim)?;
    let real = sample_prior(&prior, b, &mut state.rng)?;
    let discriminator = {
        let params = &state.params;
        let mut tape = Tape::new();
        let fusion = record_fusion(&mut tape, &inputs, &params.attention, false)?;
        let code = params.autoencoder.record_encoder(&mut tape, fusion.fused, false)?;
        let real = tape.constant_ref(&real);
        let loss = record_discriminator_loss(&mut tape, &params.discriminator, real, code)?;
        let value = finite("discriminator", tape.scalar(loss)?)?;
        let grads = tape.backward(loss)?;
        let mut ps: Vec<&mut Parameter> = state.params.discriminator.params_mut().collect();
        for p in ps.iter_mut() {
            p.accumulate(&grads);
        }
        step_params(&mut state.optimizer, ps, "discriminator")?;
        value
    };

    // phase 3
    let generator = {
        let params = &state.params;
        let mut tape = Tape::new();
        let fusion = record_fusion(&mut tape, &inputs, &params.attention, true)?;
        let code = params.autoencoder.record_encoder(&mut tape, fusion.fused, true)?;
        let loss = record_generator_loss(&mut tape, &params.discriminator, code)?;
        let value = finite("generator", tape.scalar(loss)?)?;
        let weighted = tape.scale(loss, cfg.adversarial_weight);
        let grads = tape.backward(weighted)?;
        let mut ps = state.params.attention.params_mut();
        ps.extend(state.params.autoencoder.encoder_params_mut());
        for p in ps.iter_mut() {
            p.accumulate(&grads);
        }
        step_params(&mut state.optimizer, ps, "generator")?;
        value
    };

    Ok(PhaseLosses {
        reconstruction,
        discriminator: Some(discriminator),
        generator: Some(generator),
    })
}

/// Runs one shuffled pass over the trainable nodes and appends its losses.
pub fn train_epoch(state: &mut TrainState, data: &TrainingData) -> Result<PhaseLosses> {
    let mut order = data.pool.clone();
    order.shuffle(&mut state.rng);
    let total = order.len() as f64;
    let mut sums = (0.0, 0.0, 0.0);
    for batch in order.chunks(state.config.batch_size) {
        let w = batch.len() as f64;
        let l = train_step(state, data, batch)?;
        sums.0 += w * l.reconstruction;
        sums.1 += w * l.discriminator.unwrap_or(0.0);
        sums.2 += w * l.generator.unwrap_or(0.0);
    }
    let adversarial = state.config.adversarial;
    let losses = PhaseLosses {
        reconstruction: sums.0 / total,
        discriminator: adversarial.then_some(sums.1 / total),
        generator: adversarial.then_some(sums.2 / total),
    };
    state.epoch += 1;
    state.history.push(losses);
    Ok(losses)
}

/// Trains until `state.epoch == until`.
pub fn train_until(state: &mut TrainState, data: &TrainingData, until: usize) -> Result<()> {
    if data.node_count() != state.params.attention.nodes() {
        return Err(Error::argument(format!(
            "model built for {} nodes, graph has {}",
            state.params.attention.nodes(),
            data.node_count()
        )));
    }
    state.config.validate(data.pool.len())?;
    while state.epoch < until {
        let l = train_epoch(state, data)?;
        log::info!(
            "epoch {}/{}: reconstruction {:.6}{}",
            state.epoch,
            until,
            l.reconstruction,
            match (l.discriminator, l.generator) {
                (Some(d), Some(g)) => format!(", discriminator {d:.6}, generator {g:.6}"),
                _ => String::new(),
            }
        );
    }
    Ok(())
}

/// Codes from a clean forward pass; isolated nodes get zero rows.
pub fn embed(state: &TrainState, data: &TrainingData) -> Result<EmbeddingMatrix> {
    let mut out = Array2::zeros((data.node_count(), state.config.latent_dim));
    for chunk in data.pool.chunks(state.config.batch_size.max(1)) {
        let inputs = BatchInputs::gather(&data.family, chunk);
        let mut tape = Tape::new();
        let fusion = record_fusion(&mut tape, &inputs, &state.params.attention, false)?;
        let code = state.params.autoencoder.record_encoder(&mut tape, fusion.fused, false)?;
        for (row, &node) in tape.value(code).rows().into_iter().zip(chunk) {
            out.row_mut(node).assign(&row);
        }
    }
    EmbeddingMatrix::new(out)
}

/// Builds the scale family, trains for `cfg.epochs` epochs and embeds every node.
pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<(EmbeddingMatrix, TrainState)> {
    let data = TrainingData::new(graph, cfg)?;
    train_on(&data, cfg)
}

pub fn train_on(data: &TrainingData, cfg: &TrainConfig) -> Result<(EmbeddingMatrix, TrainState)> {
    cfg.validate(data.pool.len())?;
    let mut state = TrainState::new(data.node_count(), cfg.clone());
    train_until(&mut state, data, cfg.epochs)?;
    let emb = embed(&state, data)?;
    Ok((emb, state))
}

/// Per-node attention weights, `|V| x K`; isolated nodes get uniform rows.
pub fn attention_matrix(state: &TrainState, data: &TrainingData) -> Result<Array2<f64>> {
    let k = data.family.max_scale();
    let mut out = Array2::from_elem((data.node_count(), k), 1.0 / k as f64);
    for chunk in data.pool.chunks(state.config.batch_size.max(1)) {
        let inputs = BatchInputs::gather(&data.family, chunk);
        let mut tape = Tape::new();
        let fusion = record_fusion(&mut tape, &inputs, &state.params.attention, false)?;
        for (row, &node) in tape.value(fusion.attention).rows().into_iter().zip(chunk) {
            out.row_mut(node).assign(&row);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{encode, fuse, attention_weights};

    fn small_config() -> TrainConfig {
        TrainConfig {
            max_scale: 3,
            latent_dim: 4,
            negatives: 2,
            epochs: 3,
            batch_size: 3,
            hidden_dim: 8,
            discriminator_hidden: 6,
            ..TrainConfig::default()
        }
    }

    fn fixture() -> Graph {
        // path 0-1-2 plus triangle 3-4-5
        Graph::from_edges(6, &[(0, 1), (1, 2), (3, 4), (4, 5), (5, 3)]).unwrap()
    }

    #[test]
    fn default_config() {
        let c = TrainConfig::default();
        assert_eq!((c.max_scale, c.latent_dim, c.negatives), (8, 128, 7));
        assert_eq!((c.epochs, c.batch_size, c.lr), (200, 64, 1e-3));
        assert!(c.adversarial);
        assert_eq!(c.prior_std, 1.0);
    }

    #[test]
    fn validation() {
        let mut c = small_config();
        assert!(c.validate(6).is_ok());
        assert!(c.validate(2).is_err());
        c.max_scale = 0;
        assert!(c.validate(6).is_err());
        let c = TrainConfig { lr: 0.0, ..small_config() };
        assert!(c.validate(6).is_err());
    }

    #[test]
    fn aane_skips_adversarial_phases() {
        let cfg = TrainConfig {
            adversarial: false,
            ..small_config()
        };
        let (_, state) = train(&fixture(), &cfg).unwrap();
        assert_eq!(state.history.len(), 3);
        assert!(state.history.iter().all(|l| l.discriminator.is_none() && l.generator.is_none()));
        assert!(state.optimizer.moments().keys().all(|k| !k.starts_with("discriminator")));
    }

    #[test]
    fn deterministic_runs() {
        let cfg = small_config();
        let (e1, s1) = train(&fixture(), &cfg).unwrap();
        let (e2, s2) = train(&fixture(), &cfg).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(s1.history, s2.history);
        let (e3, _) = train(&fixture(), &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn reconstruction_descends() {
        let cfg = TrainConfig {
            adversarial: false,
            batch_size: 6,
            ..small_config()
        };
        let data = TrainingData::new(&fixture(), &cfg).unwrap();
        let mut state = TrainState::new(6, cfg);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(train_epoch(&mut state, &data).unwrap().reconstruction);
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn phases_touch_only_their_parameters() {
        let cfg = small_config();
        let data = TrainingData::new(&fixture(), &cfg).unwrap();
        let mut state = TrainState::new(6, cfg);
        let before = state.params.clone();
        // run a step, then compare against a manual replay of phase 1 only
        train_step(&mut state, &data, &[0, 4]).unwrap();
        let after = state.params.clone();
        assert_ne!(before.discriminator, after.discriminator);
        assert_ne!(before.autoencoder.decoder, after.autoencoder.decoder);
        // decoder moments advanced once, encoder twice, discriminator once
        let m = state.optimizer.moments();
        assert_eq!(m["decoder.0.weight"].step, 1);
        assert_eq!(m["encoder.0.weight"].step, 2);
        assert_eq!(m["attention.m"].step, 2);
        assert_eq!(m["discriminator.0.weight"].step, 1);
    }

    #[test]
    fn isolated_nodes() {
        let g = Graph::from_edges(7, &[(0, 1), (1, 2), (3, 4), (4, 5), (5, 3)]).unwrap();
        let (emb, state) = train(&g, &small_config()).unwrap();
        assert!(emb.row(6).iter().all(|&v| v == 0.0));
        assert!(emb.row(0).iter().any(|&v| v != 0.0));
        let data = TrainingData::new(&g, &state.config).unwrap();
        let mut st = state.clone();
        assert!(train_step(&mut st, &data, &[6]).is_err());
        assert!(train_step(&mut st, &data, &[]).is_err());
    }

    #[test]
    fn embeddings_match_per_node_forward() {
        let cfg = small_config();
        let g = fixture();
        let (emb, state) = train(&g, &cfg).unwrap();
        let data = TrainingData::new(&g, &cfg).unwrap();
        for node in 0..6 {
            let a = attention_weights(&data.family, node, &state.params.attention).unwrap();
            let z = fuse(&data.family, node, a.view()).unwrap();
            let x = encode(z.view(), &state.params.autoencoder).unwrap();
            assert!(emb.row(node).abs_diff_eq(&x, 1e-12));
        }
        let att = attention_matrix(&state, &data).unwrap();
        for row in att.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_scale_leaves_attention_untouched() {
        let cfg = TrainConfig {
            max_scale: 1,
            ..small_config()
        };
        let g = fixture();
        let (emb, state) = train(&g, &cfg).unwrap();
        let init = TrainState::new(6, cfg.clone());
        assert_eq!(state.params.attention, init.params.attention);
        // plain autoencoder on X^1
        let data = TrainingData::new(&g, &cfg).unwrap();
        for node in 0..6 {
            let x1 = data.family.scale_vector(node, 1).unwrap();
            let x = encode(x1.view(), &state.params.autoencoder).unwrap();
            assert!(emb.row(node).abs_diff_eq(&x, 1e-12));
        }
    }

    #[test]
    fn rank_factored_attention_trains() {
        let cfg = TrainConfig {
            attention_rank: Some(2),
            ..small_config()
        };
        let (emb, state) = train(&fixture(), &cfg).unwrap();
        assert_eq!(emb.dim(), 4);
        assert!(state.optimizer.moments().contains_key("attention.u"));
    }
}
