//! Scale attention, fusion and the max-margin autoencoder.
//!
//! For a node s with scale vectors `X^1..X^K` the context is their mean
//! `y_s`; logits are `d_k = X^k · (M y_s)`; attention `a = softmax(d)`;
//! the autoencoder input is `z_s = Σ a_k X^k`. The encoder maps `z_s` to the
//! latent code, the decoder maps it back to `r_s`, and the reconstruction is
//! scored with a unit-normalized hinge loss against m negative contexts.
//!
//! Two paths exist: per-node functions on plain vectors (used for inspection,
//! attention reports and as a reference) and batched builders that record on a
//! [`Tape`] for training.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::ScaleFamily;
use crate::tensor::softmax_in_place;
use crate::tensor::{Linear, Parameter, Tape, Tensor, Var};

/// Margin of the reconstruction hinge.
pub const MARGIN: f64 = 1.0;

/// The bilinear map between scale vectors and the context vector.
#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    /// Dense `|V| x |V|` matrix.
    Full { m: Parameter },
    /// `M = U Vᵀ` with `U, V` of shape `|V| x rank`.
    Factored { u: Parameter, v: Parameter },
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(nodes: usize, rank: Option<usize>, rng: &mut R) -> Self {
        match rank {
            None => AttentionParams::Full {
                m: Parameter::new("attention.m", Tensor::glorot(nodes, nodes, rng)),
            },
            Some(r) => AttentionParams::Factored {
                u: Parameter::new("attention.u", Tensor::glorot(nodes, r, rng)),
                v: Parameter::new("attention.v", Tensor::glorot(nodes, r, rng)),
            },
        }
    }

    pub fn nodes(&self) -> usize {
        match self {
            AttentionParams::Full { m } => m.value.rows(),
            AttentionParams::Factored { u, .. } => u.value.rows(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            AttentionParams::Full { .. } => None,
            AttentionParams::Factored { u, .. } => Some(u.value.cols()),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            AttentionParams::Full { m } => vec![m],
            AttentionParams::Factored { u, v } => vec![u, v],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            AttentionParams::Full { m } => vec![m],
            AttentionParams::Factored { u, v } => vec![u, v],
        }
    }

    /// `M y`
    pub fn apply(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            AttentionParams::Full { m } => m.value.array().dot(&y),
            AttentionParams::Factored { u, v } => {
                let t = v.value.array().t().dot(&y);
                u.value.array().dot(&t)
            }
        }
    }

    /// Records `M y_b` for every row `y_b` of `context`, giving `B x |V|`.
    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, context: Var, trainable: bool) -> Result<Var> {
        let leaf = |tape: &mut Tape<'a>, p: &'a Parameter| {
            if trainable {
                tape.param(p)
            } else {
                tape.constant_ref(p.value.array())
            }
        };
        match self {
            AttentionParams::Full { m } => {
                let mv = leaf(tape, m);
                tape.matmul_nt(context, mv)
            }
            AttentionParams::Factored { u, v } => {
                let uv = leaf(tape, u);
                let vv = leaf(tape, v);
                let t = tape.matmul(context, vv)?;
                tape.matmul_nt(t, uv)
            }
        }
    }
}

/// Encoder `|V| -> hidden.. -> d` and decoder `d -> hidden.. -> |V|`.
///
/// Hidden layers use tanh; the latent and reconstruction layers are linear.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
}

impl AutoencoderParams {
    /// `hidden` lists encoder widths outermost first; the decoder mirrors it.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], latent: usize, rng: &mut R) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(latent);
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("encoder.{i}"), w[0], w[1], rng))
            .collect();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("decoder.{i}"), w[0], w[1], rng))
            .collect();
        AutoencoderParams { encoder, decoder }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().expect("non-empty encoder").output_dim()
    }

    pub fn encoder_params(&self) -> impl Iterator<Item = &Parameter> {
        self.encoder.iter().flat_map(|l| l.params())
    }

    pub fn encoder_params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.encoder.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.encoder.iter().chain(&self.decoder).flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|l| l.params_mut())
    }

    pub fn record_encoder<'a>(&'a self, tape: &mut Tape<'a>, z: Var, trainable: bool) -> Result<Var> {
        record_stack(&self.encoder, tape, z, trainable)
    }

    pub fn record_decoder<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        record_stack(&self.decoder, tape, x, true)
    }
}

fn record_stack<'a>(layers: &'a [Linear], tape: &mut Tape<'a>, mut h: Var, trainable: bool) -> Result<Var> {
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        h = if trainable {
            layer.record(tape, h)?
        } else {
            layer.record_frozen(tape, h)?
        };
        if i < last {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

fn apply_stack(layers: &[Linear], input: ArrayView1<'_, f64>) -> Array1<f64> {
    let last = layers.len() - 1;
    let mut h = input.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        let mut out = h.dot(layer.weight.value.array());
        out += &layer.bias.value.array().row(0);
        if i < last {
            out.mapv_inplace(f64::tanh);
        }
        h = out;
    }
    h
}

/// Everything computed for one node on the way to its reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeForward {
    pub node: usize,
    pub context: Array1<f64>,
    pub logits: Array1<f64>,
    pub attention: Array1<f64>,
    pub fused: Array1<f64>,
    pub latent: Array1<f64>,
    pub reconstruction: Array1<f64>,
}

fn check_node(family: &ScaleFamily, node: usize) -> Result<()> {
    if node >= family.node_count() {
        return Err(Error::argument(format!(
            "node {node} out of range for {} nodes",
            family.node_count()
        )));
    }
    Ok(())
}

/// `y_s = (1/K) Σ_k X^k`
pub fn context_vector(family: &ScaleFamily, node: usize) -> Result<Array1<f64>> {
    check_node(family, node)?;
    Ok(family.gather_context(&[node]).index_axis_move(Axis(0), 0))
}

/// Logits `d_k = X^k · M y_s` for `k = 1..K`.
pub fn attention_logits(family: &ScaleFamily, node: usize, params: &AttentionParams) -> Result<Array1<f64>> {
    check_node(family, node)?;
    if params.nodes() != family.node_count() {
        return Err(Error::shape(
            "attention",
            format!("M built for {} nodes, graph has {}", params.nodes(), family.node_count()),
        ));
    }
    let y = context_vector(family, node)?;
    let my = params.apply(y.view());
    Ok((1..=family.max_scale()).map(|k| family.view(node, k).dot(&my)).collect())
}

/// Softmax of the attention logits; a distribution over the K scales.
pub fn attention_weights(family: &ScaleFamily, node: usize, params: &AttentionParams) -> Result<Array1<f64>> {
    let mut a = attention_logits(family, node, params)?;
    softmax_in_place(a.as_slice_mut().expect("contiguous"));
    Ok(a)
}

/// `z_s = Σ_k a_k X^k`
pub fn fuse(family: &ScaleFamily, node: usize, weights: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_node(family, node)?;
    if weights.len() != family.max_scale() {
        return Err(Error::argument(format!(
            "{} weights for {} scales",
            weights.len(),
            family.max_scale()
        )));
    }
    let mut z = Array1::zeros(family.node_count());
    for (k, &a) in weights.iter().enumerate() {
        z.scaled_add(a, &family.view(node, k + 1));
    }
    Ok(z)
}

pub fn encode(z: ArrayView1<'_, f64>, params: &AutoencoderParams) -> Result<Array1<f64>> {
    if z.len() != params.input_dim() {
        return Err(Error::shape("encode", format!("input {} vs {}", z.len(), params.input_dim())));
    }
    Ok(apply_stack(&params.encoder, z))
}

pub fn decode(x: ArrayView1<'_, f64>, params: &AutoencoderParams) -> Result<Array1<f64>> {
    if x.len() != params.latent_dim() {
        return Err(Error::shape("decode", format!("latent {} vs {}", x.len(), params.latent_dim())));
    }
    Ok(apply_stack(&params.decoder, x))
}

pub fn node_forward(
    family: &ScaleFamily,
    node: usize,
    attention: &AttentionParams,
    autoencoder: &AutoencoderParams,
) -> Result<NodeForward> {
    let context = context_vector(family, node)?;
    let logits = attention_logits(family, node, attention)?;
    let mut weights = logits.clone();
    softmax_in_place(weights.as_slice_mut().expect("contiguous"));
    let fused = fuse(family, node, weights.view())?;
    let latent = encode(fused.view(), autoencoder)?;
    let reconstruction = decode(latent.view(), autoencoder)?;
    Ok(NodeForward {
        node,
        context,
        logits,
        attention: weights,
        fused,
        latent,
        reconstruction,
    })
}

/// Draws `m` distinct members of `pool` other than `exclude`, uniformly.
pub fn sample_negative_nodes<R: Rng + ?Sized>(
    pool: &[usize],
    exclude: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::argument("need at least one negative sample"));
    }
    let pos = pool.iter().position(|&p| p == exclude);
    let available = pool.len() - usize::from(pos.is_some());
    if m > available {
        return Err(Error::argument(format!(
            "{m} negatives requested but only {available} other nodes are available"
        )));
    }
    let picks = sample(rng, available, m);
    Ok(picks
        .into_iter()
        .map(|i| match pos {
            Some(p) if i >= p => pool[i + 1],
            _ => pool[i],
        })
        .collect())
}

/// `m` negatives for `exclude`, each represented by its context vector.
///
/// Candidates are the nodes with at least one neighbor.
pub fn negative_samples<R: Rng + ?Sized>(
    family: &ScaleFamily,
    exclude: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Array1<f64>>> {
    check_node(family, exclude)?;
    let pool = family.connected_nodes();
    let nodes = sample_negative_nodes(&pool, exclude, m, rng)?;
    nodes.into_iter().map(|n| context_vector(family, n)).collect()
}

fn unit(v: ArrayView1<'_, f64>, row: usize) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm { row });
    }
    Ok(&v / n)
}

/// `J = Σ_i max(0, 1 - r̂·ẑ + r̂·n̂_i)` over the negatives, with unit-normalized vectors.
pub fn reconstruction_loss(
    reconstruction: ArrayView1<'_, f64>,
    fused: ArrayView1<'_, f64>,
    negatives: &[Array1<f64>],
) -> Result<f64> {
    let n = fused.len();
    if reconstruction.len() != n || negatives.iter().any(|v| v.len() != n) {
        return Err(Error::shape("reconstruction_loss", "vector lengths differ"));
    }
    let r = unit(reconstruction, 0)?;
    let z = unit(fused, 1)?;
    let pos = r.dot(&z);
    let mut total = 0.0;
    for (i, neg) in negatives.iter().enumerate() {
        let nv = unit(neg.view(), i + 2)?;
        total += (MARGIN - pos + r.dot(&nv)).max(0.0);
    }
    Ok(total)
}

/// Scale and context rows for a batch of nodes.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub nodes: Vec<usize>,
    /// One `B x |V|` matrix per scale.
    pub scales: Vec<Array2<f64>>,
    pub context: Array2<f64>,
}

impl BatchInputs {
    pub fn gather(family: &ScaleFamily, nodes: &[usize]) -> Self {
        let scales = (1..=family.max_scale()).map(|k| family.gather(k, nodes)).collect();
        BatchInputs {
            nodes: nodes.to_vec(),
            scales,
            context: family.gather_context(nodes),
        }
    }
}

/// Attention weights and fused inputs recorded for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    /// `B x K`
    pub attention: Var,
    /// `B x |V|`
    pub fused: Var,
}

pub fn record_fusion<'a>(
    tape: &mut Tape<'a>,
    batch: &'a BatchInputs,
    params: &'a AttentionParams,
    trainable: bool,
) -> Result<Fusion> {
    if batch.scales.len() == 1 {
        // a single softmax logit is exactly 1 and carries no gradient
        let attention = tape.constant(Array2::ones((batch.nodes.len(), 1)));
        let fused = tape.constant_ref(&batch.scales[0]);
        return Ok(Fusion { attention, fused });
    }
    let context = tape.constant_ref(&batch.context);
    let projected = params.record(tape, context, trainable)?;
    let scales: Vec<Var> = batch.scales.iter().map(|s| tape.constant_ref(s)).collect();
    let mut columns = Vec::with_capacity(scales.len());
    for &s in &scales {
        columns.push(tape.row_dot(s, projected)?);
    }
    let logits = tape.concat_cols(&columns)?;
    let attention = tape.softmax_rows(logits);
    let mut fused = None;
    for (k, &s) in scales.iter().enumerate() {
        let a_k = tape.column(attention, k)?;
        let term = tape.scale_rows(s, a_k)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(Fusion {
        attention,
        fused: fused.expect("at least one scale"),
    })
}

/// Records the batch hinge loss. `negatives[j]` holds the j-th negative of
/// every batch row, already unit-normalized. Returns `(per-node J as B x 1, mean J)`.
pub fn record_reconstruction_loss<'a>(
    tape: &mut Tape<'a>,
    reconstruction: Var,
    fused: Var,
    negatives: &'a [Array2<f64>],
) -> Result<(Var, Var)> {
    let r = tape.normalize_rows(reconstruction)?;
    let z = tape.normalize_rows(fused)?;
    let pos = tape.row_dot(r, z)?;
    let mut terms = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let nv = tape.constant_ref(neg);
        let s = tape.row_dot(r, nv)?;
        let gap = tape.sub(s, pos)?;
        let shifted = tape.add_scalar(gap, MARGIN);
        terms.push(tape.hinge(shifted));
    }
    let all = tape.concat_cols(&terms)?;
    let ones = tape.constant(Array2::ones((negatives.len(), 1)));
    let per_node = tape.matmul(all, ones)?;
    let total = tape.sum(all);
    let rows = tape.value(all).nrows() as f64;
    let mean = tape.scale(total, 1.0 / rows);
    Ok((per_node, mean))
}

/// Unit-normalizes every row; a zero row is an error.
pub fn normalize_rows(mut m: Array2<f64>) -> Result<Array2<f64>> {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { row: i });
        }
        row /= n;
    }
    Ok(m)
}
