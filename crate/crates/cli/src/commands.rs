use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use multiscale_embed::checkpoint::{load_checkpoint, save_checkpoint};
use multiscale_embed::embedding::{format_g12, EmbeddingMatrix};
use multiscale_embed::evaluation::{
    attention_summary, classify, per_scale_baseline, spearman, sweep, write_accuracy_table, EvalReport, LabelSet,
    SweepParam,
};
use multiscale_embed::graph::{load_edge_list, Graph};
use multiscale_embed::trainer::{embed, train_until, TrainConfig, TrainState, TrainingData};

use crate::args::{AttnArgs, BaselineArgs, EvalArgs, ExportArgs, RerunArgs, SweepArgs, TrainArgs};
use crate::files::{open, sibling, write_atomic, write_report};
use crate::manifest::{ConfigRecord, LossRecord, RunManifest};

fn load_graph(path: &Path) -> Result<Graph> {
    load_edge_list(open(path)?).with_context(|| format!("edge list {}", path.display()))
}

fn load_labels(path: &Path, node_count: usize, index_of: impl Fn(&str) -> Option<usize>) -> Result<LabelSet> {
    LabelSet::read(open(path)?, node_count, index_of).with_context(|| format!("labels {}", path.display()))
}

fn load_state(path: &Path) -> Result<TrainState> {
    load_checkpoint(open(path)?).with_context(|| format!("checkpoint {}", path.display()))
}

/// Scale family for a loaded model, checked against the model's size.
fn data_for(state: &TrainState, graph: &Graph) -> Result<TrainingData> {
    let expected = state.params.attention.nodes();
    if graph.node_count() != expected {
        bail!(
            "checkpoint was trained on {expected} nodes but the edge list has {}",
            graph.node_count()
        );
    }
    Ok(TrainingData::new(graph, &state.config)?)
}

fn write_embeddings(path: &Path, emb: &EmbeddingMatrix, graph: &Graph) -> Result<()> {
    write_atomic(path, |w| Ok(emb.write_tsv(graph.ids(), w)?))
}

fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    write_atomic(path, |w| Ok(save_checkpoint(state, w)?))
}

/// Trains from scratch, writes embeddings and checkpoint, and fills in the manifest.
fn fit_and_write(
    graph: &Graph,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    out: &Path,
    checkpoint: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let (mut state, data) = match resume {
        Some(p) => {
            let mut state = load_state(p)?;
            state.config.epochs = cfg.epochs;
            let data = data_for(&state, graph)?;
            (state, data)
        }
        None => {
            let data = TrainingData::new(graph, cfg)?;
            cfg.validate(data.pool.len())?;
            (TrainState::new(data.node_count(), cfg.clone()), data)
        }
    };
    train_until(&mut state, &data, cfg.epochs)?;
    let emb = embed(&state, &data)?;
    write_embeddings(out, &emb, graph)?;
    write_checkpoint(checkpoint, &state)?;
    manifest.config = Some(ConfigRecord::from(&state.config));
    manifest.final_losses = state.history.last().map(LossRecord::from);
    manifest.output("embeddings", out)?;
    manifest.output("checkpoint", checkpoint)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let checkpoint = a.checkpoint.unwrap_or_else(|| sibling(&a.out, ".ckpt"));
    let manifest_path = a.manifest.unwrap_or_else(|| sibling(&a.out, ".manifest.json"));
    let mut manifest = RunManifest::new("train");
    manifest.input("edges", &a.edges)?;
    if let Some(r) = &a.resume {
        manifest.input("resume", r)?;
    }
    let graph = load_graph(&a.edges)?;
    fit_and_write(&graph, &a.model.config(), a.resume.as_deref(), &a.out, &checkpoint, &mut manifest)?;
    manifest.finish(start.elapsed(), &manifest_path)
}

pub fn rerun(a: RerunArgs) -> Result<()> {
    let start = Instant::now();
    let old = RunManifest::read(&a.manifest)?;
    if old.command != "train" {
        bail!("{} records a {:?} run, not a training run", a.manifest.display(), old.command);
    }
    let record = old.config.as_ref().context("manifest has no training configuration")?;
    let cfg = TrainConfig::try_from(record)?;
    for rec in old.inputs.values() {
        rec.verify()?;
    }
    let edges = &old.inputs.get("edges").context("manifest has no edge list")?.path;
    let checkpoint = a.checkpoint.unwrap_or_else(|| sibling(&a.out, ".ckpt"));
    let mut manifest = RunManifest::new("train");
    manifest.inputs = old.inputs.clone();
    let graph = load_graph(edges)?;
    // a resumed run is reproduced from scratch; the epochs split does not change the result
    fit_and_write(&graph, &cfg, None, &a.out, &checkpoint, &mut manifest)?;
    manifest.finish(start.elapsed(), &sibling(&a.out, ".manifest.json"))?;
    if let Some(prev) = old.outputs.get("embeddings") {
        if prev.sha256 != manifest.outputs["embeddings"].sha256 {
            bail!("embeddings differ from the recorded run ({})", prev.path.display());
        }
    }
    Ok(())
}

pub fn export(a: ExportArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("export");
    manifest.input("checkpoint", &a.checkpoint)?;
    manifest.input("edges", &a.edges)?;
    let state = load_state(&a.checkpoint)?;
    let graph = load_graph(&a.edges)?;
    let data = data_for(&state, &graph)?;
    let emb = embed(&state, &data)?;
    write_embeddings(&a.out, &emb, &graph)?;
    manifest.config = Some(ConfigRecord::from(&state.config));
    manifest.output("embeddings", &a.out)?;
    manifest.finish(start.elapsed(), &sibling(&a.out, ".manifest.json"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("eval");
    manifest.input("embeddings", &a.embeddings)?;
    manifest.input("labels", &a.labels)?;
    manifest.setting("ratios", &a.ratios.0)?;
    manifest.setting("repeats", a.repeats)?;
    manifest.setting("seed", a.seed)?;
    let (ids, emb) = EmbeddingMatrix::read_tsv(open(&a.embeddings)?)
        .with_context(|| format!("embeddings {}", a.embeddings.display()))?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let labels = load_labels(&a.labels, emb.node_count(), |id| index.get(id).copied())?;
    let ratios = a
        .ratios
        .0
        .iter()
        .map(|&r| classify(&emb, &labels, r, a.repeats, a.seed))
        .collect::<multiscale_embed::Result<Vec<_>>>()?;
    let report = EvalReport {
        ratios,
        ..EvalReport::default()
    };
    write_report(a.out.as_deref(), |w| Ok(report.write_ratio_table(w)?))?;
    finish_report(manifest, a.out.as_deref(), start)
}

/// Records the report file, if any, and writes the manifest beside it.
fn finish_report(mut manifest: RunManifest, out: Option<&Path>, start: Instant) -> Result<()> {
    match out {
        Some(p) => {
            manifest.output("report", p)?;
            manifest.finish(start.elapsed(), &sibling(p, ".manifest.json"))
        }
        None => Ok(()),
    }
}

pub fn attn(a: AttnArgs) -> Result<()> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("attn");
    manifest.input("checkpoint", &a.checkpoint)?;
    manifest.input("edges", &a.edges)?;
    let state = load_state(&a.checkpoint)?;
    let graph = load_graph(&a.edges)?;
    let data = data_for(&state, &graph)?;
    let summary = attention_summary(&state, &data)?;
    manifest.config = Some(ConfigRecord::from(&state.config));
    if let Some(p) = &a.per_node {
        write_atomic(p, |w| {
            write!(w, "id")?;
            for k in 1..=summary.means.len() {
                write!(w, "\tk{k}")?;
            }
            writeln!(w)?;
            for (id, row) in graph.ids().iter().zip(summary.per_node.rows()) {
                write!(w, "{id}")?;
                for v in row {
                    write!(w, "\t{}", format_g12(*v))?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
        manifest.output("per_node", p)?;
    }
    write_report(a.out.as_deref(), |w| {
        writeln!(w, "k\tmean_attention")?;
        for (k, m) in summary.means.iter().enumerate() {
            writeln!(w, "{}\t{}", k + 1, format_g12(*m))?;
        }
        Ok(())
    })?;
    match (&a.out, &a.per_node) {
        (None, Some(p)) => manifest.finish(start.elapsed(), &sibling(p, ".manifest.json")),
        _ => finish_report(manifest, a.out.as_deref(), start),
    }
}

pub fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let start = Instant::now();
    let param = SweepParam::from(a.param);
    let cfg = a.model.config();
    let mut manifest = RunManifest::new("sweep");
    manifest.input("edges", &a.edges)?;
    manifest.input("labels", &a.labels)?;
    manifest.config = Some(ConfigRecord::from(&cfg));
    manifest.setting("param", param.name())?;
    manifest.setting("values", &a.values.0)?;
    manifest.setting("ratio", a.ratio)?;
    manifest.setting("repeats", a.repeats)?;
    let graph = load_graph(&a.edges)?;
    let labels = load_labels(&a.labels, graph.node_count(), |id| graph.index_of(id))?;
    let rows = sweep(&graph, &labels, param, &a.values.0, &cfg, a.ratio, a.repeats, cfg.seed)?;
    write_report(a.out.as_deref(), |w| {
        Ok(write_accuracy_table(w, param.name(), rows.iter().map(|(v, acc)| (v.to_string(), acc)))?)
    })?;
    finish_report(manifest, a.out.as_deref(), start)
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = a.model.config();
    let mut manifest = RunManifest::new("baseline");
    manifest.input("edges", &a.edges)?;
    manifest.input("labels", &a.labels)?;
    manifest.config = Some(ConfigRecord::from(&cfg));
    manifest.setting("ratio", a.ratio)?;
    manifest.setting("repeats", a.repeats)?;
    let graph = load_graph(&a.edges)?;
    let labels = load_labels(&a.labels, graph.node_count(), |id| graph.index_of(id))?;
    let attention_means = match &a.checkpoint {
        Some(p) => {
            manifest.input("checkpoint", p)?;
            let state = load_state(p)?;
            if state.config.max_scale != cfg.max_scale {
                bail!("checkpoint has K={} but --k is {}", state.config.max_scale, cfg.max_scale);
            }
            let data = data_for(&state, &graph)?;
            attention_summary(&state, &data)?.means
        }
        None => Vec::new(),
    };
    let per_scale = per_scale_baseline(&graph, &labels, &cfg, a.ratio, a.repeats, cfg.seed)?;
    if !attention_means.is_empty() && per_scale.len() > 1 {
        let acc: Vec<f64> = per_scale.iter().map(|a| a.mean).collect();
        match spearman(&acc, &attention_means) {
            Ok(rho) => log::info!("spearman(accuracy, attention) = {rho:.4}"),
            Err(e) => log::warn!("{e}"),
        }
    }
    let report = EvalReport {
        ratios: Vec::new(),
        per_scale,
        attention_means,
    };
    write_report(a.out.as_deref(), |w| Ok(report.write_scale_table(w)?))?;
    finish_report(manifest, a.out.as_deref(), start)
}
