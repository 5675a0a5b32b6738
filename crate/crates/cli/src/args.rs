use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use multiscale_embed::evaluation::SweepParam;
use multiscale_embed::graph::ScaleOrientation;
use multiscale_embed::trainer::TrainConfig;

/// Multi-scale attention autoencoder embeddings for graphs.
///
/// Every randomized step is driven by --seed (default 0), so identical
/// invocations produce identical files. MULTISCALE_EMBED_THREADS caps the
/// number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "multiscale-embed", version)]
pub struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write embeddings, a checkpoint and a run manifest.
    Train(TrainArgs),
    /// Node classification accuracy of an embedding file over training ratios.
    Eval(EvalArgs),
    /// Learned attention over scales, from a checkpoint.
    Attn(AttnArgs),
    /// Retrain for each value of one hyperparameter and probe each model.
    Sweep(SweepArgs),
    /// Train a single-scale model per k and probe each (optionally beside the learned attention).
    Baseline(BaselineArgs),
    /// Regenerate embeddings from a checkpoint.
    Export(ExportArgs),
    /// Repeat a training run recorded in a manifest after checking input digests.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Orientation {
    Row,
    Column,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepKind {
    Dim,
    Scales,
}

impl From<SweepKind> for SweepParam {
    fn from(k: SweepKind) -> Self {
        match k {
            SweepKind::Dim => SweepParam::Dim,
            SweepKind::Scales => SweepParam::Scales,
        }
    }
}

/// Model and optimizer settings shared by every command that trains.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Number of transition scales K.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Embedding dimension d.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    /// Negative samples per node.
    #[arg(long, default_value_t = 7)]
    pub neg: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the discriminator and generator phases.
    #[arg(long)]
    pub no_adversarial: bool,
    /// Standard deviation of the Gaussian prior.
    #[arg(long, default_value_t = 1.0)]
    pub prior_std: f64,
    /// Weight on the generator loss.
    #[arg(long, default_value_t = 1.0)]
    pub adv_weight: f64,
    /// Encoder/decoder hidden width.
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    /// Discriminator hidden width.
    #[arg(long, default_value_t = 512)]
    pub disc_hidden: usize,
    /// Represent a node by its row or its column of each A^k.
    #[arg(long, value_enum, default_value_t = Orientation::Row)]
    pub orientation: Orientation,
    /// Factor the attention matrix as U Vᵀ with this rank.
    #[arg(long)]
    pub attention_rank: Option<usize>,
}

impl ModelArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            max_scale: self.k,
            latent_dim: self.dim,
            negatives: self.neg,
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
            adversarial: !self.no_adversarial,
            prior_std: self.prior_std,
            adversarial_weight: self.adv_weight,
            hidden_dim: self.hidden,
            discriminator_hidden: self.disc_hidden,
            orientation: match self.orientation {
                Orientation::Row => ScaleOrientation::Row,
                Orientation::Column => ScaleOrientation::Column,
            },
            attention_rank: self.attention_rank,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Edge list: two whitespace-separated node ids per line.
    #[arg(long)]
    pub edges: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Embedding TSV to write.
    #[arg(long, default_value = "emb.tsv")]
    pub out: PathBuf,
    /// Checkpoint path [default: <out>.ckpt].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest path [default: <out>.manifest.json].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from this checkpoint up to --epochs; model flags are taken from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// `<node-id>\t<label>` per line.
    #[arg(long)]
    pub labels: PathBuf,
    /// Training ratios as `start:end:step` or a comma list.
    #[arg(long, default_value = "0.1:0.9:0.1", value_parser = parse_ratios)]
    pub ratios: Ratios,
    /// Random splits per ratio.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// The edge list the checkpoint was trained on.
    #[arg(long)]
    pub edges: PathBuf,
    /// Write the per-scale means here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the |V| x K attention matrix, one node per row.
    #[arg(long)]
    pub per_node: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepKind,
    /// Values as `start:end:step` or a comma list.
    #[arg(long, value_parser = parse_counts)]
    pub values: Counts,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training ratio for the probe.
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Add a column with the mean attention of this trained model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// Manifest written by `train`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding TSV to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ratios(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Counts(pub Vec<usize>);

/// Expands `start:end:step` (inclusive of `end` up to rounding) or splits a comma list.
fn expand(s: &str) -> Result<Vec<f64>, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [start, end, step] => {
            let (start, end, step) = (num(start)?, num(end)?, num(step)?);
            if !(step > 0.0) || end < start {
                return Err(format!("range {s:?} needs start <= end and a positive step"));
            }
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            // rounding keeps 0.1:0.9:0.1 on the decimal grid
            Ok((0..n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
        }
        [_] => s.split(',').map(num).collect(),
        _ => Err(format!("expected start:end:step or a comma list, got {s:?}")),
    }
}

pub fn parse_ratios(s: &str) -> Result<Ratios, String> {
    let v = expand(s)?;
    if let Some(r) = v.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(format!("ratio {r} is outside (0, 1)"));
    }
    Ok(Ratios(v))
}

pub fn parse_counts(s: &str) -> Result<Counts, String> {
    expand(s)?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!("{v} is not a positive integer"))
            }
        })
        .collect::<Result<_, _>>()
        .map(Counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_range() {
        let r = parse_ratios("0.1:0.9:0.1").unwrap().0;
        assert_eq!(r.len(), 9);
        assert_eq!(r[2], 0.3);
        assert_eq!(r[8], 0.9);
    }

    #[test]
    fn ratio_list() {
        assert_eq!(parse_ratios("0.5, 0.2").unwrap().0, vec![0.5, 0.2]);
        assert!(parse_ratios("0.5,1.0").is_err());
        assert!(parse_ratios("0.9:0.1:0.1").is_err());
        assert!(parse_ratios("0.1:0.5").is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(parse_counts("1,2,3,4,5,6,7,8").unwrap().0, (1..=8).collect::<Vec<_>>());
        assert_eq!(parse_counts("16:128:16").unwrap().0.len(), 8);
        assert!(parse_counts("0,2").is_err());
        assert!(parse_counts("1.5").is_err());
    }

    #[test]
    fn defaults_match_library() {
        let cli = Cli::try_parse_from(["multiscale-embed", "train", "--edges", "g"]).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.model.config(), TrainConfig::default());
    }
}
