use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use multiscale_embed::graph::ScaleOrientation;
use multiscale_embed::trainer::{PhaseLosses, TrainConfig};

use crate::files::{open, sha256_file, write_atomic};

/// Serialized form of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub max_scale: usize,
    pub latent_dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub adversarial: bool,
    pub prior_std: f64,
    pub adversarial_weight: f64,
    pub hidden_dim: usize,
    pub discriminator_hidden: usize,
    /// `row` or `column`.
    pub orientation: String,
    pub attention_rank: Option<usize>,
}

impl From<&TrainConfig> for ConfigRecord {
    fn from(c: &TrainConfig) -> Self {
        ConfigRecord {
            max_scale: c.max_scale,
            latent_dim: c.latent_dim,
            negatives: c.negatives,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            seed: c.seed,
            adversarial: c.adversarial,
            prior_std: c.prior_std,
            adversarial_weight: c.adversarial_weight,
            hidden_dim: c.hidden_dim,
            discriminator_hidden: c.discriminator_hidden,
            orientation: match c.orientation {
                ScaleOrientation::Row => "row",
                ScaleOrientation::Column => "column",
            }
            .into(),
            attention_rank: c.attention_rank,
        }
    }
}

impl TryFrom<&ConfigRecord> for TrainConfig {
    type Error = anyhow::Error;

    fn try_from(r: &ConfigRecord) -> Result<Self> {
        let orientation = match r.orientation.as_str() {
            "row" => ScaleOrientation::Row,
            "column" => ScaleOrientation::Column,
            other => bail!("unknown orientation {other:?}"),
        };
        Ok(TrainConfig {
            max_scale: r.max_scale,
            latent_dim: r.latent_dim,
            negatives: r.negatives,
            epochs: r.epochs,
            batch_size: r.batch_size,
            lr: r.lr,
            seed: r.seed,
            adversarial: r.adversarial,
            prior_std: r.prior_std,
            adversarial_weight: r.adversarial_weight,
            hidden_dim: r.hidden_dim,
            discriminator_hidden: r.discriminator_hidden,
            orientation,
            attention_rank: r.attention_rank,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(FileRecord {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    /// Fails if the file no longer hashes to the recorded digest.
    pub fn verify(&self) -> Result<()> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            bail!(
                "{} changed since the run (sha256 {}, recorded {})",
                self.path.display(),
                now,
                self.sha256
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub reconstruction: f64,
    pub discriminator: Option<f64>,
    pub generator: Option<f64>,
}

impl From<&PhaseLosses> for LossRecord {
    fn from(l: &PhaseLosses) -> Self {
        LossRecord {
            reconstruction: l.reconstruction,
            discriminator: l.discriminator,
            generator: l.generator,
        }
    }
}

/// Provenance written next to every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Resolved training configuration, for commands that train or load a model.
    pub config: Option<ConfigRecord>,
    /// Command-specific settings not covered by `config`.
    pub settings: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
    pub duration_secs: f64,
    pub final_losses: Option<LossRecord>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: None,
            settings: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_secs: 0.0,
            final_losses: None,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.into(), FileRecord::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.insert(role.into(), FileRecord::of(path)?);
        Ok(())
    }

    pub fn setting(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.settings.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn finish(&mut self, elapsed: Duration, path: &Path) -> Result<()> {
        self.duration_secs = elapsed.as_secs_f64();
        write_atomic(path, |w| {
            serde_json::to_writer_pretty(&mut *w, self)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_reader(open(path)?).with_context(|| format!("{} is not a run manifest", path.display()))
    }
}
