//! Binary checkpoints of a [`TrainState`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    6 bytes  "AAANE\0"
//! version  u32
//! count    u64      number of tensors
//! count x {
//!     name_len u32, name (UTF-8)
//!     rows u64, cols u64
//!     rows*cols f64, row-major
//! }
//! ```
//!
//! Everything is stored as named tensors: parameters under `param.<name>`,
//! optimizer moments under `adam.<name>.{first,second,step}`, and metadata
//! under `meta.*`. Integers wider than 32 bits are split into 32-bit halves so
//! they survive the trip through `f64` exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ScaleOrientation;
use crate::tensor::{Adam, Moments};
use crate::trainer::{PhaseLosses, TrainConfig, TrainState};

pub const MAGIC: &[u8; 6] = b"AAANE\0";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join_u64(lo: f64, hi: f64) -> Result<u64> {
    let part = |x: f64| {
        if x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0 {
            Ok(x as u64)
        } else {
            Err(bad(format!("corrupt integer field {x}")))
        }
    };
    Ok(part(lo)? | (part(hi)? << 32))
}

fn count(x: f64) -> Result<usize> {
    if x >= 0.0 && x < 2f64.powi(53) && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(bad(format!("corrupt count {x}")))
    }
}

fn encode_config(c: &TrainConfig) -> Vec<f64> {
    let mut v = vec![
        c.max_scale as f64,
        c.latent_dim as f64,
        c.negatives as f64,
        c.epochs as f64,
        c.batch_size as f64,
        c.lr,
    ];
    v.extend(split_u64(c.seed));
    v.extend([
        f64::from(u8::from(c.adversarial)),
        c.prior_std,
        c.adversarial_weight,
        c.hidden_dim as f64,
        c.discriminator_hidden as f64,
        match c.orientation {
            ScaleOrientation::Row => 0.0,
            ScaleOrientation::Column => 1.0,
        },
        c.attention_rank.unwrap_or(0) as f64,
    ]);
    v
}

fn decode_config(v: &[f64]) -> Result<TrainConfig> {
    if v.len() != 15 {
        return Err(bad(format!("config has {} fields, expected 15", v.len())));
    }
    let rank = count(v[14])?;
    Ok(TrainConfig {
        max_scale: count(v[0])?,
        latent_dim: count(v[1])?,
        negatives: count(v[2])?,
        epochs: count(v[3])?,
        batch_size: count(v[4])?,
        lr: v[5],
        seed: join_u64(v[6], v[7])?,
        adversarial: v[8] != 0.0,
        prior_std: v[9],
        adversarial_weight: v[10],
        hidden_dim: count(v[11])?,
        discriminator_hidden: count(v[12])?,
        orientation: if v[13] == 0.0 {
            ScaleOrientation::Row
        } else {
            ScaleOrientation::Column
        },
        attention_rank: (rank > 0).then_some(rank),
    })
}

fn encode_rng(rng: &ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = rng
        .get_seed()
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    v.extend(split_u64(rng.get_stream()));
    let pos = rng.get_word_pos();
    v.extend(split_u64(pos as u64));
    v.extend(split_u64((pos >> 64) as u64));
    v
}

fn decode_rng(v: &[f64]) -> Result<ChaCha8Rng> {
    if v.len() != 14 {
        return Err(bad("rng state has the wrong length"));
    }
    let mut seed = [0u8; 32];
    for (i, &w) in v[..8].iter().enumerate() {
        let word = join_u64(w, 0.0)? as u32;
        seed[4 * i..4 * i + 4].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(join_u64(v[8], v[9])?);
    let lo = join_u64(v[10], v[11])? as u128;
    let hi = join_u64(v[12], v[13])? as u128;
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn unopt(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

fn row(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("length matches")
}

fn collect_tensors(state: &TrainState) -> Vec<(String, Array2<f64>)> {
    let mut out = vec![
        ("meta.config".to_string(), row(encode_config(&state.config))),
        ("meta.epoch".to_string(), row(split_u64(state.epoch as u64).to_vec())),
        ("meta.rng".to_string(), row(encode_rng(&state.rng))),
    ];
    let mut history = Array2::zeros((state.history.len(), 3));
    for (i, l) in state.history.iter().enumerate() {
        history[[i, 0]] = l.reconstruction;
        history[[i, 1]] = opt(l.discriminator);
        history[[i, 2]] = opt(l.generator);
    }
    out.push(("meta.history".to_string(), history));
    for p in state.params.params() {
        out.push((format!("param.{}", p.name), p.value.array().clone()));
    }
    for (name, m) in state.optimizer.moments() {
        out.push((format!("adam.{name}.first"), m.first.clone()));
        out.push((format!("adam.{name}.second"), m.second.clone()));
        out.push((format!("adam.{name}.step"), row(split_u64(m.step).to_vec())));
    }
    out
}

pub fn save_checkpoint<W: Write>(state: &TrainState, mut sink: W) -> Result<()> {
    let tensors = collect_tensors(state);
    sink.write_all(MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    sink.write_all(&(tensors.len() as u64).to_le_bytes())?;
    let mut buf = Vec::new();
    for (name, t) in &tensors {
        buf.clear();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        buf.reserve(t.len() * 8);
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(())
}

fn read_exact<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(src: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(src: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every tensor of a checkpoint, keyed by name.
pub fn read_tensors<R: Read>(mut source: R) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut magic = [0u8; 6];
    read_exact(&mut source, &mut magic, "header")?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic bytes)"));
    }
    let version = read_u32(&mut source, "version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let n = read_u64(&mut source, "tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = read_u32(&mut source, "name length")? as usize;
        if len > 4096 {
            return Err(bad("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut source, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rows = read_u64(&mut source, &name)? as usize;
        let cols = read_u64(&mut source, &name)? as usize;
        let total = rows
            .checked_mul(cols)
            .and_then(|t| t.checked_mul(8))
            .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
        let mut bytes = Vec::new();
        let got = source.by_ref().take(total as u64).read_to_end(&mut bytes)?;
        if got != total {
            return Err(bad(format!("truncated while reading {name}")));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).expect("size checked");
        if out.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}

pub fn load_checkpoint<R: Read>(source: R) -> Result<TrainState> {
    let mut tensors = read_tensors(source)?;
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")));
    let flat = |t: Array2<f64>| t.into_iter().collect::<Vec<f64>>();

    let config = decode_config(&flat(take("meta.config")?))?;
    let epoch = flat(take("meta.epoch")?);
    if epoch.len() != 2 {
        return Err(bad("bad epoch field"));
    }
    let epoch = count(join_u64(epoch[0], epoch[1])? as f64)?;
    let rng = decode_rng(&flat(take("meta.rng")?))?;
    let history_t = take("meta.history")?;
    if history_t.ncols() != 3 || history_t.nrows() != epoch {
        return Err(bad("loss history does not match the epoch counter"));
    }
    let history = history_t
        .rows()
        .into_iter()
        .map(|r| PhaseLosses {
            reconstruction: r[0],
            discriminator: unopt(r[1]),
            generator: unopt(r[2]),
        })
        .collect();

    let attention = take("param.attention.m").or_else(|_| take("param.attention.u"))?;
    let nodes = attention.nrows();
    let mut state = TrainState::new(nodes, config);
    let mut optimizer = Adam::new(state.optimizer.config);
    for p in state.params.params_mut() {
        let key = format!("param.{}", p.name);
        let value = if key == "param.attention.m" || key == "param.attention.u" {
            attention.clone()
        } else {
            take(&key)?
        };
        if value.dim() != p.value.array().dim() {
            return Err(bad(format!(
                "{} has shape {:?}, expected {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        *p.value.array_mut() = value;
        let first = take(&format!("adam.{}.first", p.name));
        if let Ok(first) = first {
            let second = take(&format!("adam.{}.second", p.name))?;
            let step = flat(take(&format!("adam.{}.step", p.name))?);
            if first.dim() != p.value.array().dim() || second.dim() != first.dim() || step.len() != 2 {
                return Err(bad(format!("optimizer state for {} is malformed", p.name)));
            }
            let step = join_u64(step[0], step[1])?;
            optimizer.insert_moments(p.name.clone(), Moments { first, second, step });
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    state.optimizer = optimizer;
    state.epoch = epoch;
    state.history = history;
    state.rng = rng;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::trainer::{embed, train, train_until, TrainingData};
    use rand::RngCore;

    fn cfg() -> TrainConfig {
        TrainConfig {
            max_scale: 3,
            latent_dim: 4,
            negatives: 2,
            epochs: 2,
            batch_size: 4,
            hidden_dim: 8,
            discriminator_hidden: 5,
            seed: u64::MAX - 12345,
            ..TrainConfig::default()
        }
    }

    fn graph() -> Graph {
        Graph::from_edges(7, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)]).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (_, mut state) = train(&graph(), &cfg()).unwrap();
        state.rng.next_u32();
        let mut buf = Vec::new();
        save_checkpoint(&state, &mut buf).unwrap();
        assert_eq!(&buf[..6], MAGIC);
        let back = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, state);
        for (a, b) in back.params.params().iter().zip(state.params.params()) {
            for (x, y) in a.value.array().iter().zip(b.value.array()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn factored_and_column_configs_round_trip() {
        let c = TrainConfig {
            attention_rank: Some(3),
            orientation: ScaleOrientation::Column,
            adversarial: false,
            ..cfg()
        };
        let (_, state) = train(&graph(), &c).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&state, &mut buf).unwrap();
        assert_eq!(load_checkpoint(buf.as_slice()).unwrap(), state);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(matches!(load_checkpoint(&[][..]), Err(Error::Checkpoint(_))));
        let (_, state) = train(&graph(), &cfg()).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&state, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(load_checkpoint(cut), Err(Error::Checkpoint(_))));
        let mut wrong = buf.clone();
        wrong[6] = 9;
        let err = load_checkpoint(wrong.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(load_checkpoint(magic.as_slice()).is_err());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let g = graph();
        let c = TrainConfig { epochs: 4, ..cfg() };
        let (full, full_state) = train(&g, &c).unwrap();

        let data = TrainingData::new(&g, &c).unwrap();
        let mut state = TrainState::new(7, c.clone());
        train_until(&mut state, &data, 2).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&state, &mut buf).unwrap();
        let mut resumed = load_checkpoint(buf.as_slice()).unwrap();
        train_until(&mut resumed, &data, 4).unwrap();
        assert_eq!(resumed, full_state);
        assert_eq!(embed(&resumed, &data).unwrap(), full);
    }
}
