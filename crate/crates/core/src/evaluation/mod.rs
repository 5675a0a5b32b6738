//! Node-classification evaluation of embeddings.
//!
//! Accuracy is measured with stratified train/test splits and a one-vs-rest
//! logistic-regression probe. Also here: per-scale baselines, attention
//! summaries and parameter sweeps.

pub mod logistic;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::trainer::{attention_matrix, train_on, TrainConfig, TrainState, TrainingData};

pub use logistic::{fit, lbfgs, LbfgsOptions, LbfgsResult, LogisticModel};

/// L2 strength of the probe.
pub const L2_STRENGTH: f64 = 1.0;
/// Split attempts before giving up on covering every class.
pub const SPLIT_ATTEMPTS: usize = 10;

/// Class labels for a subset of nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    /// `(node, class)` sorted by node.
    entries: Vec<(usize, usize)>,
    names: Vec<String>,
}

impl LabelSet {
    /// `entries` pairs node indices with class ids `0..names.len()`.
    pub fn new(mut entries: Vec<(usize, usize)>, names: Vec<String>, node_count: usize) -> Result<Self> {
        entries.sort_unstable();
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::argument(format!("node {} labeled twice", w[0].0)));
            }
        }
        if let Some(&(n, _)) = entries.iter().find(|&&(n, _)| n >= node_count) {
            return Err(Error::argument(format!("labeled node {n} outside 0..{node_count}")));
        }
        if let Some(&(_, c)) = entries.iter().find(|&&(_, c)| c >= names.len()) {
            return Err(Error::argument(format!("class {c} has no name")));
        }
        let mut seen = vec![false; names.len()];
        entries.iter().for_each(|&(_, c)| seen[c] = true);
        if seen.iter().any(|s| !s) {
            return Err(Error::argument("class ids are not contiguous"));
        }
        Ok(LabelSet { entries, names })
    }

    /// Parses `<node-id>\t<label>` lines, resolving ids with `index_of`.
    ///
    /// Classes are numbered in order of first appearance. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn read<R: Read>(source: R, node_count: usize, index_of: impl Fn(&str) -> Option<usize>) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut classes: HashMap<String, usize> = HashMap::new();
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for (i, line) in BufReader::new(source).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected <node-id>\\t<label>, got {trimmed:?}"),
                });
            }
            let node = index_of(fields[0]).ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("unknown node id {:?}", fields[0]),
            })?;
            if let Some(prev) = seen.insert(node, lineno) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("node {:?} already labeled on line {prev}", fields[0]),
                });
            }
            let next = names.len();
            let class = *classes.entry(fields[1].to_string()).or_insert_with(|| {
                names.push(fields[1].to_string());
                next
            });
            entries.push((node, class));
        }
        if entries.is_empty() {
            return Err(Error::Evaluation("labels file has no entries".into()));
        }
        LabelSet::new(entries, names, node_count)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn class_of(&self, node: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&node, |&(n, _)| n)
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// Labeled nodes of each class, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count()];
        for &(n, c) in &self.entries {
            out[c].push(n);
        }
        out
    }
}

/// A train/test partition of the labeled nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class contributes `ratio * n_c` training nodes,
/// rounded stochastically so the expected share is exact. Redraws up to
/// [`SPLIT_ATTEMPTS`] times until every class is present in training and the
/// test side is non-empty.
pub fn stratified_split<R: Rng + ?Sized>(labels: &LabelSet, ratio: f64, rng: &mut R) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::argument(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let members = labels.members();
    for _ in 0..SPLIT_ATTEMPTS {
        let mut split = Split {
            train: Vec::new(),
            test: Vec::new(),
        };
        let mut complete = true;
        for class in &members {
            let mut nodes = class.clone();
            nodes.shuffle(rng);
            let exact = ratio * nodes.len() as f64;
            let mut take = exact.floor() as usize;
            if rng.random::<f64>() < exact - exact.floor() {
                take += 1;
            }
            complete &= take > 0;
            split.train.extend_from_slice(&nodes[..take]);
            split.test.extend_from_slice(&nodes[take..]);
        }
        if complete && !split.test.is_empty() {
            split.train.sort_unstable();
            split.test.sort_unstable();
            return Ok(split);
        }
    }
    Err(Error::Evaluation(format!(
        "could not draw a split at ratio {ratio} covering every class in {SPLIT_ATTEMPTS} attempts"
    )))
}

/// Trains the probe on `split.train` and returns accuracy on `split.test`.
pub fn split_accuracy(emb: &EmbeddingMatrix, labels: &LabelSet, split: &Split) -> Result<f64> {
    let rows = |nodes: &[usize]| emb.values().select(Axis(0), nodes);
    let class = |n: usize| labels.class_of(n).expect("split from labels");
    let xtr = rows(&split.train);
    let ytr: Vec<usize> = split.train.iter().map(|&n| class(n)).collect();
    let model = fit(xtr.view(), &ytr, labels.class_count(), L2_STRENGTH, &LbfgsOptions::default())?;
    let pred = model.predict(rows(&split.test).view());
    let correct = pred.iter().zip(&split.test).filter(|&(&p, &n)| p == class(n)).count();
    Ok(correct as f64 / split.test.len() as f64)
}

/// Accuracy over repeated splits at one ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub ratio: f64,
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
    pub runs: Vec<f64>,
}

/// Split generator for repeat `r`: stream `r` of the seed.
fn split_rng(seed: u64, repeat: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    rng
}

pub fn classify(emb: &EmbeddingMatrix, labels: &LabelSet, ratio: f64, repeats: usize, seed: u64) -> Result<Accuracy> {
    if repeats == 0 {
        return Err(Error::argument("repeats must be positive"));
    }
    if let Some(&(n, _)) = labels.entries().iter().find(|&&(n, _)| n >= emb.node_count()) {
        return Err(Error::argument(format!("labeled node {n} has no embedding row")));
    }
    let runs = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let split = stratified_split(labels, ratio, &mut split_rng(seed, r))?;
            split_accuracy(emb, labels, &split)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = runs.iter().sum::<f64>() / repeats as f64;
    let var = runs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / repeats as f64;
    Ok(Accuracy {
        ratio,
        mean,
        std: var.sqrt(),
        runs,
    })
}

/// Trains a single-scale, non-adversarial model on each `X^k` and probes it at `ratio`.
pub fn per_scale_baseline(
    graph: &Graph,
    labels: &LabelSet,
    cfg: &TrainConfig,
    ratio: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<Accuracy>> {
    let full = TrainingData::new(graph, cfg)?;
    let single = TrainConfig {
        max_scale: 1,
        adversarial: false,
        ..cfg.clone()
    };
    (1..=cfg.max_scale)
        .map(|k| {
            let data = TrainingData::from_family(full.family.select(&[k])?);
            let (emb, _) = train_on(&data, &single)?;
            log::info!("per-scale baseline k={k} trained");
            classify(&emb, labels, ratio, repeats, seed)
        })
        .collect()
}

/// Learned attention for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    /// Column means of `per_node`.
    pub means: Vec<f64>,
    /// `|V| x K`; isolated nodes are uniform.
    pub per_node: Array2<f64>,
}

pub fn attention_summary(state: &TrainState, data: &TrainingData) -> Result<AttentionSummary> {
    let per_node = attention_matrix(state, data)?;
    let n = per_node.nrows() as f64;
    let means = per_node.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
    Ok(AttentionSummary { means, per_node })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Latent dimension d.
    Dim,
    /// Number of scales K.
    Scales,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Dim => "dim",
            SweepParam::Scales => "scales",
        }
    }

    pub fn apply(self, cfg: &TrainConfig, value: usize) -> TrainConfig {
        match self {
            SweepParam::Dim => TrainConfig {
                latent_dim: value,
                ..cfg.clone()
            },
            SweepParam::Scales => TrainConfig {
                max_scale: value,
                ..cfg.clone()
            },
        }
    }
}

/// Trains once per value and probes each model at `ratio`.
pub fn sweep(
    graph: &Graph,
    labels: &LabelSet,
    param: SweepParam,
    values: &[usize],
    cfg: &TrainConfig,
    ratio: f64,
    repeats: usize,
    seed: u64,
) -> Result<Vec<(usize, Accuracy)>> {
    if values.is_empty() {
        return Err(Error::argument("sweep needs at least one value"));
    }
    values
        .iter()
        .map(|&v| {
            let c = param.apply(cfg, v);
            let data = TrainingData::new(graph, &c)?;
            let (emb, _) = train_on(&data, &c)?;
            log::info!("sweep {}={v} trained", param.name());
            Ok((v, classify(&emb, labels, ratio, repeats, seed)?))
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::argument("spearman needs two equal-length series of length >= 2"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Evaluation("spearman is undefined for a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

/// Accuracy per training ratio, plus optional per-scale and attention tables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub ratios: Vec<Accuracy>,
    pub per_scale: Vec<Accuracy>,
    pub attention_means: Vec<f64>,
}

impl EvalReport {
    /// `ratio\tmean_acc\tstd_acc`
    pub fn write_ratio_table<W: Write>(&self, out: W) -> Result<()> {
        write_accuracy_table(out, "ratio", self.ratios.iter().map(|a| (format_ratio(a.ratio), a)))
    }

    /// `k\tmean_acc\tstd_acc\tattention` (attention column present when known).
    pub fn write_scale_table<W: Write>(&self, mut out: W) -> Result<()> {
        let with_attention = self.attention_means.len() == self.per_scale.len();
        write!(out, "k\tmean_acc\tstd_acc")?;
        if with_attention {
            write!(out, "\tattention")?;
        }
        writeln!(out)?;
        for (i, a) in self.per_scale.iter().enumerate() {
            write!(out, "{}\t{:.6}\t{:.6}", i + 1, a.mean, a.std)?;
            if with_attention {
                write!(out, "\t{:.6}", self.attention_means[i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Header row then one `key\tmean_acc\tstd_acc` line per entry.
pub fn write_accuracy_table<'a, W: Write>(
    mut out: W,
    key: &str,
    rows: impl Iterator<Item = (String, &'a Accuracy)>,
) -> Result<()> {
    writeln!(out, "{key}\tmean_acc\tstd_acc")?;
    for (k, a) in rows {
        writeln!(out, "{k}\t{:.6}\t{:.6}", a.mean, a.std)?;
    }
    out.flush()?;
    Ok(())
}

/// Shortest decimal form, e.g. `0.1`, `0.5`.
pub fn format_ratio(r: f64) -> String {
    let s = format!("{r:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn labels_from(classes: &[usize]) -> LabelSet {
        let k = classes.iter().max().unwrap() + 1;
        LabelSet::new(
            classes.iter().copied().enumerate().collect(),
            (0..k).map(|c| format!("c{c}")).collect(),
            classes.len(),
        )
        .unwrap()
    }

    #[test]
    fn labels_parse() {
        let ids = ["a", "b", "c"];
        let idx = |s: &str| ids.iter().position(|&x| x == s);
        let set = LabelSet::read("b\tx\n# note\na\ty\n\nc\tx\n".as_bytes(), 3, idx).unwrap();
        assert_eq!(set.class_count(), 2);
        assert_eq!(set.class_names(), ["x", "y"]);
        assert_eq!(set.class_of(0), Some(1));
        assert_eq!(set.class_of(1), Some(0));
        let err = LabelSet::read("a\tx\nx\tb\n".as_bytes(), 3, idx).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("\"x\""));
        assert!(matches!(
            LabelSet::read("a x\n".as_bytes(), 3, idx),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(LabelSet::read("a\tx\na\ty\n".as_bytes(), 3, idx).is_err());
    }

    #[test]
    fn one_hot_is_perfect() {
        let classes: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let labels = labels_from(&classes);
        let x = Array2::from_shape_fn((30, 3), |(i, c)| f64::from(u8::from(classes[i] == c)));
        let emb = EmbeddingMatrix::new(x).unwrap();
        for ratio in [0.1, 0.5, 0.9] {
            let acc = classify(&emb, &labels, ratio, 5, 0).unwrap();
            assert_eq!(acc.mean, 1.0);
            assert_eq!(acc.runs.len(), 5);
        }
    }

    #[test]
    fn random_embeddings_are_chance() {
        let classes: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let labels = labels_from(&classes);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((200, 8), |_| StandardNormal.sample(&mut rng));
        let emb = EmbeddingMatrix::new(x).unwrap();
        let acc = classify(&emb, &labels, 0.5, 10, 3).unwrap();
        assert!((acc.mean - 0.5).abs() <= 0.1, "{}", acc.mean);
    }

    #[test]
    fn classify_is_deterministic() {
        let classes: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let labels = labels_from(&classes);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((40, 5), |(i, _)| classes[i] as f64 + rng.random_range(-2.0..2.0));
        let emb = EmbeddingMatrix::new(x).unwrap();
        assert_eq!(classify(&emb, &labels, 0.3, 4, 9).unwrap(), classify(&emb, &labels, 0.3, 4, 9).unwrap());
        assert!(classify(&emb, &labels, 0.0, 4, 9).is_err());
        assert!(classify(&emb, &labels, 0.5, 0, 9).is_err());
    }

    #[test]
    fn train_accuracy_at_least_test_on_one_hot() {
        let classes: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let labels = labels_from(&classes);
        let x = Array2::from_shape_fn((20, 2), |(i, c)| f64::from(u8::from(classes[i] == c)));
        let emb = EmbeddingMatrix::new(x).unwrap();
        let split = stratified_split(&labels, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let on_train = Split {
            train: split.train.clone(),
            test: split.train.clone(),
        };
        assert!(split_accuracy(&emb, &labels, &on_train).unwrap() >= split_accuracy(&emb, &labels, &split).unwrap());
    }

    #[test]
    fn missing_class_errors_after_retries() {
        // a singleton class at ratio 0.01 is almost never drawn
        let mut classes = vec![0; 50];
        classes.push(1);
        let labels = labels_from(&classes);
        let err = stratified_split(&labels, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // ties: Pearson on average ranks
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        // ranks a = [1, 2.5, 2.5, 4], b = [1, 3, 2, 4]
        let expected = 4.5 / (4.5f64 * 5.0).sqrt();
        assert!((r - expected).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ratio_table_format() {
        let report = EvalReport {
            ratios: vec![Accuracy {
                ratio: 0.1,
                mean: 0.5,
                std: 0.25,
                runs: vec![],
            }],
            ..EvalReport::default()
        };
        let mut buf = Vec::new();
        report.write_ratio_table(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "ratio\tmean_acc\tstd_acc\n0.1\t0.500000\t0.250000\n");
    }

    proptest! {
        #[test]
        fn split_is_stratified(sizes in prop::collection::vec(2usize..30, 1..5), ratio in 0.2f64..0.8, seed in 0u64..1000) {
            let classes: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
            let labels = labels_from(&classes);
            if let Ok(split) = stratified_split(&labels, ratio, &mut ChaCha8Rng::seed_from_u64(seed)) {
                let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..classes.len()).collect::<Vec<_>>());
                for (c, &n) in sizes.iter().enumerate() {
                    let t = split.train.iter().filter(|&&i| classes[i] == c).count() as f64;
                    prop_assert!((t - ratio * n as f64).abs() < 1.0);
                }
            }
        }
    }
}
