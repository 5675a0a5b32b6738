//! Graph ingestion and the family of k-step transition matrices.
//!
//! A graph is always undirected here: edge lines are symmetrized, self-loops
//! are dropped and duplicate edges collapse. The one-step transition matrix is
//! `A = D^-1 Ã`; isolated nodes keep an all-zero row. Powers `A^k` are stored
//! dense and computed exactly by sparse-times-dense row updates.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::sync::Arc;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row sums of stochastic rows must stay within this of 1.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

/// Largest `K` accepted by [`power_family`].
pub const MAX_SCALE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    neighbors: Vec<Vec<usize>>,
    edge_count: usize,
}

impl Graph {
    /// Builds a graph over nodes `0..node_count` labelled by their decimal index.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let ids = (0..node_count).map(|i| i.to_string()).collect();
        Self::with_ids(ids, edges)
    }

    pub fn with_ids(ids: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = ids.len();
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::argument(format!("duplicate node id {id:?}")));
            }
        }
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::argument(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        let neighbors: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let edge_count = neighbors.iter().map(Vec::len).sum::<usize>() / 2;
        Ok(Graph {
            ids,
            index,
            neighbors,
            edge_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Sorted neighbor list of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    /// Unordered edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            out.extend(nbrs.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.degree(i) == 0).collect()
    }

    /// Returns the graph with node `i` moved to index `perm[i]`. Ids travel with their nodes.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.node_count();
        if perm.len() != n {
            return Err(Error::argument("permutation length differs from node count"));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::argument("not a permutation"));
            }
        }
        let mut ids = vec![String::new(); n];
        for (i, id) in self.ids.iter().enumerate() {
            ids[perm[i]] = id.clone();
        }
        let edges: Vec<_> = self
            .edges()
            .into_iter()
            .map(|(a, b)| (perm[a], perm[b]))
            .collect();
        Self::with_ids(ids, &edges)
    }
}

/// Reads a whitespace separated edge list. Lines starting with `#` and blank lines are skipped.
pub fn load_edge_list<R: Read>(source: R) -> Result<Graph> {
    let mut reader = BufReader::new(source);
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut edges = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    let mut intern = |id: &str, ids: &mut Vec<String>| -> usize {
        if let Some(&i) = index.get(id) {
            return i;
        }
        let i = ids.len();
        index.insert(id.to_string(), i);
        ids.push(id.to_string());
        i
    };
    loop {
        buf.clear();
        line_no += 1;
        let read = reader.read_line(&mut buf).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if read == 0 {
            break;
        }
        let line = buf.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let (a, b) = match (tokens.next(), tokens.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected two node ids, found {line:?}"),
                })
            }
        };
        let ia = intern(a, &mut ids);
        let ib = intern(b, &mut ids);
        edges.push((ia, ib));
    }
    if ids.is_empty() {
        return Err(Error::EmptyGraph);
    }
    Graph::with_ids(ids, &edges)
}

/// Dense matrix of k-step transition probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    order: usize,
    entries: Array2<f64>,
}

impl TransitionMatrix {
    /// Wraps a square matrix after checking entries lie in [0, 1] and non-zero rows are stochastic.
    pub fn new(order: usize, entries: Array2<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::argument("transition order must be >= 1"));
        }
        if !entries.is_square() {
            return Err(Error::shape("transition", format!("{:?} is not square", entries.shape())));
        }
        audit_stochastic(&entries)?;
        Ok(TransitionMatrix { order, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.entries.row(i)
    }
}

fn audit_stochastic(entries: &Array2<f64>) -> Result<()> {
    for (i, row) in entries.axis_iter(Axis(0)).enumerate() {
        let mut sum = 0.0;
        let mut any = false;
        for &v in row {
            if !(0.0..=1.0 + STOCHASTIC_TOLERANCE).contains(&v) {
                return Err(Error::argument(format!("entry {v} in row {i} is not a probability")));
            }
            any |= v != 0.0;
            sum += v;
        }
        if any && (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
            return Err(Error::argument(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// `A = D^-1 Ã`. Isolated nodes get an all-zero row.
pub fn normalize(graph: &Graph) -> Result<TransitionMatrix> {
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut entries = Array2::zeros((n, n));
    let mut isolated = 0usize;
    for i in 0..n {
        let nbrs = graph.neighbors(i);
        if nbrs.is_empty() {
            isolated += 1;
            continue;
        }
        let p = 1.0 / nbrs.len() as f64;
        for &j in nbrs {
            entries[[i, j]] = p;
        }
    }
    if isolated > 0 {
        warn!("{isolated} isolated node(s) get zero transition rows and zero embeddings");
    }
    Ok(TransitionMatrix { order: 1, entries })
}

/// Which slice of `A^k` represents a node at scale k.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ScaleOrientation {
    /// Row i of A^k: probabilities of reaching each node from i in k steps.
    #[default]
    Row,
    /// Column i of A^k: probabilities of arriving at i from each node.
    Column,
}

/// The matrices `A, A^2, ..., A^K` together with the per-node view used as scale vectors.
#[derive(Debug, Clone)]
pub struct ScaleFamily {
    matrices: Vec<Arc<TransitionMatrix>>,
    orientation: ScaleOrientation,
    isolated: Vec<bool>,
}

/// Computes `[A, A^2, ..., A^K]`, auditing stochasticity after every product.
pub fn power_family(a: &TransitionMatrix, max_scale: usize) -> Result<ScaleFamily> {
    if a.order != 1 {
        return Err(Error::argument("power_family needs the one-step matrix"));
    }
    if !(1..=MAX_SCALE).contains(&max_scale) {
        return Err(Error::argument(format!(
            "max scale must lie in 1..={MAX_SCALE}, got {max_scale}"
        )));
    }
    let n = a.size();
    // CSR view of A: row -> (col, prob)
    let sparse: Vec<Vec<(usize, f64)>> = a
        .entries
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, &v)| (j, v))
                .collect()
        })
        .collect();
    let isolated = sparse.iter().map(Vec::is_empty).collect();

    let mut matrices = vec![Arc::new(a.clone())];
    for order in 2..=max_scale {
        let prev = &matrices[order - 2].entries;
        let mut next = Array2::<f64>::zeros((n, n));
        // row i of A^k = sum_j A[i][j] * row j of A^(k-1), accumulated in neighbor order
        next.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(sparse.par_iter())
            .for_each(|(mut row, terms)| {
                for &(j, p) in terms {
                    row.scaled_add(p, &prev.row(j));
                }
            });
        audit_stochastic(&next)?;
        matrices.push(Arc::new(TransitionMatrix { order, entries: next }));
    }
    Ok(ScaleFamily {
        matrices,
        orientation: ScaleOrientation::Row,
        isolated,
    })
}

impl ScaleFamily {
    pub fn with_orientation(mut self, orientation: ScaleOrientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn orientation(&self) -> ScaleOrientation {
        self.orientation
    }

    /// Number of scales K in this family.
    pub fn max_scale(&self) -> usize {
        self.matrices.len()
    }

    pub fn node_count(&self) -> usize {
        self.isolated.len()
    }

    pub fn matrices(&self) -> impl Iterator<Item = &TransitionMatrix> {
        self.matrices.iter().map(|m| m.as_ref())
    }

    /// Scale-k matrix, 1-based position in the family.
    pub fn matrix(&self, k: usize) -> &TransitionMatrix {
        &self.matrices[k - 1]
    }

    pub fn is_isolated(&self, node: usize) -> bool {
        self.isolated[node]
    }

    /// Nodes with at least one neighbor, ascending.
    pub fn connected_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| !self.isolated[i]).collect()
    }

    /// Sub-family holding only the listed 1-based positions (shares storage).
    pub fn select(&self, positions: &[usize]) -> Result<ScaleFamily> {
        if positions.is_empty() {
            return Err(Error::argument("empty scale selection"));
        }
        let mut matrices = Vec::with_capacity(positions.len());
        for &k in positions {
            if k < 1 || k > self.max_scale() {
                return Err(Error::argument(format!("scale {k} outside 1..={}", self.max_scale())));
            }
            matrices.push(Arc::clone(&self.matrices[k - 1]));
        }
        Ok(ScaleFamily {
            matrices,
            orientation: self.orientation,
            isolated: self.isolated.clone(),
        })
    }

    fn check(&self, node: usize, k: usize) -> Result<()> {
        if node >= self.node_count() {
            return Err(Error::argument(format!(
                "node {node} out of range for {} nodes",
                self.node_count()
            )));
        }
        if k < 1 || k > self.max_scale() {
            return Err(Error::argument(format!("scale {k} outside 1..={}", self.max_scale())));
        }
        Ok(())
    }

    /// Scale vector `X^k` of `node`.
    pub fn scale_vector(&self, node: usize, k: usize) -> Result<Array1<f64>> {
        self.check(node, k)?;
        Ok(self.view(node, k).to_owned())
    }

    pub(crate) fn view(&self, node: usize, k: usize) -> ArrayView1<'_, f64> {
        let m = &self.matrices[k - 1].entries;
        match self.orientation {
            ScaleOrientation::Row => m.row(node),
            ScaleOrientation::Column => m.column(node),
        }
    }

    /// Stacks the scale-k vectors of `nodes` as rows.
    pub fn gather(&self, k: usize, nodes: &[usize]) -> Array2<f64> {
        let n = self.node_count();
        let mut out = Array2::zeros((nodes.len(), n));
        for (mut dst, &node) in out.axis_iter_mut(Axis(0)).zip(nodes) {
            dst.assign(&self.view(node, k));
        }
        out
    }

    /// Unweighted mean of every scale vector, one row per node in `nodes`.
    pub fn gather_context(&self, nodes: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((nodes.len(), self.node_count()));
        let inv = 1.0 / self.max_scale() as f64;
        for (mut dst, &node) in out.axis_iter_mut(Axis(0)).zip(nodes) {
            for k in 1..=self.max_scale() {
                dst += &self.view(node, k);
            }
            dst *= inv;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    fn brute_power(a: &Array2<f64>, k: usize) -> Array2<f64> {
        let n = a.nrows();
        let mut acc = a.clone();
        for _ in 1..k {
            let mut next = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for t in 0..n {
                        s += acc[[i, t]] * a[[t, j]];
                    }
                    next[[i, j]] = s;
                }
            }
            acc = next;
        }
        acc
    }

    #[test]
    fn loads_simple_lines() {
        let g = load_edge_list("a b\nb c\n".as_bytes()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.index_of("c"), Some(2));
        assert_eq!(g.id(1), "b");
    }

    #[test]
    fn collapses_duplicates_and_self_loops() {
        let g = load_edge_list("a b\nb a\na a\n".as_bytes()).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn skips_comments_and_tabs() {
        let g = load_edge_list("# header\n\nx\t\ty\n  y   z  \n".as_bytes()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = load_edge_list("a b\n# c\nlonely\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(load_edge_list("".as_bytes()), Err(Error::EmptyGraph)));
        assert!(matches!(load_edge_list("# only\n".as_bytes()), Err(Error::EmptyGraph)));
    }

    #[test]
    fn invalid_utf8_is_parse_error() {
        let bytes: &[u8] = b"a b\n\xff\xfe c\n";
        assert!(matches!(load_edge_list(bytes), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn normalize_single_edge() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let a = normalize(&g).unwrap();
        assert_eq!(a.entries(), &array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(a.order(), 1);
    }

    #[test]
    fn normalize_path_and_isolated() {
        let a = normalize(&path3()).unwrap();
        assert_eq!(
            a.entries(),
            &array![[0.0, 1.0, 0.0], [0.5, 0.0, 0.5], [0.0, 1.0, 0.0]]
        );
        let g = Graph::from_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let a = normalize(&g).unwrap();
        assert!(a.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn path_square_matches_hand_product() {
        let fam = power_family(&normalize(&path3()).unwrap(), 2).unwrap();
        let expected = brute_power(normalize(&path3()).unwrap().entries(), 2);
        assert_eq!(expected, array![[0.5, 0.0, 0.5], [0.0, 1.0, 0.0], [0.5, 0.0, 0.5]]);
        assert!(fam.matrix(2).entries().abs_diff_eq(&expected, 1e-15));
        assert_eq!(fam.matrix(2).order(), 2);
    }

    #[test]
    fn single_edge_square_is_identity() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let fam = power_family(&normalize(&g).unwrap(), 2).unwrap();
        assert_eq!(fam.matrix(2).entries(), &Array2::<f64>::eye(2));
    }

    #[test]
    fn k1_family_is_a() {
        let a = normalize(&path3()).unwrap();
        let fam = power_family(&a, 1).unwrap();
        assert_eq!(fam.max_scale(), 1);
        assert_eq!(fam.matrix(1), &a);
    }

    #[test]
    fn rejects_bad_scale() {
        let a = normalize(&path3()).unwrap();
        assert!(matches!(power_family(&a, 0), Err(Error::Argument(_))));
        let fam = power_family(&a, 1).unwrap();
        assert!(power_family(fam.matrix(1), MAX_SCALE + 1).is_err());
    }

    #[test]
    fn scale_vectors_of_path() {
        let fam = power_family(&normalize(&path3()).unwrap(), 2).unwrap();
        assert_eq!(fam.scale_vector(1, 1).unwrap(), array![0.5, 0.0, 0.5]);
        assert_eq!(fam.scale_vector(1, 2).unwrap(), array![0.0, 1.0, 0.0]);
        assert!(fam.scale_vector(3, 1).is_err());
        assert!(fam.scale_vector(0, 3).is_err());
        assert!(fam.scale_vector(0, 0).is_err());
    }

    #[test]
    fn isolated_scale_vector_is_zero() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2)]).unwrap();
        let fam = power_family(&normalize(&g).unwrap(), 3).unwrap();
        for k in 1..=3 {
            assert!(fam.scale_vector(3, k).unwrap().iter().all(|&v| v == 0.0));
        }
        assert!(fam.is_isolated(3));
        assert_eq!(fam.connected_nodes(), vec![0, 1, 2]);
    }

    #[test]
    fn column_orientation_reads_columns() {
        let fam = power_family(&normalize(&path3()).unwrap(), 1)
            .unwrap()
            .with_orientation(ScaleOrientation::Column);
        assert_eq!(fam.scale_vector(0, 1).unwrap(), array![0.0, 0.5, 0.0]);
    }

    #[test]
    fn gather_context_averages_scales() {
        let fam = power_family(&normalize(&path3()).unwrap(), 2).unwrap();
        let y = fam.gather_context(&[1]);
        assert!(y.row(0).abs_diff_eq(&array![0.25, 0.5, 0.25], 1e-15));
    }

    #[test]
    fn power_family_is_thread_count_independent() {
        let edges: Vec<_> = (0..40).flat_map(|i| [(i, (i * 7 + 3) % 40), (i, (i + 1) % 40)]).collect();
        let g = Graph::from_edges(40, &edges).unwrap();
        let a = normalize(&g).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| power_family(&a, 6).unwrap())
        };
        let one = run(1);
        let four = run(4);
        for k in 1..=6 {
            assert_eq!(one.matrix(k).entries(), four.matrix(k).entries());
        }
    }

    #[test]
    fn relabel_round_trips_ids() {
        let g = load_edge_list("a b\nb c\n".as_bytes()).unwrap();
        let h = g.relabel(&[2, 0, 1]).unwrap();
        assert_eq!(h.id(2), "a");
        assert_eq!(h.index_of("b"), Some(0));
        assert_eq!(h.edge_count(), 2);
        assert!(g.relabel(&[0, 0, 1]).is_err());
    }
}
