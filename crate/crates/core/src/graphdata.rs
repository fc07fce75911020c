//! Synthetic attributed graphs, non-IID Dirichlet partitioning and
//! per-worker subgraphs with cross-worker edge bookkeeping.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, SimRng};

/// The shared graph all workers' subgraphs are cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGraph {
    pub num_nodes: usize,
    /// Unordered edges stored as `(u, v)` with `u < v`, sorted and unique.
    pub edges: Vec<(usize, usize)>,
    /// Sorted neighbour lists, derived from `edges`.
    pub adjacency: Vec<Vec<usize>>,
    /// One row per node.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl GlobalGraph {
    /// Builds a graph from raw parts, normalising the edge list and checking invariants.
    pub fn from_parts(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::config("graph must have at least one node"));
        }
        if features.nrows() != num_nodes || labels.len() != num_nodes {
            return Err(Error::shape(format!(
                "{} nodes but {} feature rows and {} labels",
                num_nodes,
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::config(format!(
                    "edge ({u}, {v}) references a missing node"
                )));
            }
            if u == v {
                continue;
            }
            set.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            num_nodes,
            edges,
            adjacency,
            features,
            labels,
            num_classes,
            train_mask: vec![true; num_nodes],
            test_mask: vec![false; num_nodes],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// Uniform train/test split over the whole graph.
    pub fn split_uniform(&mut self, test_fraction: f64, rng: &mut SimRng) {
        let mut order: Vec<usize> = (0..self.num_nodes).collect();
        order.shuffle(rng);
        let n_test = (test_fraction * self.num_nodes as f64).round() as usize;
        self.apply_split(order.iter().take(n_test).copied());
    }

    /// Uniform train/test split carried out independently inside each worker's node set.
    pub fn split_per_worker(&mut self, owners: &OwnerMap, test_fraction: f64, rng: &mut SimRng) {
        let mut test = Vec::new();
        for w in 0..owners.num_workers {
            let mut nodes = owners.nodes_of(w);
            nodes.shuffle(rng);
            let n_test = (test_fraction * nodes.len() as f64).round() as usize;
            test.extend(nodes.into_iter().take(n_test));
        }
        self.apply_split(test);
    }

    fn apply_split(&mut self, test_nodes: impl IntoIterator<Item = usize>) {
        self.train_mask = vec![true; self.num_nodes];
        self.test_mask = vec![false; self.num_nodes];
        for v in test_nodes {
            self.test_mask[v] = true;
            self.train_mask[v] = false;
        }
    }

    pub fn class_distribution(&self) -> Vec<f64> {
        class_histogram(self.labels.iter().copied(), self.num_classes)
    }
}

fn class_histogram(labels: impl Iterator<Item = usize>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    let mut total = 0.0;
    for l in labels {
        counts[l] += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        for c in &mut counts {
            *c /= total;
        }
    }
    counts
}

/// Stochastic block model parameters with class-conditional Gaussian features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    /// Length of each class mean vector; features are `margin * e_c + N(0, I)`.
    pub feature_margin: f64,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            num_nodes: 400,
            num_classes: 4,
            p_intra: 0.1,
            p_inter: 0.01,
            feature_dim: 16,
            feature_margin: 1.0,
        }
    }
}

impl SbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::config("num_nodes must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        let ok = (0.0..=1.0).contains(&self.p_inter)
            && (0.0..=1.0).contains(&self.p_intra)
            && self.p_inter <= self.p_intra;
        if !ok {
            return Err(Error::config(format!(
                "need 0 <= p_inter ({}) <= p_intra ({}) <= 1",
                self.p_inter, self.p_intra
            )));
        }
        Ok(())
    }
}

/// Block of node `v` when `n` nodes are cut into `k` contiguous, balanced blocks.
pub fn block_of(v: usize, n: usize, k: usize) -> usize {
    v * k / n
}

/// Samples an SBM graph. All nodes start in the training set; callers split afterwards.
pub fn generate_sbm(params: &SbmParams, seed: u64) -> Result<GlobalGraph> {
    params.validate()?;
    let n = params.num_nodes;
    let k = params.num_classes;
    let mut rng = seeded(seed);
    let labels: Vec<usize> = (0..n).map(|v| block_of(v, n, k)).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                params.p_intra
            } else {
                params.p_inter
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let d = params.feature_dim;
    let mut features = DMatrix::zeros(n, d);
    for v in 0..n {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[(v, j)] = noise;
        }
        features[(v, labels[v] % d)] += params.feature_margin;
    }
    GlobalGraph::from_parts(n, edges, features, labels, k)
}

/// Dirichlet non-IID partition settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_workers: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_workers == 0 {
            return Err(Error::config("num_workers must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Node id -> owning worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerMap {
    pub num_workers: usize,
    pub owner: Vec<usize>,
}

impl OwnerMap {
    pub fn new(num_workers: usize, owner: Vec<usize>) -> Result<Self> {
        if let Some(&w) = owner.iter().find(|&&w| w >= num_workers) {
            return Err(Error::config(format!(
                "owner {w} outside [0, {num_workers})"
            )));
        }
        Ok(Self { num_workers, owner })
    }

    pub fn owner_of(&self, v: usize) -> usize {
        self.owner[v]
    }

    pub fn nodes_of(&self, worker: usize) -> Vec<usize> {
        (0..self.owner.len())
            .filter(|&v| self.owner[v] == worker)
            .collect()
    }
}

/// Draws Dir(alpha * 1_m) through normalised Gamma variates.
fn dirichlet_weights(m: usize, alpha: f64, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        for x in &mut w {
            *x /= total;
        }
    } else {
        // Every draw underflowed (tiny alpha): the limit puts all mass on one worker.
        let hit = rng.random_range(0..m);
        w = (0..m).map(|j| if j == hit { 1.0 } else { 0.0 }).collect();
    }
    w
}

/// Splits each class among the workers with Dirichlet-drawn proportions.
pub fn dirichlet_partition(graph: &GlobalGraph, spec: &PartitionSpec) -> Result<OwnerMap> {
    spec.validate()?;
    if graph.num_nodes == 0 {
        return Err(Error::config("cannot partition an empty graph"));
    }
    let m = spec.num_workers;
    let mut rng = seeded(spec.seed);
    let mut owner = vec![0; graph.num_nodes];
    for class in 0..graph.num_classes {
        let mut members: Vec<usize> = (0..graph.num_nodes)
            .filter(|&v| graph.labels[v] == class)
            .collect();
        if m == 1 {
            continue;
        }
        members.shuffle(&mut rng);
        let weights = dirichlet_weights(m, spec.alpha, &mut rng);
        let n = members.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (w, p) in weights.iter().enumerate() {
            cum += p;
            let end = if w + 1 == m {
                members.len()
            } else {
                ((cum * n).round() as usize).clamp(start, members.len())
            };
            for &v in &members[start..end] {
                owner[v] = w;
            }
            start = end;
        }
    }
    OwnerMap::new(m, owner)
}

/// Half of a cross-worker edge, recorded on the side that owns `local`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExternalStub {
    pub local: usize,
    pub remote: usize,
    pub remote_worker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub worker_id: usize,
    pub local_nodes: Vec<usize>,
    pub internal_edges: Vec<(usize, usize)>,
    pub external_stubs: Vec<ExternalStub>,
    pub train_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
}

impl Subgraph {
    /// Remote workers this subgraph has at least one external edge to.
    pub fn remote_workers(&self) -> BTreeSet<usize> {
        self.external_stubs
            .iter()
            .map(|s| s.remote_worker)
            .collect()
    }
}

pub fn build_subgraphs(graph: &GlobalGraph, owners: &OwnerMap) -> Vec<Subgraph> {
    let mut subs: Vec<Subgraph> = (0..owners.num_workers)
        .map(|w| Subgraph {
            worker_id: w,
            local_nodes: Vec::new(),
            internal_edges: Vec::new(),
            external_stubs: Vec::new(),
            train_nodes: Vec::new(),
            test_nodes: Vec::new(),
        })
        .collect();
    for v in 0..graph.num_nodes {
        let s = &mut subs[owners.owner_of(v)];
        s.local_nodes.push(v);
        if graph.train_mask[v] {
            s.train_nodes.push(v);
        }
        if graph.test_mask[v] {
            s.test_nodes.push(v);
        }
    }
    for &(u, v) in &graph.edges {
        let (wu, wv) = (owners.owner_of(u), owners.owner_of(v));
        if wu == wv {
            subs[wu].internal_edges.push((u, v));
        } else {
            subs[wu].external_stubs.push(ExternalStub {
                local: u,
                remote: v,
                remote_worker: wv,
            });
            subs[wv].external_stubs.push(ExternalStub {
                local: v,
                remote: u,
                remote_worker: wu,
            });
        }
    }
    subs
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkewReport {
    /// Total-variation distance to the global label distribution; `None` for empty workers.
    pub per_worker: Vec<Option<f64>>,
    /// Mean over non-empty workers.
    pub mean: f64,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn label_skew(subgraphs: &[Subgraph], graph: &GlobalGraph) -> SkewReport {
    let global = graph.class_distribution();
    let per_worker: Vec<Option<f64>> = subgraphs
        .iter()
        .map(|s| {
            if s.local_nodes.is_empty() {
                None
            } else {
                let local = class_histogram(
                    s.local_nodes.iter().map(|&v| graph.labels[v]),
                    graph.num_classes,
                );
                Some(total_variation(&local, &global))
            }
        })
        .collect();
    let present: Vec<f64> = per_worker.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    SkewReport { per_worker, mean }
}

/// Loads a graph from a whitespace-separated edge list and a
/// `node_id,label,f0..f{d-1}` CSV. Lines starting with `#` in the edge list are skipped.
pub fn load_graph(edges_path: &Path, features_path: &Path) -> Result<GlobalGraph> {
    let feat_text = fs::read_to_string(features_path)?;
    let mut lines = feat_text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("feature file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "node_id" || cols[1] != "label" {
        return Err(Error::Parse(format!(
            "unexpected feature header `{header}`"
        )));
    }
    let d = cols.len() - 2;
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse(format!("expected column f{j}, found `{c}`")));
        }
    }
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse(format!(
                "feature line {}: expected {} fields, got {}",
                lineno + 2,
                d + 2,
                fields.len()
            )));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("feature line {}: {e}", lineno + 2)))
        };
        let id = parse_usize(fields[0])?;
        let label = parse_usize(fields[1])?;
        let f = fields[2..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("feature line {}: {e}", lineno + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, label, f));
    }
    let n = rows.len();
    let mut features = DMatrix::zeros(n, d);
    let mut labels = vec![usize::MAX; n];
    for (id, label, f) in rows {
        if id >= n || labels[id] != usize::MAX {
            return Err(Error::Parse(format!(
                "node ids must be a permutation of 0..{n}; bad id {id}"
            )));
        }
        labels[id] = label;
        for (j, x) in f.into_iter().enumerate() {
            features[(id, j)] = x;
        }
    }
    let num_classes = labels.iter().max().map_or(0, |&l| l + 1).max(2);

    let edge_text = fs::read_to_string(edges_path)?;
    let mut edges = Vec::new();
    for (lineno, line) in edge_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut next = || -> Result<usize> {
            it.next()
                .ok_or_else(|| Error::Parse(format!("edge line {}: missing endpoint", lineno + 1)))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("edge line {}: {e}", lineno + 1)))
        };
        let u = next()?;
        let v = next()?;
        edges.push((u, v));
    }
    GlobalGraph::from_parts(n, edges, features, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p_intra: f64, p_inter: f64, n: usize) -> SbmParams {
        SbmParams {
            num_nodes: n,
            num_classes: 2,
            p_intra,
            p_inter,
            feature_dim: 4,
            feature_margin: 1.0,
        }
    }

    #[test]
    fn degenerate_sbm_gives_two_triangles() {
        let g = generate_sbm(&small(1.0, 0.0, 6), 1).unwrap();
        assert_eq!(g.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(
            g.edges,
            vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
        );
    }

    #[test]
    fn sbm_is_deterministic_under_seed() {
        let p = SbmParams::default();
        assert_eq!(generate_sbm(&p, 9).unwrap(), generate_sbm(&p, 9).unwrap());
        assert_ne!(generate_sbm(&p, 9).unwrap(), generate_sbm(&p, 10).unwrap());
    }

    #[test]
    fn sbm_rejects_bad_probabilities() {
        assert!(generate_sbm(&small(0.1, 0.2, 10), 0).is_err());
        assert!(generate_sbm(&small(1.5, 0.2, 10), 0).is_err());
        assert!(generate_sbm(&small(0.5, 0.2, 0), 0).is_err());
        let mut p = small(0.5, 0.1, 10);
        p.num_classes = 1;
        assert!(generate_sbm(&p, 0).is_err());
    }

    #[test]
    fn single_worker_owns_everything() {
        let g = generate_sbm(&SbmParams::default(), 3).unwrap();
        let spec = PartitionSpec {
            num_workers: 1,
            alpha: 0.5,
            seed: 1,
        };
        let owners = dirichlet_partition(&g, &spec).unwrap();
        assert!(owners.owner.iter().all(|&w| w == 0));
        let subs = build_subgraphs(&g, &owners);
        assert!(subs[0].external_stubs.is_empty());
        assert_eq!(subs[0].internal_edges.len(), g.edges.len());
    }

    #[test]
    fn single_cross_edge_yields_symmetric_stubs() {
        let g = GlobalGraph::from_parts(2, [(0, 1)], DMatrix::zeros(2, 1), vec![0, 1], 2).unwrap();
        let owners = OwnerMap::new(2, vec![0, 1]).unwrap();
        let subs = build_subgraphs(&g, &owners);
        assert_eq!(
            subs[0].external_stubs,
            vec![ExternalStub {
                local: 0,
                remote: 1,
                remote_worker: 1
            }]
        );
        assert_eq!(
            subs[1].external_stubs,
            vec![ExternalStub {
                local: 1,
                remote: 0,
                remote_worker: 0
            }]
        );
    }

    #[test]
    fn tv_of_single_class_worker_against_uniform_four() {
        let p = [1.0, 0.0, 0.0, 0.0];
        let q = [0.25; 4];
        assert!((total_variation(&p, &q) - 0.75).abs() < 1e-15);
        assert_eq!(total_variation(&q, &q), 0.0);
    }

    #[test]
    fn from_parts_rejects_out_of_range_label() {
        let r = GlobalGraph::from_parts(2, [], DMatrix::zeros(2, 1), vec![0, 3], 2);
        assert!(r.is_err());
    }

    #[test]
    fn per_worker_split_is_disjoint_and_sized() {
        let mut g = generate_sbm(&SbmParams::default(), 5).unwrap();
        let owners = dirichlet_partition(
            &g,
            &PartitionSpec {
                num_workers: 4,
                alpha: 1.0,
                seed: 2,
            },
        )
        .unwrap();
        g.split_per_worker(&owners, 0.2, &mut seeded(11));
        for v in 0..g.num_nodes {
            assert!(g.train_mask[v] ^ g.test_mask[v]);
        }
        for s in build_subgraphs(&g, &owners) {
            let expected = (0.2 * s.local_nodes.len() as f64).round() as usize;
            assert_eq!(s.test_nodes.len(), expected);
        }
    }
}
