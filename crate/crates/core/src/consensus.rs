//! Worker topology, constant-weight mixing matrices and consensus distances.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{param_l2_distance, ModelParams};

/// Symmetric 0/1 worker adjacency with an empty diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    m: usize,
    adj: Vec<bool>,
}

impl Topology {
    pub fn empty(m: usize) -> Self {
        Self {
            m,
            adj: vec![false; m * m],
        }
    }

    pub fn from_edges(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut t = Self::empty(m);
        for (i, j) in edges {
            if i >= m || j >= m {
                return Err(Error::config(format!(
                    "edge ({i}, {j}) outside {m} workers"
                )));
            }
            if i == j {
                return Err(Error::config(format!("self-loop on worker {i}")));
            }
            t.set(i, j, true);
        }
        Ok(t)
    }

    pub fn complete(m: usize) -> Self {
        let mut t = Self::empty(m);
        for i in 0..m {
            for j in (i + 1)..m {
                t.set(i, j, true);
            }
        }
        t
    }

    pub fn ring(m: usize) -> Self {
        let mut t = Self::empty(m);
        if m >= 2 {
            for i in 0..m {
                t.set(i, (i + 1) % m, true);
            }
        }
        t
    }

    /// Circulant `k`-regular graph: offsets `1..=k/2`, plus the antipode when `k` is odd.
    pub fn k_regular(m: usize, k: usize) -> Result<Self> {
        if k >= m {
            return Err(Error::config(format!(
                "k-regular needs k < m, got k={k}, m={m}"
            )));
        }
        if k % 2 == 1 && m % 2 == 1 {
            return Err(Error::config(format!(
                "no {k}-regular graph on {m} workers"
            )));
        }
        let mut t = Self::empty(m);
        for i in 0..m {
            for off in 1..=(k / 2) {
                t.set(i, (i + off) % m, true);
            }
            if k % 2 == 1 {
                t.set(i, (i + m / 2) % m, true);
            }
        }
        Ok(t)
    }

    pub fn num_workers(&self) -> usize {
        self.m
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        debug_assert!(i != j || !on);
        self.adj[i * self.m + j] = on;
        self.adj[j * self.m + i] = on;
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.m).filter(|&j| self.has_edge(i, j)).count()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.m {
            for j in (i + 1)..self.m {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.edges().len()
    }

    /// Connected-component id per worker.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.m];
        let mut next = 0;
        for s in 0..self.m {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            let mut queue = VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for v in 0..self.m {
                    if self.has_edge(u, v) && comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }

    /// Checks symmetry, the empty diagonal and, optionally, connectivity.
    pub fn validate(&self, require_connected: bool) -> Result<()> {
        for i in 0..self.m {
            if self.has_edge(i, i) {
                return Err(Error::config(format!("self-loop on worker {i}")));
            }
            for j in 0..self.m {
                if self.has_edge(i, j) != self.has_edge(j, i) {
                    return Err(Error::config(format!("adjacency asymmetric at ({i}, {j})")));
                }
            }
        }
        if require_connected && !self.is_connected() {
            return Err(Error::Disconnected);
        }
        Ok(())
    }

    /// `L = D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else if self.has_edge(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }
}

/// Mixing weights `P_ij = alpha` on edges, with the spectrum they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    pub alpha: f64,
    /// Ascending Laplacian eigenvalues.
    pub eigenvalues: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl MixingMatrix {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i][j]
    }

    /// `I - alpha L`.
    pub fn averaging_operator(&self, topology: &Topology) -> DMatrix<f64> {
        DMatrix::identity(topology.m, topology.m) - topology.laplacian() * self.alpha
    }

    /// Contraction factor on the disagreement subspace.
    pub fn contraction(&self) -> f64 {
        match self.eigenvalues.len() {
            0 | 1 => 0.0,
            m => {
                let l2 = self.eigenvalues[1];
                let lm = self.eigenvalues[m - 1];
                (1.0 - self.alpha * l2)
                    .abs()
                    .max((1.0 - self.alpha * lm).abs())
            }
        }
    }
}

/// Laplacian spectrum in ascending order. Values within 1e-9 of an integer
/// are snapped to it, which keeps e.g. the 4-cycle weight at exactly 1/3.
pub fn laplacian_spectrum(topology: &Topology) -> Vec<f64> {
    if topology.m == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(topology.laplacian());
    let mut vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&x| {
            let r = x.round();
            if (x - r).abs() < 1e-9 {
                // `+ 0.0` folds a snapped -0.0 into 0.0.
                r + 0.0
            } else {
                x
            }
        })
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    vals
}

/// Fastest constant edge weight `2 / (lambda_2 + lambda_m)` for a connected topology.
pub fn mixing_matrix(topology: &Topology) -> Result<MixingMatrix> {
    topology.validate(false)?;
    let m = topology.m;
    if m == 0 {
        return Err(Error::config("topology has no workers"));
    }
    if !topology.is_connected() {
        return Err(Error::Disconnected);
    }
    let eigenvalues = laplacian_spectrum(topology);
    let alpha = if m == 1 {
        0.0
    } else {
        2.0 / (eigenvalues[1] + eigenvalues[m - 1])
    };
    let weights = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if topology.has_edge(i, j) { alpha } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(MixingMatrix {
        alpha,
        eigenvalues,
        weights,
    })
}

/// One synchronous gossip step over flat parameter vectors.
pub fn aggregate_flat(
    params: &[Vec<f64>],
    mixing: &MixingMatrix,
    topology: &Topology,
) -> Result<Vec<Vec<f64>>> {
    let m = topology.m;
    if params.len() != m || mixing.weights.len() != m {
        return Err(Error::shape(format!(
            "{} parameter sets, {} workers, mixing for {}",
            params.len(),
            m,
            mixing.weights.len()
        )));
    }
    let n = params.first().map_or(0, Vec::len);
    if params.iter().any(|p| p.len() != n) {
        return Err(Error::shape("parameter vectors differ in length"));
    }
    let mut out = params.to_vec();
    for i in 0..m {
        for j in topology.neighbors(i) {
            let w = mixing.weight(i, j);
            for ((o, &xi), &xj) in out[i].iter_mut().zip(&params[i]).zip(&params[j]) {
                *o += w * (xj - xi);
            }
        }
    }
    Ok(out)
}

pub fn aggregate(
    params: &[ModelParams],
    mixing: &MixingMatrix,
    topology: &Topology,
) -> Result<Vec<ModelParams>> {
    let flat: Vec<Vec<f64>> = params.iter().map(ModelParams::flatten).collect();
    let mixed = aggregate_flat(&flat, mixing, topology)?;
    params
        .iter()
        .zip(mixed)
        .map(|(p, v)| {
            let mut q = p.clone();
            q.set_flat(&v)?;
            Ok(q)
        })
        .collect()
}

/// Exact and estimated consensus statistics for one round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsensusStats {
    pub per_worker: Vec<f64>,
    pub global: f64,
    pub estimate: f64,
    pub c_max: f64,
    /// Pairwise distances the coordinator observed this round.
    pub pairwise: Vec<Vec<Option<f64>>>,
}

/// Distance of every worker to the parameter mean, and their average.
pub fn consensus_exact_flat(params: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let m = params.len();
    if m == 0 {
        return (Vec::new(), 0.0);
    }
    let n = params[0].len();
    let mut mean = vec![0.0; n];
    for p in params {
        for (a, x) in mean.iter_mut().zip(p) {
            *a += x;
        }
    }
    for a in &mut mean {
        *a /= m as f64;
    }
    let per: Vec<f64> = params
        .iter()
        .map(|p| {
            p.iter()
                .zip(&mean)
                .map(|(x, a)| (x - a) * (x - a))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let global = per.iter().sum::<f64>() / m as f64;
    (per, global)
}

pub fn consensus_exact(params: &[ModelParams]) -> (Vec<f64>, f64) {
    let flat: Vec<Vec<f64>> = params.iter().map(ModelParams::flatten).collect();
    consensus_exact_flat(&flat)
}

/// All pairwise parameter distances.
pub fn pairwise_distances(params: &[ModelParams]) -> Result<Vec<Vec<f64>>> {
    let m = params.len();
    let mut d = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let x = param_l2_distance(&params[i], &params[j])?;
            d[i][j] = x;
            d[j][i] = x;
        }
    }
    Ok(d)
}

/// Which pairwise distances reach the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Observability {
    /// Only pairs that exchanged models this round.
    #[default]
    AdjacentOnly,
    AllPairs,
}

pub fn observe_pairwise(
    full: &[Vec<f64>],
    topology: &Topology,
    mode: Observability,
) -> Vec<Vec<Option<f64>>> {
    let m = full.len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        Some(0.0)
                    } else if mode == Observability::AllPairs || topology.has_edge(i, j) {
                        Some(full[i][j])
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

/// Relay upper bound `min_q (C_iq + C_jq)` over observed relays `q`.
/// With fewer than three workers there is no relay and the direct distance is used.
pub fn pairwise_estimate(pairwise: &[Vec<Option<f64>>], i: usize, j: usize) -> Option<f64> {
    let m = pairwise.len();
    if i == j {
        return Some(0.0);
    }
    if m < 3 {
        return pairwise[i][j];
    }
    (0..m)
        .filter(|&q| q != i && q != j)
        .filter_map(|q| Some(pairwise[i][q]? + pairwise[j][q]?))
        .min_by(|a, b| a.partial_cmp(b).expect("finite distances"))
}

/// `(1/m^2) sum_{i != j} (1 - a_ij) C^_ij`, skipping pairs without an observed relay.
pub fn consensus_estimate(pairwise: &[Vec<Option<f64>>], topology: &Topology) -> f64 {
    let m = pairwise.len();
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j || topology.has_edge(i, j) {
                continue;
            }
            if let Some(est) = pairwise_estimate(pairwise, i, j) {
                total += est;
            }
        }
    }
    total / (m * m) as f64
}

/// Exponential moving average of the mean local gradient norm.
pub fn update_cmax(prev: f64, mean_grad_norm: f64, beta: f64) -> f64 {
    (1.0 - beta) * prev + beta * mean_grad_norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_weight_is_one_over_m() {
        for m in 2..9 {
            let mix = mixing_matrix(&Topology::complete(m)).unwrap();
            assert_eq!(mix.alpha, 1.0 / m as f64);
            assert_eq!(mix.eigenvalues[0], 0.0);
            assert!(mix.eigenvalues[1..].iter().all(|&x| x == m as f64));
        }
    }

    #[test]
    fn four_cycle_spectrum_and_weight() {
        let mix = mixing_matrix(&Topology::ring(4)).unwrap();
        assert_eq!(mix.eigenvalues, vec![0.0, 2.0, 2.0, 4.0]);
        assert_eq!(mix.alpha, 1.0 / 3.0);
    }

    #[test]
    fn single_edge_averages_pair_exactly() {
        let t = Topology::complete(2);
        let mix = mixing_matrix(&t).unwrap();
        assert_eq!(mix.eigenvalues, vec![0.0, 2.0]);
        assert_eq!(mix.alpha, 0.5);
        let out = aggregate_flat(&[vec![1.0, -2.0], vec![3.0, 4.0]], &mix, &t).unwrap();
        assert_eq!(out, vec![vec![2.0, 1.0], vec![2.0, 1.0]]);
    }

    #[test]
    fn disconnected_topology_is_rejected() {
        let t = Topology::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert!(matches!(mixing_matrix(&t), Err(Error::Disconnected)));
    }

    #[test]
    fn c4_static_values_converge_to_mean() {
        let t = Topology::ring(4);
        let mix = mixing_matrix(&t).unwrap();
        let mut p: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        for _ in 0..60 {
            p = aggregate_flat(&p, &mix, &t).unwrap();
        }
        for x in &p {
            assert!((x[0] - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_workers_are_a_fixed_point() {
        let t = Topology::ring(5);
        let mix = mixing_matrix(&t).unwrap();
        let p = vec![vec![0.25, -1.0]; 5];
        assert_eq!(aggregate_flat(&p, &mix, &t).unwrap(), p);
    }

    #[test]
    fn two_point_consensus_distance() {
        let (per, c) = consensus_exact_flat(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(per, vec![1.0, 1.0]);
        assert_eq!(c, 1.0);
    }

    #[test]
    fn relay_estimate_examples() {
        // Collinear scalars {0, 1, 5}.
        let full = vec![
            vec![0.0, 1.0, 5.0],
            vec![1.0, 0.0, 4.0],
            vec![5.0, 4.0, 0.0],
        ];
        let obs = observe_pairwise(&full, &Topology::complete(3), Observability::AllPairs);
        assert_eq!(pairwise_estimate(&obs, 0, 2), Some(5.0));

        // Two relays: (3, 4) and (2, 6).
        let mut obs = vec![vec![None; 4]; 4];
        for i in 0..4 {
            obs[i][i] = Some(0.0);
        }
        let mut put = |a: usize, b: usize, x: f64| {
            obs[a][b] = Some(x);
            obs[b][a] = Some(x);
        };
        put(0, 2, 3.0);
        put(1, 2, 4.0);
        put(0, 3, 2.0);
        put(1, 3, 6.0);
        assert_eq!(pairwise_estimate(&obs, 0, 1), Some(7.0));
    }

    #[test]
    fn estimate_falls_back_to_direct_below_three_workers() {
        let obs = vec![vec![Some(0.0), Some(2.5)], vec![Some(2.5), Some(0.0)]];
        assert_eq!(pairwise_estimate(&obs, 0, 1), Some(2.5));
    }

    #[test]
    fn cmax_examples() {
        assert_eq!(update_cmax(2.0, 4.0, 0.0), 2.0);
        assert_eq!(update_cmax(2.0, 4.0, 0.5), 3.0);
        assert_eq!(update_cmax(2.0, 4.0, 1.0), 4.0);
    }

    #[test]
    fn k_regular_shapes() {
        let t = Topology::k_regular(8, 3).unwrap();
        assert!((0..8).all(|i| t.degree(i) == 3));
        let t = Topology::k_regular(7, 4).unwrap();
        assert!((0..7).all(|i| t.degree(i) == 4));
        assert!(Topology::k_regular(5, 5).is_err());
        assert!(Topology::k_regular(7, 3).is_err());
    }
}
