//! Fixed and heuristic configuration policies, selected by a short string such
//! as `complete@0.7`, `ring@0.1`, `kreg:4`, `random:0.3`, `dar` or `ddpg`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::Topology;
use crate::ddpg::{edge_pairs, repair_connectivity};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TopologyPolicy {
    Complete,
    Ring,
    KRegular(usize),
    /// Each pair is linked with this probability, then repaired to connectivity.
    Random(f64),
    /// Greedy farthest-next Hamiltonian cycle with consensus-scaled ratios.
    DistributionAwareRing,
    Ddpg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PolicySpec {
    pub topology: TopologyPolicy,
    /// Uniform ratio for fixed policies; ignored by `dar` and `ddpg`.
    pub ratio: f64,
}

impl PolicySpec {
    pub fn fixed(topology: TopologyPolicy, ratio: f64) -> Self {
        Self { topology, ratio }
    }

    pub fn is_learned(&self) -> bool {
        self.topology == TopologyPolicy::Ddpg
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, ratio) = match s.split_once('@') {
            Some((n, r)) => {
                let r: f64 = r
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad ratio in policy '{s}'")))?;
                (n, r)
            }
            None => (s, 1.0),
        };
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!(
                "policy ratio {ratio} outside (0, 1]"
            )));
        }
        let (kind, arg) = match name.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (name, None),
        };
        let topology = match (kind.trim().to_ascii_lowercase().as_str(), arg) {
            ("complete", None) => TopologyPolicy::Complete,
            ("ring", None) => TopologyPolicy::Ring,
            ("dar", None) => TopologyPolicy::DistributionAwareRing,
            ("ddpg", None) => TopologyPolicy::Ddpg,
            ("kreg", Some(k)) => TopologyPolicy::KRegular(
                k.parse()
                    .map_err(|_| Error::Parse(format!("bad degree in policy '{s}'")))?,
            ),
            ("random", Some(p)) => {
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad probability in policy '{s}'")))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!(
                        "edge probability {p} outside [0, 1]"
                    )));
                }
                TopologyPolicy::Random(p)
            }
            _ => return Err(Error::Parse(format!("unknown policy '{s}'"))),
        };
        Ok(Self { topology, ratio })
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.topology {
            TopologyPolicy::Complete => write!(f, "complete")?,
            TopologyPolicy::Ring => write!(f, "ring")?,
            TopologyPolicy::KRegular(k) => write!(f, "kreg:{k}")?,
            TopologyPolicy::Random(p) => write!(f, "random:{p}")?,
            TopologyPolicy::DistributionAwareRing => return write!(f, "dar"),
            TopologyPolicy::Ddpg => return write!(f, "ddpg"),
        }
        if self.ratio != 1.0 {
            write!(f, "@{}", self.ratio)?;
        }
        Ok(())
    }
}

/// A coordinated configuration: who talks to whom and how densely each worker samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub topology: Topology,
    pub ratios: Vec<f64>,
}

impl Configuration {
    pub fn mean_ratio(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len().max(1) as f64
    }
}

/// Checks the invariants every emitted configuration must satisfy.
pub fn validate_configuration(cfg: &Configuration, m: usize) -> Result<()> {
    if cfg.topology.num_workers() != m || cfg.ratios.len() != m {
        return Err(Error::shape(format!(
            "configuration is not sized for {m} workers"
        )));
    }
    cfg.topology.validate(true)?;
    if let Some(r) = cfg.ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::config(format!("sampling ratio {r} outside (0, 1]")));
    }
    Ok(())
}

/// Statistics from the previous round, for policies that react to them.
#[derive(Debug, Clone, Copy, Default)]
pub struct PolicyInputs<'a> {
    /// Exact pairwise parameter distances `C_ij`.
    pub pairwise: Option<&'a [Vec<f64>]>,
    /// Per-worker consensus distance `C_i`.
    pub consensus: Option<&'a [f64]>,
}

/// Greedy chain from worker 0, always stepping to the farthest unvisited worker
/// (ties to the lower index), closed into a cycle.
pub fn distribution_aware_ring(pairwise: &[Vec<f64>]) -> Result<Topology> {
    let m = pairwise.len();
    if m < 2 {
        return Ok(Topology::empty(m));
    }
    let mut order = vec![0usize];
    let mut visited = vec![false; m];
    visited[0] = true;
    while order.len() < m {
        let cur = *order.last().unwrap();
        let mut next: Option<usize> = None;
        for j in 0..m {
            if visited[j] {
                continue;
            }
            if next.is_none_or(|n| pairwise[cur][j] > pairwise[cur][n]) {
                next = Some(j);
            }
        }
        let j = next.unwrap();
        visited[j] = true;
        order.push(j);
    }
    let mut edges: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    if m > 2 {
        edges.push((order[m - 1], order[0]));
    }
    Topology::from_edges(m, edges)
}

/// `0.5 C_i / C` clipped to `[r_min, 1]`, or 0.5 everywhere before any divergence exists.
pub fn consensus_scaled_ratios(consensus: &[f64], r_min: f64) -> Vec<f64> {
    let mean = consensus.iter().sum::<f64>() / consensus.len().max(1) as f64;
    consensus
        .iter()
        .map(|&c| {
            if mean > 0.0 {
                (0.5 * c / mean).clamp(r_min, 1.0)
            } else {
                0.5_f64.max(r_min)
            }
        })
        .collect()
}

/// Configuration for round `round` from a non-learned policy.
pub fn propose(
    policy: &PolicySpec,
    m: usize,
    round: usize,
    inputs: PolicyInputs<'_>,
    seed: u64,
    r_min: f64,
) -> Result<Configuration> {
    let uniform = vec![policy.ratio; m];
    let cfg = match policy.topology {
        TopologyPolicy::Complete => Configuration {
            topology: Topology::complete(m),
            ratios: uniform,
        },
        TopologyPolicy::Ring => {
            if m < 2 {
                return Err(Error::config("a ring needs at least two workers"));
            }
            Configuration {
                topology: Topology::ring(m),
                ratios: uniform,
            }
        }
        TopologyPolicy::KRegular(k) => Configuration {
            topology: Topology::k_regular(m, k)?,
            ratios: uniform,
        },
        TopologyPolicy::Random(p) => {
            let mut rng = stream_rng(seed, Stream::Policy, round as u64);
            let pairs = edge_pairs(m);
            let scores: Vec<f64> = pairs.iter().map(|_| rng.random::<f64>()).collect();
            let mut topology = Topology::empty(m);
            for (&(i, j), &s) in pairs.iter().zip(&scores) {
                if s < p {
                    topology.set(i, j, true);
                }
            }
            repair_connectivity(&mut topology, &scores, |a, b| a < b);
            Configuration {
                topology,
                ratios: uniform,
            }
        }
        TopologyPolicy::DistributionAwareRing => {
            let zeros = vec![vec![0.0; m]; m];
            let topology = distribution_aware_ring(inputs.pairwise.unwrap_or(&zeros))?;
            let ratios = match inputs.consensus {
                Some(c) => consensus_scaled_ratios(c, r_min),
                None => vec![0.5_f64.max(r_min); m],
            };
            Configuration { topology, ratios }
        }
        TopologyPolicy::Ddpg => {
            return Err(Error::config(
                "the ddpg policy is driven by its controller, not by propose",
            ));
        }
    };
    validate_configuration(&cfg, m)?;
    Ok(cfg)
}
