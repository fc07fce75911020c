//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ddpg::AgentConfig;
use crate::error::{Error, Result};
use crate::gcn::Hyperparams;
use crate::graphdata::SbmParams;
use crate::netmodel::{default_speed_factors, BandwidthRange};
use crate::policies::PolicySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    pub feature_margin: f64,
    /// Held-out fraction inside each worker's node set.
    pub test_fraction: f64,
    /// Load a graph from disk instead of generating one. Both paths must be set.
    pub edges_path: Option<PathBuf>,
    pub features_path: Option<PathBuf>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let s = SbmParams::default();
        Self {
            num_nodes: s.num_nodes,
            num_classes: s.num_classes,
            p_intra: s.p_intra,
            p_inter: s.p_inter,
            feature_dim: s.feature_dim,
            feature_margin: s.feature_margin,
            test_fraction: 0.2,
            edges_path: None,
            features_path: None,
        }
    }
}

impl GraphConfig {
    pub fn sbm(&self) -> SbmParams {
        SbmParams {
            num_nodes: self.num_nodes,
            num_classes: self.num_classes,
            p_intra: self.p_intra,
            p_inter: self.p_inter,
            feature_dim: self.feature_dim,
            feature_margin: self.feature_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_workers: usize,
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_workers: 8,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub min_mbps: f64,
    pub max_mbps: f64,
    /// Simulated seconds per aggregated row on a speed-1 worker.
    pub cost_per_row: f64,
    /// One factor per worker; defaults to a repeating mix of device tiers.
    pub speed_factors: Option<Vec<f64>>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let r = BandwidthRange::default();
        Self {
            min_mbps: r.min_mbps,
            max_mbps: r.max_mbps,
            cost_per_row: 2e-5,
            speed_factors: None,
        }
    }
}

impl NetworkConfig {
    pub fn range(&self) -> BandwidthRange {
        BandwidthRange {
            min_mbps: self.min_mbps,
            max_mbps: self.max_mbps,
        }
    }

    pub fn speeds(&self, m: usize) -> Vec<f64> {
        self.speed_factors
            .clone()
            .unwrap_or_else(|| default_speed_factors(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Number of rounds `K`.
    pub rounds: usize,
    /// Local iterations per round `tau`.
    pub local_iters: usize,
    pub seed: u64,
    pub policy: PolicySpec,
    /// Stop at the first round whose mean test accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// Train workers on a thread pool; results are identical either way.
    pub parallel: bool,
    /// Lifts the layer-1 locality rule. Exists only to exercise the privacy audit.
    pub allow_raw_feature_exchange: bool,
    pub graph: GraphConfig,
    pub partition: PartitionConfig,
    pub model: Hyperparams,
    pub network: NetworkConfig,
    pub agent: AgentConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            local_iters: 5,
            seed: 1,
            policy: PolicySpec::fixed(crate::policies::TopologyPolicy::Complete, 1.0),
            target_accuracy: None,
            out_dir: None,
            parallel: true,
            allow_raw_feature_exchange: false,
            graph: GraphConfig::default(),
            partition: PartitionConfig::default(),
            model: Hyperparams::default(),
            network: NetworkConfig::default(),
            agent: AgentConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        let m = self.partition.num_workers;
        if m == 0 {
            return Err(Error::config("num_workers must be at least 1"));
        }
        if !(self.partition.alpha > 0.0) {
            return Err(Error::config("alpha must be positive"));
        }
        if !(0.0..1.0).contains(&self.graph.test_fraction) {
            return Err(Error::config("test_fraction must lie in [0, 1)"));
        }
        if self.graph.edges_path.is_some() != self.graph.features_path.is_some() {
            return Err(Error::config(
                "edges_path and features_path must be given together",
            ));
        }
        if self.graph.edges_path.is_none() {
            self.graph.sbm().validate()?;
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("target_accuracy must lie in [0, 1]"));
            }
        }
        self.model.validate()?;
        self.network.range().validate()?;
        if !(self.network.cost_per_row >= 0.0) {
            return Err(Error::config("cost_per_row must be nonnegative"));
        }
        let speeds = self.network.speeds(m);
        if speeds.len() != m || speeds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("need {m} positive speed factors")));
        }
        self.agent.validate()?;
        if self.policy.is_learned() {
            self.agent.require_loss_threshold()?;
        }
        Ok(())
    }
}
