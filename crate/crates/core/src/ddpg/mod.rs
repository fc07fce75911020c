//! Actor-critic controller that maps the observed system state to a worker
//! topology and per-worker sampling ratios.

pub mod mlp;
pub mod replay;

use std::ops::Range;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::consensus::{Observability, Topology};
use crate::error::{Error, Result};
use crate::gcn::OptimizerState;
use crate::rng::{stream_rng, SimRng, Stream};

pub use mlp::{Mlp, OutputActivation};
pub use replay::{ReplayBuffer, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Discount `gamma`.
    pub gamma: f64,
    /// Target network coefficient `xi`.
    pub xi: f64,
    /// Reward weight on the time term.
    pub chi: f64,
    /// Reward weight on the consensus term.
    pub varrho: f64,
    /// Base of the loss term.
    pub phi: f64,
    /// Smoothing of the reference round time.
    pub upsilon: f64,
    /// Smoothing of `C_max`.
    pub beta: f64,
    /// Loss threshold in the reward. Required for the learned policy.
    pub loss_threshold: Option<f64>,
    pub noise_sigma: f64,
    pub noise_decay: f64,
    pub inner_updates: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    pub r_min: f64,
    pub observability: Observability,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            xi: 0.05,
            chi: 2.0,
            varrho: 1.0,
            phi: 10.0,
            upsilon: 0.5,
            beta: 0.5,
            loss_threshold: None,
            noise_sigma: 0.2,
            noise_decay: 0.995,
            inner_updates: 4,
            batch_size: 32,
            hidden: vec![128, 128],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            buffer_capacity: 10_000,
            r_min: 0.05,
            observability: Observability::AdjacentOnly,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(what.to_string()))
            }
        };
        check((0.0..1.0).contains(&self.gamma), "gamma must lie in [0, 1)")?;
        check(self.xi > 0.0 && self.xi <= 1.0, "xi must lie in (0, 1]")?;
        check(
            self.upsilon > 0.0 && self.upsilon < 1.0,
            "upsilon must lie in (0, 1)",
        )?;
        check((0.0..=1.0).contains(&self.beta), "beta must lie in [0, 1]")?;
        check(
            self.chi > 0.0 && self.varrho > 0.0 && self.phi > 0.0,
            "reward weights must be positive",
        )?;
        check(
            self.noise_sigma >= 0.0 && self.noise_decay > 0.0 && self.noise_decay <= 1.0,
            "bad noise schedule",
        )?;
        check(
            self.inner_updates > 0 && self.batch_size > 0,
            "inner_updates and batch_size must be positive",
        )?;
        check(self.buffer_capacity > 0, "buffer_capacity must be positive")?;
        check(
            !self.hidden.is_empty() && !self.hidden.contains(&0),
            "hidden widths must be positive",
        )?;
        check(
            self.actor_lr > 0.0 && self.critic_lr > 0.0,
            "learning rates must be positive",
        )?;
        check(
            self.r_min > 0.0 && self.r_min <= 1.0,
            "r_min must lie in (0, 1]",
        )?;
        if let Some(f) = self.loss_threshold {
            check(f.is_finite(), "loss_threshold must be finite")?;
        }
        Ok(())
    }

    pub fn require_loss_threshold(&self) -> Result<f64> {
        self.loss_threshold
            .ok_or_else(|| Error::config("agent.loss_threshold is required for the ddpg policy"))
    }
}

/// Observation groups, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateGroup {
    Bandwidth,
    Time,
    Traffic,
    Distance,
    Loss,
}

pub const STATE_GROUPS: [StateGroup; 5] = [
    StateGroup::Bandwidth,
    StateGroup::Time,
    StateGroup::Traffic,
    StateGroup::Distance,
    StateGroup::Loss,
];

/// Index ranges of each group for `m` workers: `2m + m + m^2 + m^2 + m`.
pub fn state_layout(m: usize) -> [Range<usize>; 5] {
    let sizes = [2 * m, m, m * m, m * m, m];
    let mut at = 0;
    sizes.map(|s| {
        let r = at..at + s;
        at += s;
        r
    })
}

pub fn state_dim(m: usize) -> usize {
    4 * m + 2 * m * m
}

pub fn action_dim(m: usize) -> usize {
    m * (m - 1) / 2 + m
}

/// Flattened observation. Raw values; normalization happens inside the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub m: usize,
    pub values: Vec<f64>,
}

impl AgentState {
    /// `bandwidth` is `[in_0, out_0, in_1, out_1, ..]`; matrices are row-major `m x m`.
    pub fn new(
        m: usize,
        bandwidth: &[f64],
        times: &[f64],
        traffic: &[f64],
        distances: &[f64],
        losses: &[f64],
    ) -> Result<Self> {
        let parts = [bandwidth, times, traffic, distances, losses];
        let layout = state_layout(m);
        for (p, r) in parts.iter().zip(&layout) {
            if p.len() != r.len() {
                return Err(Error::shape(format!(
                    "state group of length {} where {} expected",
                    p.len(),
                    r.len()
                )));
            }
        }
        let values: Vec<f64> = parts.concat();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("non-finite state entry"));
        }
        Ok(Self { m, values })
    }

    pub fn group(&self, g: StateGroup) -> &[f64] {
        let idx = STATE_GROUPS.iter().position(|&x| x == g).unwrap();
        &self.values[state_layout(self.m)[idx].clone()]
    }
}

/// Per-group running mean and variance (Welford), shared by every entry in a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    ranges: Vec<Range<usize>>,
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(ranges: Vec<Range<usize>>) -> Self {
        let g = ranges.len();
        Self {
            ranges,
            count: vec![0.0; g],
            mean: vec![0.0; g],
            m2: vec![0.0; g],
        }
    }

    pub fn for_state(m: usize) -> Self {
        Self::new(state_layout(m).to_vec())
    }

    pub fn update(&mut self, x: &[f64]) {
        for (g, r) in self.ranges.iter().enumerate() {
            for &v in &x[r.clone()] {
                self.count[g] += 1.0;
                let d = v - self.mean[g];
                self.mean[g] += d / self.count[g];
                self.m2[g] += d * (v - self.mean[g]);
            }
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for (g, r) in self.ranges.iter().enumerate() {
            let var = if self.count[g] > 1.0 {
                self.m2[g] / self.count[g]
            } else {
                0.0
            };
            let sd = var.sqrt().max(1e-6);
            for v in &mut out[r.clone()] {
                *v = ((*v - self.mean[g]) / sd).clamp(-10.0, 10.0);
            }
        }
        out
    }
}

/// Upper-triangle pair order `(0,1), (0,2), .., (m-2,m-1)`.
pub fn edge_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect()
}

/// Adds absent edges across components until connected, choosing the best score first.
/// `better(a, b)` is true when score `a` beats `b`; ties keep the earlier pair.
pub fn repair_connectivity(
    topology: &mut Topology,
    scores: &[f64],
    better: impl Fn(f64, f64) -> bool,
) {
    let pairs = edge_pairs(topology.num_workers());
    while !topology.is_connected() {
        let comp = topology.components();
        let mut best: Option<usize> = None;
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if comp[i] == comp[j] {
                continue;
            }
            if best.is_none_or(|b| better(scores[k], scores[b])) {
                best = Some(k);
            }
        }
        let (i, j) = pairs[best.expect("a disconnected graph has a crossing pair")];
        topology.set(i, j, true);
    }
}

/// A raw action together with the configuration it decodes to.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentAction {
    pub raw: Vec<f64>,
    pub topology: Topology,
    pub ratios: Vec<f64>,
}

/// Threshold edge scores at 0.5, repair connectivity, and map ratio scores to `[r_min, 1]`.
pub fn decode_action(raw: &[f64], m: usize, r_min: f64) -> Result<AgentAction> {
    if raw.len() != action_dim(m) {
        return Err(Error::shape(format!(
            "action of length {} for {} workers",
            raw.len(),
            m
        )));
    }
    let pairs = edge_pairs(m);
    let (edge_scores, ratio_scores) = raw.split_at(pairs.len());
    let mut topology = Topology::empty(m);
    for (&(i, j), &s) in pairs.iter().zip(edge_scores) {
        if s >= 0.5 {
            topology.set(i, j, true);
        }
    }
    repair_connectivity(&mut topology, edge_scores, |a, b| a > b);
    let ratios = ratio_scores
        .iter()
        .map(|&s| r_min + s.clamp(0.0, 1.0) * (1.0 - r_min))
        .collect();
    Ok(AgentAction {
        raw: raw.to_vec(),
        topology,
        ratios,
    })
}

/// `u = -chi (t / t_bar - 1) + varrho (C_max - C) + phi^(F - f_bar)`.
pub fn reward(
    t: f64,
    t_bar_prev: f64,
    c: f64,
    c_max: f64,
    f_bar: f64,
    loss_threshold: f64,
    cfg: &AgentConfig,
) -> Result<f64> {
    if !(t_bar_prev > 0.0) {
        return Err(Error::config(format!(
            "reference round time must be positive, got {t_bar_prev}"
        )));
    }
    Ok(-cfg.chi * (t / t_bar_prev - 1.0)
        + cfg.varrho * (c_max - c)
        + cfg.phi.powf(loss_threshold - f_bar))
}

/// `t_bar = upsilon t + (1 - upsilon) t_bar_prev`.
pub fn moving_avg_time(t: f64, t_bar_prev: f64, upsilon: f64) -> f64 {
    upsilon * t + (1.0 - upsilon) * t_bar_prev
}

/// Bellman target `u + gamma Q'`.
pub fn td_target(u: f64, gamma: f64, q_next: f64) -> f64 {
    u + gamma * q_next
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TrainDiagnostics {
    pub td_mean: f64,
    pub critic_loss: f64,
    pub short_batches: usize,
}

/// Online and target actor/critic, their optimizers, replay and normalization.
#[derive(Debug, Clone)]
pub struct DdpgController {
    pub config: AgentConfig,
    pub m: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    actor_opt: OptimizerState,
    critic_opt: OptimizerState,
    pub buffer: ReplayBuffer<Transition>,
    pub norm: RunningNorm,
    pub sigma: f64,
    noise_rng: SimRng,
    replay_rng: SimRng,
    pub updates: u64,
}

fn rows(vs: &[&[f64]]) -> DMatrix<f64> {
    let cols = vs.first().map_or(0, |v| v.len());
    DMatrix::from_fn(vs.len(), cols, |i, j| vs[i][j])
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

impl DdpgController {
    pub fn new(m: usize, config: AgentConfig, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("controller needs at least one worker"));
        }
        config.validate()?;
        Self::with_dims(
            m,
            state_dim(m),
            action_dim(m),
            RunningNorm::for_state(m),
            config,
            seed,
        )
    }

    /// Generic dimensions; `m` is still used to decode actions.
    pub fn with_dims(
        m: usize,
        s_dim: usize,
        a_dim: usize,
        norm: RunningNorm,
        config: AgentConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut init = stream_rng(seed, Stream::AgentInit, 0);
        let mut sizes = vec![s_dim];
        sizes.extend(&config.hidden);
        sizes.push(a_dim);
        let actor = Mlp::new(&sizes, OutputActivation::Sigmoid, 3e-3, &mut init)?;
        sizes[0] = s_dim + a_dim;
        *sizes.last_mut().unwrap() = 1;
        let critic = Mlp::new(&sizes, OutputActivation::Identity, 3e-3, &mut init)?;
        Ok(Self {
            m,
            actor_opt: OptimizerState::new(actor.num_params()),
            critic_opt: OptimizerState::new(critic.num_params()),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            norm,
            sigma: config.noise_sigma,
            noise_rng: stream_rng(seed, Stream::AgentNoise, 0),
            replay_rng: stream_rng(seed, Stream::AgentReplay, 0),
            updates: 0,
            config,
        })
    }

    /// Folds a freshly observed state into the normalization statistics.
    pub fn observe(&mut self, state: &[f64]) {
        self.norm.update(state);
    }

    /// `pi(s)`, optionally perturbed by Gaussian noise and clipped to `[0, 1]`.
    pub fn raw_action(&mut self, state: &[f64], explore: bool) -> Vec<f64> {
        let s = self.norm.normalize(state);
        let mut a: Vec<f64> = self.actor.forward(&rows(&[&s])).iter().copied().collect();
        if explore && self.sigma > 0.0 {
            let noise = Normal::new(0.0, self.sigma).expect("finite sigma");
            for v in &mut a {
                *v = (*v + noise.sample(&mut self.noise_rng)).clamp(0.0, 1.0);
            }
        }
        a
    }

    pub fn act(&mut self, state: &[f64], explore: bool) -> Result<AgentAction> {
        let raw = self.raw_action(state, explore);
        decode_action(&raw, self.m, self.config.r_min)
    }

    pub fn q_value(&self, state: &[f64], action: &[f64]) -> f64 {
        let s = self.norm.normalize(state);
        self.critic.forward(&hcat(&rows(&[&s]), &rows(&[action])))[(0, 0)]
    }

    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// `N` mini-batches of accumulated critic and actor gradients, one Adam step
    /// per network, then the target update and noise decay.
    pub fn train(&mut self) -> Result<TrainDiagnostics> {
        if self.buffer.is_empty() {
            return Ok(TrainDiagnostics::default());
        }
        let a_dim = self.actor.output_dim();
        let mut g_critic: Option<Mlp> = None;
        let mut g_actor: Option<Mlp> = None;
        let mut diag = TrainDiagnostics::default();
        let mut td_count = 0usize;
        for _ in 0..self.config.inner_updates {
            let sample = self
                .buffer
                .sample(self.config.batch_size, &mut self.replay_rng);
            diag.short_batches += usize::from(sample.short);
            let b = sample.items.len();
            let s: Vec<Vec<f64>> = sample
                .items
                .iter()
                .map(|t| self.norm.normalize(&t.state))
                .collect();
            let s2: Vec<Vec<f64>> = sample
                .items
                .iter()
                .map(|t| self.norm.normalize(&t.next_state))
                .collect();
            let s = rows(&s.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let s2 = rows(&s2.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let a = rows(
                &sample
                    .items
                    .iter()
                    .map(|t| t.action.as_slice())
                    .collect::<Vec<_>>(),
            );
            let u: Vec<f64> = sample.items.iter().map(|t| t.reward).collect();

            let a2 = self.target_actor.forward(&s2);
            let q2 = self.target_critic.forward(&hcat(&s2, &a2));
            let cache = self.critic.forward_cached(&hcat(&s, &a));
            let mut d_q = DMatrix::zeros(b, 1);
            for k in 0..b {
                let y = td_target(u[k], self.config.gamma, q2[(k, 0)]);
                let delta = y - cache.output[(k, 0)];
                diag.td_mean += delta;
                diag.critic_loss += 0.5 * delta * delta / b as f64;
                td_count += 1;
                // Descent on 0.5 delta^2 / |B|.
                d_q[(k, 0)] = -delta / b as f64;
            }
            let (gc, _) = self.critic.backward(&cache, &d_q);

            let actor_cache = self.actor.forward_cached(&s);
            let q_cache = self.critic.forward_cached(&hcat(&s, &actor_cache.output));
            let ascend = DMatrix::from_element(b, 1, -1.0 / b as f64);
            let (_, d_input) = self.critic.backward(&q_cache, &ascend);
            let d_action = d_input.columns(d_input.ncols() - a_dim, a_dim).into_owned();
            let (ga, _) = self.actor.backward(&actor_cache, &d_action);

            match (&mut g_critic, &mut g_actor) {
                (Some(c), Some(a)) => {
                    c.add_assign(&gc);
                    a.add_assign(&ga);
                }
                _ => {
                    g_critic = Some(gc);
                    g_actor = Some(ga);
                }
            }
        }
        let (gc, ga) = (g_critic.unwrap(), g_actor.unwrap());
        let mut theta = self.critic.flatten();
        self.critic_opt
            .step_flat(&mut theta, &gc.flatten(), self.config.critic_lr, 0.0);
        self.critic.set_flat(&theta)?;
        let mut theta = self.actor.flatten();
        self.actor_opt
            .step_flat(&mut theta, &ga.flatten(), self.config.actor_lr, 0.0);
        self.actor.set_flat(&theta)?;
        self.target_actor
            .soft_update_from(&self.actor, self.config.xi);
        self.target_critic
            .soft_update_from(&self.critic, self.config.xi);
        self.sigma *= self.config.noise_decay;
        self.updates += 1;
        diag.td_mean /= td_count.max(1) as f64;
        diag.critic_loss /= self.config.inner_updates as f64;
        Ok(diag)
    }

    /// Versioned JSON snapshot of networks and replay contents.
    pub fn checkpoint(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "version": 1,
            "num_workers": self.m,
            "updates": self.updates,
            "sigma": self.sigma,
            "config": serde_json::to_value(&self.config)?,
            "actor": serde_json::to_value(&self.actor)?,
            "critic": serde_json::to_value(&self.critic)?,
            "target_actor": serde_json::to_value(&self.target_actor)?,
            "target_critic": serde_json::to_value(&self.target_critic)?,
            "norm": serde_json::to_value(&self.norm)?,
            "buffer": self.buffer.iter().collect::<Vec<_>>(),
        }))
    }
}
