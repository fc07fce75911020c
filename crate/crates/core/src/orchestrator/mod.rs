//! Synchronous round loop: configure, train locally, aggregate, measure, learn.

pub mod config;
pub mod output;

use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

use crate::consensus::{
    aggregate, consensus_estimate, consensus_exact, mixing_matrix, observe_pairwise,
    pairwise_distances, pairwise_estimate, update_cmax, Topology,
};
use crate::ddpg::{moving_avg_time, reward, AgentState, DdpgController, Transition};
use crate::error::Result;
use crate::gcn::ModelParams;
use crate::graphdata::{
    build_subgraphs, dirichlet_partition, generate_sbm, load_graph, GlobalGraph, OwnerMap,
    PartitionSpec,
};
use crate::netmodel::{
    comm_time, compute_time, sample_bandwidth, BandwidthState, TimingReport, TrafficLedger,
    BITS_PER_MEGABYTE,
};
use crate::policies::{propose, validate_configuration, Configuration, PolicyInputs};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::worker::{
    nominal_embedding_bits, privacy_audit, IterationReport, PeerSnapshot, PrivacyMode,
    TrainingReport, TransferRecord, WorkerState,
};

pub use config::SimConfig;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub t_round: f64,
    pub cum_time_s: f64,
    pub cum_embed_mb: f64,
    pub cum_model_mb: f64,
    pub mean_loss: f64,
    pub mean_acc: f64,
    pub c_exact: f64,
    pub c_est: f64,
    pub c_max: f64,
    pub edges: usize,
    pub mean_ratio: f64,
    pub reward: Option<f64>,
    pub per_worker_loss: Vec<f64>,
    pub per_worker_acc: Vec<Option<f64>>,
}

/// One row of `controller.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerRow {
    pub round: usize,
    pub reward: f64,
    pub td_mean: f64,
    pub critic_loss: f64,
    pub sigma: f64,
    pub edges: usize,
    pub mean_ratio: f64,
}

/// Ordering trace used to check the synchronous contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceEvent {
    Configured { round: usize },
    TrainingFinished { round: usize, worker: usize },
    Aggregated { round: usize },
    Evaluated { round: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub per_worker: Vec<Option<f64>>,
    /// Mean over workers that have test nodes.
    pub mean: f64,
    /// Workers without test nodes; their accuracy is undefined.
    pub empty: Vec<usize>,
}

/// Full-neighbourhood accuracy of every worker on its local test nodes.
pub fn evaluate(
    workers: &[WorkerState],
    graph: &GlobalGraph,
    owners: &OwnerMap,
    topology: &Topology,
    privacy: PrivacyMode,
) -> Result<Evaluation> {
    let peers: Vec<PeerSnapshot> = workers.iter().map(WorkerState::snapshot).collect();
    let per_worker = workers
        .iter()
        .map(|w| {
            w.evaluate_nodes(
                &w.subgraph.test_nodes,
                graph,
                owners,
                &peers,
                topology,
                privacy,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = per_worker.iter().flatten().copied().collect();
    let empty = (0..workers.len())
        .filter(|&i| per_worker[i].is_none())
        .collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(Evaluation {
        per_worker,
        mean,
        empty,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub rounds_executed: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub cum_time_s: f64,
    pub cum_embed_mb: f64,
    pub cum_model_mb: f64,
    pub stopped_early: bool,
    pub privacy_audit_passed: bool,
    pub ledger_conserved: bool,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: SimConfig,
    pub summary: RunSummary,
    pub metrics: Vec<RoundMetrics>,
    pub controller: Vec<ControllerRow>,
    pub ledger: TrafficLedger,
    pub transfers: Vec<TransferRecord>,
    pub trace: Vec<TraceEvent>,
    pub checkpoint: Option<serde_json::Value>,
}

impl RunOutcome {
    /// First round whose mean accuracy reaches `target`, with the cumulative traffic (MB) at that point.
    pub fn first_reaching(&self, target: f64) -> Option<(usize, f64)> {
        self.metrics
            .iter()
            .find(|r| r.mean_acc >= target)
            .map(|r| (r.round, r.cum_embed_mb + r.cum_model_mb))
    }
}

struct Learner {
    ctl: DdpgController,
    loss_threshold: f64,
    state: Vec<f64>,
    action: Vec<f64>,
    t_bar: Option<f64>,
}

struct RoundStats {
    pairwise: Vec<Vec<f64>>,
    per_worker_c: Vec<f64>,
}

/// Loaded data, workers and all mutable run state.
pub struct Simulation {
    pub config: SimConfig,
    pub graph: GlobalGraph,
    pub owners: OwnerMap,
    pub workers: Vec<WorkerState>,
    pub ledger: TrafficLedger,
    nominal: Vec<Vec<f64>>,
    speeds: Vec<f64>,
    privacy: PrivacyMode,
    learner: Option<Learner>,
    last: Option<RoundStats>,
    c_max: Option<f64>,
    cum_time: f64,
    metrics: Vec<RoundMetrics>,
    controller: Vec<ControllerRow>,
    transfers: Vec<TransferRecord>,
    trace: Vec<TraceEvent>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let m = config.partition.num_workers;
        let mut graph = match (&config.graph.edges_path, &config.graph.features_path) {
            (Some(e), Some(f)) => load_graph(e, f)?,
            _ => generate_sbm(&config.graph.sbm(), derive_seed(seed, Stream::Graph, 0))?,
        };
        let owners = dirichlet_partition(
            &graph,
            &PartitionSpec {
                num_workers: m,
                alpha: config.partition.alpha,
                seed: derive_seed(seed, Stream::Partition, 0),
            },
        )?;
        graph.split_per_worker(
            &owners,
            config.graph.test_fraction,
            &mut stream_rng(seed, Stream::Split, 0),
        );
        let subgraphs = build_subgraphs(&graph, &owners);

        let mut dims = vec![graph.feature_dim()];
        dims.extend(&config.model.hidden_dims);
        let workers = subgraphs
            .into_iter()
            .enumerate()
            .map(|(i, sub)| {
                let params = ModelParams::init(
                    &dims,
                    graph.num_classes,
                    &mut stream_rng(seed, Stream::ModelInit, i as u64),
                )?;
                Ok(WorkerState::new(
                    sub,
                    params,
                    stream_rng(seed, Stream::Training, i as u64),
                    graph.num_classes,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let nominal: Vec<Vec<f64>> = workers
            .iter()
            .map(|w| nominal_embedding_bits(&w.subgraph, m, &dims, config.local_iters))
            .collect();

        let learner = if config.policy.is_learned() {
            let ctl = DdpgController::new(m, config.agent.clone(), seed)?;
            Some(Learner {
                ctl,
                loss_threshold: config.agent.require_loss_threshold()?,
                state: Vec::new(),
                action: Vec::new(),
                t_bar: None,
            })
        } else {
            None
        };
        let privacy = if config.allow_raw_feature_exchange {
            PrivacyMode::Disabled
        } else {
            PrivacyMode::Enforced
        };
        let mut sim = Self {
            speeds: config.network.speeds(m),
            ledger: TrafficLedger::new(nominal.clone()),
            nominal,
            config,
            graph,
            owners,
            workers,
            privacy,
            learner,
            last: None,
            c_max: None,
            cum_time: 0.0,
            metrics: Vec::new(),
            controller: Vec::new(),
            transfers: Vec::new(),
            trace: Vec::new(),
        };
        if sim.learner.is_some() {
            let s0 = sim.initial_state()?;
            if let Some(l) = sim.learner.as_mut() {
                l.ctl.observe(&s0);
                l.state = s0;
            }
        }
        Ok(sim)
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    fn model_bits(&self) -> u64 {
        self.workers[0].params.size_bits()
    }

    /// Observation before any training: round-0 bandwidth, chance-level losses.
    fn initial_state(&self) -> Result<Vec<f64>> {
        let m = self.num_workers();
        let bw = sample_bandwidth(m, 0, self.config.seed, self.config.network.range());
        let losses: Vec<f64> = self.workers.iter().map(|w| w.local_loss).collect();
        Ok(AgentState::new(
            m,
            &bandwidth_vector(&bw),
            &vec![0.0; m],
            &vec![0.0; m * m],
            &vec![0.0; m * m],
            &losses,
        )?
        .values)
    }

    fn configure(&mut self, round: usize) -> Result<Configuration> {
        let m = self.num_workers();
        let cfg = if let Some(l) = &mut self.learner {
            let action = l.ctl.act(&l.state, true)?;
            l.action = action.raw.clone();
            Configuration {
                topology: action.topology,
                ratios: action.ratios,
            }
        } else {
            let inputs = PolicyInputs {
                pairwise: self.last.as_ref().map(|s| s.pairwise.as_slice()),
                consensus: self.last.as_ref().map(|s| s.per_worker_c.as_slice()),
            };
            propose(
                &self.config.policy,
                m,
                round,
                inputs,
                self.config.seed,
                self.config.agent.r_min,
            )?
        };
        validate_configuration(&cfg, m)?;
        for (i, w) in self.workers.iter_mut().enumerate() {
            w.configure(cfg.topology.neighbors(i), cfg.ratios[i])?;
        }
        Ok(cfg)
    }

    fn train(&mut self, round: usize, topology: &Topology) -> Result<Vec<TrainingReport>> {
        let m = self.num_workers();
        let mut reports = vec![TrainingReport::default(); m];
        let graph = &self.graph;
        let owners = &self.owners;
        let hyper = &self.config.model;
        let privacy = self.privacy;
        for _ in 0..self.config.local_iters {
            let peers: Vec<PeerSnapshot> = self.workers.iter().map(WorkerState::snapshot).collect();
            let step = |w: &mut WorkerState| {
                w.train_iteration(graph, owners, &peers, topology, hyper, privacy, round)
            };
            let results: Vec<Result<Option<IterationReport>>> = if self.config.parallel {
                self.workers.par_iter_mut().map(step).collect()
            } else {
                self.workers.iter_mut().map(step).collect()
            };
            for ((w, rep), res) in self.workers.iter_mut().zip(&mut reports).zip(results) {
                if let Some(it) = res? {
                    for t in &it.transfers {
                        self.ledger.record_send(t.src, t.dst, t.sent_bits, 0);
                        self.ledger.record_receive(t.src, t.dst, t.received_bits, 0);
                    }
                    self.transfers.extend(&it.transfers);
                    w.absorb(rep, it);
                }
            }
        }
        for (i, (w, rep)) in self.workers.iter_mut().zip(&reports).enumerate() {
            w.finish_round(rep);
            self.trace
                .push(TraceEvent::TrainingFinished { round, worker: i });
        }
        Ok(reports)
    }

    fn exchange_and_aggregate(&mut self, round: usize, topology: &Topology) -> Result<()> {
        let bits = self.model_bits();
        for (i, j) in topology.edges() {
            for (src, dst) in [(i, j), (j, i)] {
                self.ledger.record_send(src, dst, 0, bits);
                // The receiver counts what actually arrives: one value per parameter.
                let arrived =
                    self.workers[src].params.num_params() as u64 * crate::gcn::BITS_PER_VALUE;
                self.ledger.record_receive(src, dst, 0, arrived);
            }
        }
        let mixing = mixing_matrix(topology)?;
        let params: Vec<ModelParams> = self.workers.iter().map(|w| w.params.clone()).collect();
        for (w, p) in self
            .workers
            .iter_mut()
            .zip(aggregate(&params, &mixing, topology)?)
        {
            w.params = p;
        }
        self.trace.push(TraceEvent::Aggregated { round });
        Ok(())
    }

    fn timing(
        &self,
        cfg: &Configuration,
        bw: &BandwidthState,
        reports: &[TrainingReport],
    ) -> Result<TimingReport> {
        let model_bits = self.model_bits() as f64;
        let compute = reports
            .iter()
            .zip(&self.speeds)
            .map(|(r, &s)| compute_time(r.workload_rows, self.config.network.cost_per_row, s))
            .collect();
        let comm = (0..self.num_workers())
            .map(|i| {
                comm_time(
                    i,
                    &cfg.topology,
                    cfg.ratios[i],
                    &self.nominal[i],
                    model_bits,
                    bw,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TimingReport::new(compute, comm))
    }

    /// Executes round `round` (1-based) and returns its metrics.
    pub fn step(&mut self, round: usize) -> Result<RoundMetrics> {
        let m = self.num_workers();
        let cfg = self
            .configure(round)
            .map_err(|e| e.at(round, "configure"))?;
        self.trace.push(TraceEvent::Configured { round });
        let bw = sample_bandwidth(m, round, self.config.seed, self.config.network.range());
        self.ledger.begin_round(round);

        let reports = self
            .train(round, &cfg.topology)
            .map_err(|e| e.at(round, "local training"))?;

        let params: Vec<ModelParams> = self.workers.iter().map(|w| w.params.clone()).collect();
        let pairwise = pairwise_distances(&params).map_err(|e| e.at(round, "consensus"))?;
        let (per_worker_c, c_exact) = consensus_exact(&params);
        let observed = observe_pairwise(&pairwise, &cfg.topology, self.config.agent.observability);
        let c_est = consensus_estimate(&observed, &cfg.topology);

        self.exchange_and_aggregate(round, &cfg.topology)
            .map_err(|e| e.at(round, "aggregation"))?;
        let timing = self
            .timing(&cfg, &bw, &reports)
            .map_err(|e| e.at(round, "timing"))?;
        self.cum_time += timing.round;

        let eval = evaluate(
            &self.workers,
            &self.graph,
            &self.owners,
            &cfg.topology,
            self.privacy,
        )
        .map_err(|e| e.at(round, "evaluation"))?;
        self.trace.push(TraceEvent::Evaluated { round });

        let grad_norms: Vec<f64> = self.workers.iter().map(|w| w.last_grad_norm).collect();
        let c_max = match self.c_max {
            None => mean(&grad_norms),
            Some(prev) => update_cmax(prev, mean(&grad_norms), self.config.agent.beta),
        };
        self.c_max = Some(c_max);
        let losses: Vec<f64> = self.workers.iter().map(|w| w.local_loss).collect();
        let f_bar = mean(&losses);

        let reward_value = self
            .learn(round, &cfg, &bw, &timing, &observed, c_est, c_max, &losses)
            .map_err(|e| e.at(round, "controller"))?;

        let traffic = self.ledger.current_round().expect("round opened");
        debug!(
            "round {round}: embed {} bits, model {} bits",
            traffic.embed_bits(),
            traffic.model_bits()
        );
        let row = RoundMetrics {
            round,
            t_round: timing.round,
            cum_time_s: self.cum_time,
            cum_embed_mb: self.ledger.cumulative_embed_bits() as f64 / BITS_PER_MEGABYTE,
            cum_model_mb: self.ledger.cumulative_model_bits() as f64 / BITS_PER_MEGABYTE,
            mean_loss: f_bar,
            mean_acc: eval.mean,
            c_exact,
            c_est,
            c_max,
            edges: cfg.topology.num_edges(),
            mean_ratio: cfg.mean_ratio(),
            reward: reward_value,
            per_worker_loss: losses,
            per_worker_acc: eval.per_worker,
        };
        info!(
            "round {round}: t={:.3}s acc={:.4} loss={:.4} edges={} ratio={:.3}",
            row.t_round, row.mean_acc, row.mean_loss, row.edges, row.mean_ratio
        );
        self.last = Some(RoundStats {
            pairwise,
            per_worker_c,
        });
        self.metrics.push(row.clone());
        Ok(row)
    }

    #[allow(clippy::too_many_arguments)]
    fn learn(
        &mut self,
        round: usize,
        cfg: &Configuration,
        bw: &BandwidthState,
        timing: &TimingReport,
        observed: &[Vec<Option<f64>>],
        c_est: f64,
        c_max: f64,
        losses: &[f64],
    ) -> Result<Option<f64>> {
        let Some(l) = &mut self.learner else {
            return Ok(None);
        };
        let m = losses.len();
        let traffic = self.ledger.current_round().expect("round opened");
        let mut embed = vec![0.0; m * m];
        for (&(src, dst), bits) in &traffic.sent {
            embed[src * m + dst] = bits.embed as f64;
        }
        let mut dist = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                dist[i * m + j] = observed[i][j]
                    .or_else(|| pairwise_estimate(observed, i, j))
                    .unwrap_or(0.0);
            }
        }
        let next = AgentState::new(
            m,
            &bandwidth_vector(bw),
            &timing.total,
            &embed,
            &dist,
            losses,
        )?
        .values;
        let t_bar_prev = l.t_bar.unwrap_or(timing.round);
        let u = reward(
            timing.round,
            t_bar_prev,
            c_est,
            c_max,
            mean(losses),
            l.loss_threshold,
            &l.ctl.config,
        )?;
        l.t_bar = Some(moving_avg_time(
            timing.round,
            t_bar_prev,
            l.ctl.config.upsilon,
        ));
        l.ctl.observe(&next);
        l.ctl.store(Transition {
            state: std::mem::take(&mut l.state),
            action: std::mem::take(&mut l.action),
            reward: u,
            next_state: next.clone(),
        });
        let diag = l.ctl.train()?;
        l.state = next;
        self.controller.push(ControllerRow {
            round,
            reward: u,
            td_mean: diag.td_mean,
            critic_loss: diag.critic_loss,
            sigma: l.ctl.sigma,
            edges: cfg.topology.num_edges(),
            mean_ratio: cfg.mean_ratio(),
        });
        Ok(Some(u))
    }

    /// Runs up to `rounds` rounds, stopping early once the target accuracy is met.
    pub fn run(mut self) -> Result<RunOutcome> {
        let start = Instant::now();
        let mut stopped_early = false;
        for round in 1..=self.config.rounds {
            let row = self.step(round)?;
            if self
                .config
                .target_accuracy
                .is_some_and(|t| row.mean_acc >= t)
            {
                stopped_early = round < self.config.rounds;
                break;
            }
        }
        let last = self.metrics.last().expect("at least one round");
        let summary = RunSummary {
            rounds_executed: self.metrics.len(),
            final_accuracy: last.mean_acc,
            best_accuracy: self.metrics.iter().map(|r| r.mean_acc).fold(0.0, f64::max),
            cum_time_s: last.cum_time_s,
            cum_embed_mb: last.cum_embed_mb,
            cum_model_mb: last.cum_model_mb,
            stopped_early,
            privacy_audit_passed: privacy_audit(&self.transfers),
            ledger_conserved: self.ledger.conservation_violation().is_none(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        let checkpoint = self
            .learner
            .as_ref()
            .map(|l| l.ctl.checkpoint())
            .transpose()?;
        Ok(RunOutcome {
            config: self.config,
            summary,
            metrics: self.metrics,
            controller: self.controller,
            ledger: self.ledger,
            transfers: self.transfers,
            trace: self.trace,
            checkpoint,
        })
    }
}

fn bandwidth_vector(bw: &BandwidthState) -> Vec<f64> {
    bw.workers
        .iter()
        .flat_map(|w| [w.inbound, w.outbound])
        .collect()
}

/// Builds and runs a simulation in one call.
pub fn run(config: SimConfig) -> Result<RunOutcome> {
    Simulation::new(config)?.run()
}

/// True iff no aggregation event precedes the end of that round's training on every worker.
pub fn trace_is_synchronous(trace: &[TraceEvent], num_workers: usize) -> bool {
    let mut finished: Vec<(usize, usize)> = Vec::new();
    for ev in trace {
        match *ev {
            TraceEvent::TrainingFinished { round, worker } => finished.push((round, worker)),
            TraceEvent::Aggregated { round } => {
                let done = finished.iter().filter(|(r, _)| *r == round).count();
                if done != num_workers {
                    return false;
                }
            }
            _ => {}
        }
    }
    true
}
