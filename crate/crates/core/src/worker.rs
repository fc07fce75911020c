//! Per-worker runtime: layer-wise neighbour sampling under topology and
//! privacy gating, embedding request/serve, local training and evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::Topology;
use crate::error::{Error, Result};
use crate::gcn::{
    self, adam_step, argmax_rows, ForwardInput, Hyperparams, LayerPlan, ModelParams,
    OptimizerState, BITS_PER_VALUE,
};
use crate::graphdata::{GlobalGraph, OwnerMap, Subgraph};
use crate::rng::SimRng;

/// Whether raw features may leave their owner. Only ever disabled to test the audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    /// Layer 1 aggregates local neighbours only; only `h^l, l >= 1` cross workers.
    #[default]
    Enforced,
    Disabled,
}

/// A worker's knowledge of the graph: its nodes and their (possibly remote) neighbours.
#[derive(Debug, Clone)]
pub struct LocalView {
    pub worker_id: usize,
    /// Local node -> sorted `(neighbour, owner)`.
    neighbors: HashMap<usize, Vec<(usize, usize)>>,
}

impl LocalView {
    pub fn from_subgraph(sub: &Subgraph) -> Self {
        let mut neighbors: HashMap<usize, Vec<(usize, usize)>> =
            sub.local_nodes.iter().map(|&v| (v, Vec::new())).collect();
        for &(u, v) in &sub.internal_edges {
            neighbors.entry(u).or_default().push((v, sub.worker_id));
            neighbors.entry(v).or_default().push((u, sub.worker_id));
        }
        for s in &sub.external_stubs {
            neighbors
                .entry(s.local)
                .or_default()
                .push((s.remote, s.remote_worker));
        }
        for list in neighbors.values_mut() {
            list.sort_unstable();
        }
        Self {
            worker_id: sub.worker_id,
            neighbors,
        }
    }

    pub fn owns(&self, v: usize) -> bool {
        self.neighbors.contains_key(&v)
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, usize)] {
        self.neighbors.get(&v).map_or(&[], Vec::as_slice)
    }
}

/// Top-down neighbour sampling result for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub num_layers: usize,
    /// Local nodes whose embedding is computed at level `l`, `l = 0..=L`.
    /// `computed[l]` is a prefix of `computed[l - 1]`; `computed[L]` is the batch.
    pub computed: Vec<Vec<usize>>,
    /// Remote nodes whose level-`l` embedding is fetched, `l = 0..L`, sorted.
    pub fetched: Vec<Vec<usize>>,
    /// `sampled[l - 1][k]` is `S^l(v)` for `v = computed[l][k]`.
    pub sampled: Vec<Vec<Vec<usize>>>,
    /// `|N_eff(v)|` in the same layout as `sampled`.
    pub effective: Vec<Vec<usize>>,
}

impl SamplingPlan {
    pub fn batch(&self) -> &[usize] {
        &self.computed[self.num_layers]
    }

    /// `V^l`: computed nodes plus every remote node carried down from above.
    pub fn node_set(&self, level: usize) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = self.computed[level].iter().copied().collect();
        for l in level..self.num_layers {
            s.extend(self.fetched[l].iter().copied());
        }
        s
    }

    /// `(|S(v)|, |N_eff(v)|)` for every expanded node with a non-empty effective neighbourhood.
    pub fn ratio_samples(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sampled
            .iter()
            .zip(&self.effective)
            .flat_map(|(layer, eff)| {
                layer
                    .iter()
                    .zip(eff)
                    .filter(|(_, &e)| e > 0)
                    .map(|(s, &e)| (s.len(), e))
            })
    }

    /// Mean of `|S(v)| / |N_eff(v)|` over expanded nodes.
    pub fn realized_ratio(&self) -> Option<f64> {
        let (sum, n) = self.ratio_samples().fold((0.0, 0usize), |(s, n), (k, e)| {
            (s + k as f64 / e as f64, n + 1)
        });
        (n > 0).then(|| sum / n as f64)
    }

    /// Aggregated rows, the compute-cost workload.
    pub fn workload_rows(&self) -> u64 {
        self.sampled
            .iter()
            .flat_map(|layer| layer.iter().map(|s| s.len() as u64 + 1))
            .sum()
    }
}

/// `max(1, floor(r n + U))` capped at `n`; unbiased for `r n >= 1`.
pub fn sample_size(ratio: f64, n: usize, rng: &mut SimRng) -> usize {
    if n == 0 {
        return 0;
    }
    if ratio >= 1.0 {
        return n;
    }
    let u: f64 = rng.random();
    ((ratio * n as f64 + u).floor() as usize).clamp(1, n)
}

/// Builds `V^L..V^0` and `S^L..S^1` top-down from the mini-batch.
///
/// `allowed_workers` are the topology neighbours; nodes of any other worker are
/// never sampled. Under [`PrivacyMode::Enforced`] layer 1 sees local neighbours only.
pub fn graph_sampling(
    batch: &[usize],
    ratio: f64,
    num_layers: usize,
    allowed_workers: &[usize],
    view: &LocalView,
    privacy: PrivacyMode,
    rng: &mut SimRng,
) -> SamplingPlan {
    let me = view.worker_id;
    let mut computed = vec![Vec::new(); num_layers + 1];
    let mut fetched = vec![Vec::new(); num_layers];
    let mut sampled = vec![Vec::new(); num_layers];
    let mut effective = vec![Vec::new(); num_layers];
    computed[num_layers] = batch.to_vec();

    for l in (1..=num_layers).rev() {
        let remote_ok = l >= 2 || privacy == PrivacyMode::Disabled;
        let mut below = computed[l].clone();
        let mut seen: BTreeSet<usize> = below.iter().copied().collect();
        let mut remote: BTreeSet<usize> = BTreeSet::new();
        let mut layer_samples = Vec::with_capacity(computed[l].len());
        let mut layer_eff = Vec::with_capacity(computed[l].len());
        for &v in &computed[l] {
            let eff: Vec<(usize, usize)> = view
                .neighbors(v)
                .iter()
                .copied()
                .filter(|&(_, w)| w == me || (remote_ok && allowed_workers.contains(&w)))
                .collect();
            let k = sample_size(ratio, eff.len(), rng);
            let mut picks: Vec<usize> = if k == eff.len() {
                (0..k).collect()
            } else {
                index::sample(rng, eff.len(), k).into_vec()
            };
            picks.sort_unstable();
            let chosen: Vec<usize> = picks.iter().map(|&p| eff[p].0).collect();
            for &p in &picks {
                let (u, w) = eff[p];
                if w == me {
                    if seen.insert(u) {
                        below.push(u);
                    }
                } else {
                    remote.insert(u);
                }
            }
            layer_eff.push(eff.len());
            layer_samples.push(chosen);
        }
        computed[l - 1] = below;
        fetched[l - 1] = remote.into_iter().collect();
        sampled[l - 1] = layer_samples;
        effective[l - 1] = layer_eff;
    }
    SamplingPlan {
        num_layers,
        computed,
        fetched,
        sampled,
        effective,
    }
}

/// A single embedding request: node `node`'s level-`level` embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub node: usize,
    pub level: usize,
}

/// Groups fetched nodes by owning worker, one batch per remote worker.
pub fn collect_requests(
    plan: &SamplingPlan,
    owners: &OwnerMap,
) -> BTreeMap<usize, Vec<EmbeddingRequest>> {
    let mut out: BTreeMap<usize, Vec<EmbeddingRequest>> = BTreeMap::new();
    for (level, nodes) in plan.fetched.iter().enumerate() {
        for &node in nodes {
            out.entry(owners.owner_of(node))
                .or_default()
                .push(EmbeddingRequest { node, level });
        }
    }
    out
}

/// Frozen view of a worker used to answer embedding requests.
#[derive(Debug, Clone)]
pub struct PeerSnapshot {
    pub worker_id: usize,
    pub params: ModelParams,
    pub view: Arc<LocalView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedEmbeddings {
    pub rows: Vec<(EmbeddingRequest, Vec<f64>)>,
    /// Bits the server booked for this response.
    pub bits: u64,
}

/// Full local-only forward for `targets` up to `level` layers.
fn local_embeddings(
    targets: &[usize],
    level: usize,
    params: &ModelParams,
    view: &LocalView,
    graph: &GlobalGraph,
) -> Result<DMatrix<f64>> {
    if level == 0 {
        return Ok(feature_rows(graph, targets));
    }
    // Ratio 1 never draws from the generator.
    let mut unused = crate::rng::seeded(0);
    let plan = graph_sampling(
        targets,
        1.0,
        level,
        &[],
        view,
        PrivacyMode::Enforced,
        &mut unused,
    );
    let input = build_input(&plan, graph, &HashMap::new())?;
    let (h, _, _) = gcn::forward_upto(params, &input, level)?;
    Ok(h)
}

/// Answers a neighbour's batch with embeddings computed from the server's current parameters.
pub fn serve_requests(
    server: &PeerSnapshot,
    requester: usize,
    requests: &[EmbeddingRequest],
    topology: &Topology,
    graph: &GlobalGraph,
) -> Result<ServedEmbeddings> {
    if requests.is_empty() {
        return Ok(ServedEmbeddings {
            rows: Vec::new(),
            bits: 0,
        });
    }
    if requester == server.worker_id || !topology.has_edge(server.worker_id, requester) {
        return Err(Error::protocol(format!(
            "worker {requester} is not a topology neighbour of {}",
            server.worker_id
        )));
    }
    let mut by_level: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in requests {
        if !server.view.owns(r.node) {
            return Err(Error::protocol(format!(
                "worker {} asked for node {} which {} does not own",
                requester, r.node, server.worker_id
            )));
        }
        by_level.entry(r.level).or_default().push(r.node);
    }
    let dims = server.params.dims();
    let mut rows = Vec::with_capacity(requests.len());
    let mut bits = 0;
    for (level, nodes) in by_level {
        if level >= dims.len() {
            return Err(Error::protocol(format!(
                "no level {level} in a {}-layer model",
                dims.len() - 1
            )));
        }
        let h = local_embeddings(&nodes, level, &server.params, &server.view, graph)?;
        for (k, &node) in nodes.iter().enumerate() {
            rows.push((
                EmbeddingRequest { node, level },
                h.row(k).iter().copied().collect(),
            ));
        }
        bits += nodes.len() as u64 * dims[level] as u64 * BITS_PER_VALUE;
    }
    Ok(ServedEmbeddings { rows, bits })
}

fn feature_rows(graph: &GlobalGraph, nodes: &[usize]) -> DMatrix<f64> {
    let d = graph.feature_dim();
    DMatrix::from_fn(nodes.len(), d, |i, j| graph.features[(nodes[i], j)])
}

/// Received embeddings keyed by `(node, level)`.
pub type Mailbox = HashMap<EmbeddingRequest, Vec<f64>>;

/// Translates a plan into table-row space for the model.
pub fn build_input(
    plan: &SamplingPlan,
    graph: &GlobalGraph,
    mailbox: &Mailbox,
) -> Result<ForwardInput> {
    let features = feature_rows(graph, &plan.computed[0]);
    let mut remote = Vec::with_capacity(plan.num_layers);
    let mut layers = Vec::with_capacity(plan.num_layers);
    for l in 1..=plan.num_layers {
        let below = &plan.computed[l - 1];
        let fetched = &plan.fetched[l - 1];
        let pos: HashMap<usize, usize> = below
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i))
            .chain(
                fetched
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v, below.len() + i)),
            )
            .collect();
        let width = fetched
            .first()
            .and_then(|&v| {
                mailbox.get(&EmbeddingRequest {
                    node: v,
                    level: l - 1,
                })
            })
            .map_or(0, Vec::len);
        let mut rm = DMatrix::zeros(fetched.len(), width);
        for (i, &v) in fetched.iter().enumerate() {
            let row = mailbox
                .get(&EmbeddingRequest {
                    node: v,
                    level: l - 1,
                })
                .ok_or_else(|| {
                    Error::protocol(format!("no embedding for node {v} at level {}", l - 1))
                })?;
            if row.len() != width {
                return Err(Error::shape("fetched embeddings differ in width"));
            }
            for (j, &x) in row.iter().enumerate() {
                rm[(i, j)] = x;
            }
        }
        remote.push(rm);
        let plan_l = LayerPlan {
            self_rows: (0..plan.computed[l].len()).collect(),
            neighbor_rows: plan.sampled[l - 1]
                .iter()
                .map(|s| s.iter().map(|u| pos[u]).collect())
                .collect(),
        };
        layers.push(plan_l);
    }
    Ok(ForwardInput {
        features,
        remote,
        layers,
    })
}

/// One cross-worker embedding transfer, booked from both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub round: usize,
    pub src: usize,
    pub dst: usize,
    pub level: usize,
    pub nodes: usize,
    pub sent_bits: u64,
    pub received_bits: u64,
}

/// True iff no raw (level-0) feature vector ever left its owner.
pub fn privacy_audit(log: &[TransferRecord]) -> bool {
    log.iter().all(|t| t.level >= 1 || t.nodes == 0)
}

/// Issues all requests of a plan against `peers` and fills a mailbox.
pub fn fetch_embeddings(
    me: usize,
    plan: &SamplingPlan,
    owners: &OwnerMap,
    peers: &[PeerSnapshot],
    topology: &Topology,
    graph: &GlobalGraph,
    round: usize,
) -> Result<(Mailbox, Vec<TransferRecord>)> {
    let mut mailbox = Mailbox::new();
    let mut log = Vec::new();
    for (server, reqs) in collect_requests(plan, owners) {
        let peer = peers
            .iter()
            .find(|p| p.worker_id == server)
            .ok_or_else(|| Error::protocol(format!("no snapshot for worker {server}")))?;
        let served = serve_requests(peer, me, &reqs, topology, graph)?;
        let mut per_level: BTreeMap<usize, (usize, u64)> = BTreeMap::new();
        let dims = peer.params.dims();
        for (req, row) in served.rows {
            let e = per_level.entry(req.level).or_default();
            e.0 += 1;
            e.1 += row.len() as u64 * BITS_PER_VALUE;
            mailbox.insert(req, row);
        }
        for (level, (nodes, received_bits)) in per_level {
            log.push(TransferRecord {
                round,
                src: server,
                dst: me,
                level,
                nodes,
                sent_bits: nodes as u64 * dims[level] as u64 * BITS_PER_VALUE,
                received_bits,
            });
        }
        debug_assert_eq!(
            served.bits,
            log.iter()
                .filter(|t| t.src == server && t.dst == me && t.round == round)
                .map(|t| t.sent_bits)
                .sum::<u64>()
        );
    }
    Ok((mailbox, log))
}

/// Mutable per-worker training state.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    pub subgraph: Subgraph,
    pub view: Arc<LocalView>,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub ratio: f64,
    pub neighbors: Vec<usize>,
    pub last_grad_norm: f64,
    pub local_loss: f64,
    pub rng: SimRng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub workload_rows: u64,
    pub transfers: Vec<TransferRecord>,
    pub ratio_sum: f64,
    pub ratio_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub workload_rows: u64,
    pub transfers: Vec<TransferRecord>,
}

impl WorkerState {
    pub fn new(subgraph: Subgraph, params: ModelParams, rng: SimRng, num_classes: usize) -> Self {
        let view = Arc::new(LocalView::from_subgraph(&subgraph));
        Self {
            id: subgraph.worker_id,
            optimizer: OptimizerState::for_params(&params),
            subgraph,
            view,
            params,
            ratio: 1.0,
            neighbors: Vec::new(),
            last_grad_norm: 0.0,
            local_loss: (num_classes as f64).ln(),
            rng,
        }
    }

    pub fn snapshot(&self) -> PeerSnapshot {
        PeerSnapshot {
            worker_id: self.id,
            params: self.params.clone(),
            view: Arc::clone(&self.view),
        }
    }

    /// Receives `N_i` and `r_i` for the coming round.
    pub fn configure(&mut self, neighbors: Vec<usize>, ratio: f64) -> Result<()> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config(format!(
                "sampling ratio {ratio} outside (0, 1]"
            )));
        }
        if neighbors.contains(&self.id) {
            return Err(Error::config(format!(
                "worker {} listed as its own neighbour",
                self.id
            )));
        }
        self.neighbors = neighbors;
        self.ratio = ratio;
        Ok(())
    }

    fn sample_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let train = &self.subgraph.train_nodes;
        if train.len() <= batch_size {
            let mut b = train.clone();
            b.shuffle(&mut self.rng);
            b
        } else {
            index::sample(&mut self.rng, train.len(), batch_size)
                .into_iter()
                .map(|i| train[i])
                .collect()
        }
    }

    /// Sample, fetch, forward, backward and one Adam step. `None` if the worker has no training nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn train_iteration(
        &mut self,
        graph: &GlobalGraph,
        owners: &OwnerMap,
        peers: &[PeerSnapshot],
        topology: &Topology,
        hyper: &Hyperparams,
        privacy: PrivacyMode,
        round: usize,
    ) -> Result<Option<IterationReport>> {
        if self.subgraph.train_nodes.is_empty() {
            return Ok(None);
        }
        let batch = self.sample_batch(hyper.batch_size);
        let neighbors = self.neighbors.clone();
        let plan = graph_sampling(
            &batch,
            self.ratio,
            self.params.num_layers(),
            &neighbors,
            &self.view,
            privacy,
            &mut self.rng,
        );
        let (mailbox, transfers) =
            fetch_embeddings(self.id, &plan, owners, peers, topology, graph, round)?;
        let input = build_input(&plan, graph, &mailbox)?;
        let labels: Vec<usize> = batch.iter().map(|&v| graph.labels[v]).collect();
        let (loss, acts) = gcn::forward(&self.params, &input, &labels)?;
        let grads = gcn::backward(&self.params, &acts, &labels);
        let grad_norm = grads.l2_norm();
        adam_step(&mut self.params, &grads, &mut self.optimizer, hyper)?;
        let (ratio_sum, ratio_count) = plan
            .ratio_samples()
            .fold((0.0, 0), |(s, n), (k, e)| (s + k as f64 / e as f64, n + 1));
        Ok(Some(IterationReport {
            loss,
            grad_norm,
            workload_rows: plan.workload_rows(),
            transfers,
            ratio_sum,
            ratio_count,
        }))
    }

    /// Folds one iteration into the running round report.
    pub fn absorb(&mut self, report: &mut TrainingReport, it: IterationReport) {
        report.losses.push(it.loss);
        report.grad_norms.push(it.grad_norm);
        report.workload_rows += it.workload_rows;
        report.transfers.extend(it.transfers);
    }

    /// Closes the round: `f_i` is the last loss, `||g_i||` the mean gradient norm.
    pub fn finish_round(&mut self, report: &TrainingReport) {
        if let Some(&l) = report.losses.last() {
            self.local_loss = l;
        }
        if !report.grad_norms.is_empty() {
            self.last_grad_norm =
                report.grad_norms.iter().sum::<f64>() / report.grad_norms.len() as f64;
        }
    }

    /// Full-neighbourhood prediction accuracy on `nodes`, fetching from reachable peers.
    pub fn evaluate_nodes(
        &self,
        nodes: &[usize],
        graph: &GlobalGraph,
        owners: &OwnerMap,
        peers: &[PeerSnapshot],
        topology: &Topology,
        privacy: PrivacyMode,
    ) -> Result<Option<f64>> {
        if nodes.is_empty() {
            return Ok(None);
        }
        let mut unused = crate::rng::seeded(0);
        let allowed = topology.neighbors(self.id);
        let plan = graph_sampling(
            nodes,
            1.0,
            self.params.num_layers(),
            &allowed,
            &self.view,
            privacy,
            &mut unused,
        );
        let (mailbox, _) = fetch_embeddings(self.id, &plan, owners, peers, topology, graph, 0)?;
        let input = build_input(&plan, graph, &mailbox)?;
        let (h, _, _) = gcn::forward_embeddings(&self.params, &input)?;
        let pred = argmax_rows(&gcn::predict(&h, &self.params));
        let correct = pred
            .iter()
            .zip(nodes)
            .filter(|(p, &v)| **p == graph.labels[v])
            .count();
        Ok(Some(correct as f64 / nodes.len() as f64))
    }
}

/// Runs `tau` iterations against a fixed set of peer snapshots.
#[allow(clippy::too_many_arguments)]
pub fn local_training(
    worker: &mut WorkerState,
    tau: usize,
    graph: &GlobalGraph,
    owners: &OwnerMap,
    peers: &[PeerSnapshot],
    topology: &Topology,
    hyper: &Hyperparams,
    privacy: PrivacyMode,
    round: usize,
) -> Result<TrainingReport> {
    let mut report = TrainingReport::default();
    for _ in 0..tau {
        if let Some(it) =
            worker.train_iteration(graph, owners, peers, topology, hyper, privacy, round)?
        {
            worker.absorb(&mut report, it);
        }
    }
    worker.finish_round(&report);
    Ok(report)
}

/// Unsampled per-round embedding volume worker `i` pulls from each worker `j`:
/// `tau * |remote nodes of j adjacent to i| * sum_{l=1}^{L-1} d_l * 32`.
pub fn nominal_embedding_bits(
    sub: &Subgraph,
    num_workers: usize,
    dims: &[usize],
    tau: usize,
) -> Vec<f64> {
    let mut remote: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_workers];
    for s in &sub.external_stubs {
        remote[s.remote_worker].insert(s.remote);
    }
    let num_layers = dims.len() - 1;
    let per_node: u64 = (1..num_layers).map(|l| dims[l] as u64).sum::<u64>() * BITS_PER_VALUE;
    remote
        .iter()
        .map(|set| (tau as u64 * set.len() as u64 * per_node) as f64)
        .collect()
}
