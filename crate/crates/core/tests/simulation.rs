use std::collections::BTreeSet;

use dfgl_core::consensus::Topology;
use dfgl_core::gcn::{Hyperparams, ModelParams};
use dfgl_core::graphdata::{build_subgraphs, generate_sbm, OwnerMap, SbmParams};
use dfgl_core::orchestrator::output::{write_metrics, write_outputs, METRICS_HEADER};
use dfgl_core::orchestrator::{evaluate, trace_is_synchronous, Simulation, TraceEvent};
use dfgl_core::rng::seeded;
use dfgl_core::worker::{local_training, PeerSnapshot, PrivacyMode, WorkerState};
use dfgl_core::{run, SimConfig};

fn quick(policy: &str, rounds: usize, seed: u64) -> SimConfig {
    let mut c = SimConfig {
        rounds,
        seed,
        policy: policy.parse().unwrap(),
        ..SimConfig::default()
    };
    c.graph.num_nodes = 160;
    c.partition.num_workers = 4;
    c
}

fn metrics_bytes(cfg: SimConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics(&run(cfg).unwrap(), &mut buf).unwrap();
    buf
}

#[test]
fn one_round_without_training_lands_on_the_initial_mean() {
    let mut cfg = quick("complete", 1, 3);
    cfg.local_iters = 0;
    let mut sim = Simulation::new(cfg).unwrap();
    let init: Vec<Vec<f64>> = sim.workers.iter().map(|w| w.params.flatten()).collect();
    let m = init.len() as f64;
    let mean: Vec<f64> = (0..init[0].len())
        .map(|k| init.iter().map(|p| p[k]).sum::<f64>() / m)
        .collect();
    sim.step(1).unwrap();
    for w in &sim.workers {
        for (a, b) in w.params.flatten().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn parallel_and_sequential_training_agree_bitwise() {
    let mut seq = quick("kreg:2@0.5", 4, 5);
    seq.parallel = false;
    let mut par = seq.clone();
    par.parallel = true;
    assert_eq!(metrics_bytes(seq), metrics_bytes(par));
}

#[test]
fn learned_policy_runs_are_reproducible() {
    let mut cfg = quick("ddpg", 6, 2);
    cfg.agent.loss_threshold = Some(1.0);
    cfg.agent.hidden = vec![16, 16];
    assert_eq!(metrics_bytes(cfg.clone()), metrics_bytes(cfg));
}

#[test]
fn rounds_follow_the_synchronous_order() {
    let out = run(quick("ring@0.5", 3, 1)).unwrap();
    assert!(trace_is_synchronous(&out.trace, 4));
    // Per round: configure, every worker finishes, aggregate, evaluate.
    let r1: Vec<&TraceEvent> = out
        .trace
        .iter()
        .filter(|e| match e {
            TraceEvent::Configured { round }
            | TraceEvent::TrainingFinished { round, .. }
            | TraceEvent::Aggregated { round }
            | TraceEvent::Evaluated { round } => *round == 2,
        })
        .collect();
    assert!(matches!(r1.first(), Some(TraceEvent::Configured { .. })));
    assert!(matches!(r1.last(), Some(TraceEvent::Evaluated { .. })));
    assert_eq!(r1.len(), 4 + 3);
    let bad = [
        TraceEvent::Aggregated { round: 1 },
        TraceEvent::TrainingFinished {
            round: 1,
            worker: 0,
        },
    ];
    assert!(!trace_is_synchronous(&bad, 1));
}

#[test]
fn early_stop_and_row_count() {
    let mut cfg = quick("complete", 10, 1);
    cfg.target_accuracy = Some(0.0);
    let out = run(cfg).unwrap();
    assert_eq!(out.summary.rounds_executed, 1);
    assert!(out.summary.stopped_early);
    assert_eq!(out.metrics.len(), 1);

    let out = run(quick("ring", 7, 1)).unwrap();
    assert_eq!(out.metrics.len(), 7);
    assert!(!out.summary.stopped_early);
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 7);
    let traffic = std::fs::read_to_string(dir.path().join("traffic.csv")).unwrap();
    assert!(traffic.starts_with("round,src,dst,embed_bits,model_bits"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap())
            .unwrap();
    assert_eq!(json["seeds"]["master"], 1);
    assert_eq!(json["summary"]["rounds_executed"], 7);
}

#[test]
fn cumulative_metrics_never_decrease() {
    let out = run(quick("random:0.4@0.6", 8, 4)).unwrap();
    for w in out.metrics.windows(2) {
        assert!(w[1].cum_time_s >= w[0].cum_time_s);
        assert!(w[1].cum_embed_mb >= w[0].cum_embed_mb);
        assert!(w[1].cum_model_mb >= w[0].cum_model_mb);
    }
    assert!(out.summary.ledger_conserved);
}

#[test]
fn only_layer_one_embeddings_cross_workers() {
    let out = run(quick("complete", 5, 6)).unwrap();
    assert!(!out.transfers.is_empty());
    assert!(out.transfers.iter().all(|t| t.level == 1 && t.src != t.dst));
    assert!(out.summary.privacy_audit_passed);

    let mut open = quick("complete", 2, 6);
    open.allow_raw_feature_exchange = true;
    let out = run(open).unwrap();
    assert!(out.transfers.iter().any(|t| t.level == 0));
    assert!(!out.summary.privacy_audit_passed);
}

#[test]
fn embedding_traffic_follows_the_topology() {
    let ring = Topology::ring(4);
    let out = run(quick("ring", 3, 7)).unwrap();
    assert!(out.transfers.iter().all(|t| ring.has_edge(t.src, t.dst)));
    for r in &out.ledger.rounds {
        assert!(r.sent.keys().all(|&(a, b)| ring.has_edge(a, b)));
    }
    // The complete run carries chord traffic that the ring forbids.
    let out = run(quick("complete", 3, 7)).unwrap();
    let chords: BTreeSet<(usize, usize)> = out
        .transfers
        .iter()
        .filter(|t| !ring.has_edge(t.src, t.dst))
        .map(|t| (t.src, t.dst))
        .collect();
    assert!(!chords.is_empty());
}

#[test]
fn untrained_models_score_near_chance() {
    let mut total = 0.0;
    let seeds = 10;
    for seed in 0..seeds {
        let sim = Simulation::new(quick("complete", 1, seed)).unwrap();
        let ev = evaluate(
            &sim.workers,
            &sim.graph,
            &sim.owners,
            &Topology::complete(4),
            PrivacyMode::Enforced,
        )
        .unwrap();
        assert!(ev.empty.is_empty());
        total += ev.mean;
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.25).abs() <= 0.08, "untrained accuracy {mean}");
}

fn single_worker(
    num_nodes: usize,
    margin: f64,
    seed: u64,
) -> (dfgl_core::graphdata::GlobalGraph, OwnerMap, WorkerState) {
    let params = SbmParams {
        num_nodes,
        feature_margin: margin,
        ..SbmParams::default()
    };
    let graph = generate_sbm(&params, seed).unwrap();
    let owners = OwnerMap::new(1, vec![0; num_nodes]).unwrap();
    let sub = build_subgraphs(&graph, &owners).remove(0);
    let mut rng = seeded(seed);
    let model =
        ModelParams::init(&[graph.feature_dim(), 16, 16], graph.num_classes, &mut rng).unwrap();
    let worker = WorkerState::new(sub, model, seeded(seed + 1), graph.num_classes);
    (graph, owners, worker)
}

#[test]
fn a_lone_worker_fits_separable_data() {
    let (graph, owners, mut w) = single_worker(200, 3.0, 1);
    let topo = Topology::empty(1);
    let hyper = Hyperparams::default();
    let peers: Vec<PeerSnapshot> = vec![w.snapshot()];
    local_training(
        &mut w,
        300,
        &graph,
        &owners,
        &peers,
        &topo,
        &hyper,
        PrivacyMode::Enforced,
        1,
    )
    .unwrap();
    let peers = vec![w.snapshot()];
    let train = w.subgraph.train_nodes.clone();
    let acc = w
        .evaluate_nodes(
            &train,
            &graph,
            &owners,
            &peers,
            &topo,
            PrivacyMode::Enforced,
        )
        .unwrap()
        .unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn a_tiny_subgraph_can_be_memorised() {
    let (graph, owners, mut w) = single_worker(24, 0.5, 2);
    let topo = Topology::empty(1);
    let hyper = Hyperparams {
        lr: 0.02,
        weight_decay: 0.0,
        ..Hyperparams::default()
    };
    let peers = vec![w.snapshot()];
    local_training(
        &mut w,
        1500,
        &graph,
        &owners,
        &peers,
        &topo,
        &hyper,
        PrivacyMode::Enforced,
        1,
    )
    .unwrap();
    let peers = vec![w.snapshot()];
    let train = w.subgraph.train_nodes.clone();
    let acc = w
        .evaluate_nodes(
            &train,
            &graph,
            &owners,
            &peers,
            &topo,
            PrivacyMode::Enforced,
        )
        .unwrap()
        .unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn small_steps_mostly_lower_the_loss() {
    // Full-batch, full-ratio steps see the same batch every iteration.
    let hyper = Hyperparams {
        lr: 1e-3,
        batch_size: 1000,
        ..Hyperparams::default()
    };
    let topo = Topology::empty(1);
    let (mut down, mut steps) = (0, 0);
    for seed in 0..20 {
        let (graph, owners, mut w) = single_worker(120, 1.0, seed);
        let peers = vec![w.snapshot()];
        let rep = local_training(
            &mut w,
            5,
            &graph,
            &owners,
            &peers,
            &topo,
            &hyper,
            PrivacyMode::Enforced,
            1,
        )
        .unwrap();
        for pair in rep.losses.windows(2) {
            steps += 1;
            if pair[1] <= pair[0] {
                down += 1;
            }
        }
    }
    assert!(
        down as f64 >= 0.8 * steps as f64,
        "{down} of {steps} steps non-increasing"
    );
}

#[test]
fn config_and_graph_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("edges.txt");
    let feats = dir.path().join("features.csv");
    std::fs::write(&edges, "# toy\n0 1\n1 2\n2 3\n3 4\n4 5\n5 0\n0 3\n").unwrap();
    let mut csv = String::from("node_id,label,f0,f1\n");
    for v in 0..6 {
        csv.push_str(&format!("{v},{},{}.0,{}.5\n", v % 2, v, v));
    }
    std::fs::write(&feats, csv).unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "rounds = 2\npolicy = \"complete@0.5\"\n[partition]\nnum_workers = 2\n[graph]\nedges_path = {:?}\nfeatures_path = {:?}\ntest_fraction = 0.3\n",
            edges, feats
        ),
    )
    .unwrap();
    let cfg = SimConfig::load(&cfg_path).unwrap();
    let sim = Simulation::new(cfg).unwrap();
    assert_eq!(sim.graph.num_nodes, 6);
    assert_eq!(sim.graph.edges.len(), 7);
    assert_eq!(sim.graph.num_classes, 2);
    assert_eq!(sim.run().unwrap().metrics.len(), 2);

    std::fs::write(&cfg_path, "rounds = 2\nmystery = 1\n").unwrap();
    assert!(SimConfig::load(&cfg_path).is_err());
}
