use dfgl_core::ddpg::replay::ReplayBuffer;
use dfgl_core::graphdata::{
    build_subgraphs, dirichlet_partition, generate_sbm, label_skew, ExternalStub, PartitionSpec,
    SbmParams, Subgraph,
};
use dfgl_core::netmodel::{sample_bandwidth, BandwidthRange};
use dfgl_core::rng::seeded;
use dfgl_core::worker::{graph_sampling, LocalView, PrivacyMode};

#[test]
fn sbm_intra_density_tracks_p_intra() {
    let params = SbmParams {
        num_nodes: 200,
        p_intra: 0.1,
        p_inter: 0.01,
        ..SbmParams::default()
    };
    let mut total = 0.0;
    for seed in 0..20 {
        let g = generate_sbm(&params, seed).unwrap();
        let intra = g
            .edges
            .iter()
            .filter(|&&(u, v)| g.labels[u] == g.labels[v])
            .count();
        let mut sizes = vec![0usize; g.num_classes];
        for &l in &g.labels {
            sizes[l] += 1;
        }
        let pairs: usize = sizes.iter().map(|&s| s * (s - 1) / 2).sum();
        total += intra as f64 / pairs as f64;
    }
    let density = total / 20.0;
    assert!((density - 0.1).abs() <= 0.03, "intra density {density}");
}

#[test]
fn realized_ratio_concentrates_on_small_degrees() {
    // Batch nodes 0 (degree 4) and 5 (degree 2), all local.
    let sub = Subgraph {
        worker_id: 0,
        local_nodes: (0..8).collect(),
        internal_edges: vec![(0, 1), (0, 2), (0, 3), (0, 4), (5, 6), (5, 7)],
        external_stubs: Vec::<ExternalStub>::new(),
        train_nodes: vec![0, 5],
        test_nodes: Vec::new(),
    };
    let view = LocalView::from_subgraph(&sub);
    let mut rng = seeded(1);
    let trials = 10_000;
    let mut total = 0.0;
    for _ in 0..trials {
        let plan = graph_sampling(&[0, 5], 0.5, 1, &[], &view, PrivacyMode::Enforced, &mut rng);
        total += plan.realized_ratio().unwrap();
    }
    let mean = total / trials as f64;
    assert!((0.48..=0.52).contains(&mean), "mean realized ratio {mean}");
}

#[test]
fn bandwidth_draws_have_the_uniform_mean() {
    let bw = sample_bandwidth(5000, 1, 3, BandwidthRange::default());
    let draws: Vec<f64> = bw
        .workers
        .iter()
        .flat_map(|w| [w.inbound, w.outbound])
        .collect();
    assert_eq!(draws.len(), 10_000);
    assert!(draws.iter().all(|&b| (5.0..=20.0).contains(&b)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((12.2..=12.8).contains(&mean), "mean {mean}");
    assert_eq!(bw, sample_bandwidth(5000, 1, 3, BandwidthRange::default()));
}

#[test]
fn replay_sampling_passes_a_chi_square_test() {
    let mut buf = ReplayBuffer::new(100);
    for i in 0..100usize {
        buf.push(i);
    }
    let mut rng = seeded(8);
    let mut counts = [0usize; 100];
    for _ in 0..1000 {
        for &&i in &buf.sample(10, &mut rng).items {
            counts[i] += 1;
        }
    }
    let expected = 100.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99th percentile of chi-square with 99 degrees of freedom.
    assert!(chi2 < 134.642, "chi-square {chi2}");
}

#[test]
fn huge_alpha_matches_global_proportions() {
    let g = generate_sbm(&SbmParams::default(), 4).unwrap();
    let owners = dirichlet_partition(
        &g,
        &PartitionSpec {
            num_workers: 2,
            alpha: 1e6,
            seed: 4,
        },
    )
    .unwrap();
    let global = g.class_distribution();
    for s in build_subgraphs(&g, &owners) {
        let mut counts = vec![0.0; g.num_classes];
        for &v in &s.local_nodes {
            counts[g.labels[v]] += 1.0;
        }
        for (c, &p) in counts.iter().zip(&global) {
            let local = c / s.local_nodes.len() as f64;
            assert!(
                (local - p).abs() <= 0.05,
                "worker {} class share {local} vs {p}",
                s.worker_id
            );
        }
    }
}

#[test]
fn identical_worker_distributions_have_zero_skew() {
    // Two workers, each holding exactly one node of every class.
    let g = generate_sbm(
        &SbmParams {
            num_nodes: 8,
            ..SbmParams::default()
        },
        0,
    )
    .unwrap();
    let owner: Vec<usize> = (0..8).map(|v| v % 2).collect();
    let owners = dfgl_core::graphdata::OwnerMap::new(2, owner).unwrap();
    let skew = label_skew(&build_subgraphs(&g, &owners), &g);
    assert!(skew.mean.abs() < 1e-12);
}
