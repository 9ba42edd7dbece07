mod common;

use ndarray::Array2;
use rand::Rng;

use common::{centralized_trajectory, rng};
use fedais::graph::{generate_sbm, partition_dirichlet, Graph, Partition, SbmParams, Split};
use fedais::model::ModelParams;
use fedais::orchestrator::{run_training, RunConfig, Strategy, SyncSource};

/// 50 nodes: clients 0 and 1 each own a 20-node training community, and
/// 10 test nodes form their own component. With `bridges` the two
/// communities are joined by that many edges.
fn paired_instance(bridges: usize, seed: u64) -> (Graph, Partition) {
    let mut r = rng(seed);
    let n = 50;
    let labels: Vec<usize> = (0..n).map(|v| (v / 5) % 2).collect();
    let features = Array2::from_shape_fn((n, 4), |(v, j)| {
        let mean = if j % 2 == labels[v] { 1.0 } else { -1.0 };
        mean + r.random_range(-1.5..1.5)
    });
    let mut edges = Vec::new();
    for (lo, hi) in [(0, 20), (20, 40), (40, 50)] {
        for u in lo..hi {
            for v in (u + 1)..hi {
                if r.random::<f64>() < 0.2 {
                    edges.push((u, v));
                }
            }
        }
    }
    for i in 0..bridges {
        edges.push((i, 20 + (i * 7) % 20));
    }
    let splits = (0..n).map(|v| if v < 40 { Split::Train } else { Split::Test }).collect();
    let g = Graph::new(features, labels, 2, &edges, splits).unwrap();
    let assignment = (0..n).map(|v| usize::from((20..40).contains(&v))).collect();
    let p = Partition::from_assignment(&g, assignment, 2).unwrap();
    (g, p)
}

fn paired_config(strategy: Strategy) -> RunConfig {
    RunConfig {
        num_clients: 2,
        clients_per_round: 2,
        rounds: 3,
        batches_per_round: 1,
        sample_ratio: 1.0,
        tau_override: Some(1),
        sync_source: SyncSource::Recompute,
        hidden_dims: vec![6],
        strategy,
        seed: 4,
        ..RunConfig::default()
    }
}

#[test]
fn historical_run_with_every_epoch_sync_tracks_exact_run() {
    let (g, p) = paired_instance(0, 1);
    let hist = run_training(&paired_config(Strategy::FedAis), &g, &p).unwrap();
    let exact = run_training(&paired_config(Strategy::FedAll), &g, &p).unwrap();
    assert_eq!(hist.trajectory.len(), 4);
    for (a, b) in hist.trajectory.iter().zip(&exact.trajectory) {
        assert!(a.distance(b) <= 1e-6, "distance {}", a.distance(b));
    }
}

#[test]
fn cross_edges_make_the_historical_gradient_differ() {
    // entries read from the table are constants in backprop, so once a batch
    // has out-of-batch neighbors the two runs separate
    let (g, p) = paired_instance(12, 1);
    assert!(!p.cross_edges().is_empty());
    let hist = run_training(&paired_config(Strategy::FedAis), &g, &p).unwrap();
    let exact = run_training(&paired_config(Strategy::FedAll), &g, &p).unwrap();
    assert!(hist.params.distance(&exact.params) > 1e-6);
}

#[test]
fn single_client_run_matches_centralized_training() {
    let g = generate_sbm(&SbmParams::new(60, 3, 0.1, 0.02, 6), 3).unwrap();
    let p = Partition::from_assignment(&g, vec![0; 60], 1).unwrap();
    for seed in 0..3 {
        let cfg = RunConfig {
            num_clients: 1,
            clients_per_round: 1,
            rounds: 5,
            hidden_dims: vec![8],
            strategy: Strategy::FedAll,
            seed,
            ..RunConfig::default()
        };
        let run = run_training(&cfg, &g, &p).unwrap();
        let reference = centralized_trajectory(&cfg, &g, &p);
        for (a, b) in run.trajectory.iter().zip(&reference) {
            assert!(a.distance(b) <= 1e-8);
        }
    }
}

#[test]
fn global_model_is_the_mean_of_client_models() {
    let g = generate_sbm(&SbmParams::new(90, 3, 0.1, 0.02, 6), 5).unwrap();
    let p = partition_dirichlet(&g, 4, 0.5, 5).unwrap();
    for strategy in Strategy::ALL {
        let cfg = RunConfig {
            num_clients: 4,
            clients_per_round: 3,
            rounds: 3,
            hidden_dims: vec![8],
            strategy,
            ..RunConfig::default()
        };
        let run = run_training(&cfg, &g, &p).unwrap();
        assert_eq!(run.last_client_models.len(), 3);
        let ids: Vec<usize> = run.last_client_models.iter().map(|(k, _)| *k).collect();
        assert_eq!(ids, cfg.select_clients(3));
        let models: Vec<ModelParams> = run.last_client_models.iter().map(|(_, m)| m.clone()).collect();
        let mut mean = ModelParams::zeros(&models[0].dims()).unwrap();
        for m in &models {
            mean.add_scaled(1.0 / 3.0, m);
        }
        assert!(mean.distance(&run.params) < 1e-12);
    }
}

#[test]
fn fixed_interval_strategies_move_the_same_bytes() {
    let g = generate_sbm(&SbmParams::new(90, 3, 0.1, 0.02, 6), 8).unwrap();
    let p = partition_dirichlet(&g, 3, 0.5, 8).unwrap();
    let base = RunConfig {
        num_clients: 3,
        clients_per_round: 3,
        rounds: 5,
        batches_per_round: 1,
        sample_ratio: 1.0,
        pns_tau: 2,
        tau_override: Some(2),
        hidden_dims: vec![8],
        ..RunConfig::default()
    };
    let pns = run_training(&RunConfig { strategy: Strategy::FedPns, ..base.clone() }, &g, &p).unwrap();
    let ais = run_training(&RunConfig { strategy: Strategy::FedAis, ..base }, &g, &p).unwrap();
    let bytes = |r: &fedais::orchestrator::RunOutput| r.records.iter().map(|x| x.comm_bytes).collect::<Vec<_>>();
    assert_eq!(bytes(&pns), bytes(&ais));
    assert!(pns.records.iter().skip(1).all(|r| r.tau == 2));
}

#[test]
fn adaptive_interval_follows_the_loss() {
    let g = generate_sbm(&SbmParams::new(120, 3, 0.1, 0.01, 8), 2).unwrap();
    let p = partition_dirichlet(&g, 3, 0.5, 2).unwrap();
    let cfg = RunConfig {
        num_clients: 3,
        clients_per_round: 3,
        rounds: 12,
        tau0: 6,
        hidden_dims: vec![8],
        strategy: Strategy::FedAis,
        adam: fedais::model::AdamConfig { lr: 0.01, ..Default::default() },
        ..RunConfig::default()
    };
    let run = run_training(&cfg, &g, &p).unwrap();
    let schedule = run.schedule.as_ref().unwrap();
    assert_eq!(run.records[0].tau, 6);
    for (rec, entry) in run.records.iter().skip(2).zip(schedule.history().iter().skip(1)) {
        let expect = fedais::schedule::practical_tau(entry.objective, schedule.f0(), 6).unwrap();
        assert_eq!(rec.tau, expect);
    }
    assert!(run.records.last().unwrap().tau < 6, "{:?}", schedule.history());
}
