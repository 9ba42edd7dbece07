mod common;

use proptest::prelude::*;
use rand::Rng;

use common::rng;
use fedais::cost::CostLedger;
use fedais::embed::warm_start;
use fedais::graph::{generate_sbm, partition_dirichlet, SbmParams};
use fedais::model::ModelParams;
use fedais::orchestrator::{ClientState, LocalRun, RoundContext, RunConfig, Strategy};
use fedais::sampler::{batch_size, weighted_sample, SamplerKind, SamplerState};

#[test]
fn first_update_is_uniform_then_tracks_loss_changes() {
    let nodes = [4, 9, 12, 30];
    let mut s = SamplerState::new(SamplerKind::Importance, &nodes, 0.5).unwrap();
    s.update_probabilities(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.probabilities(), &[0.25; 4]);
    s.update_probabilities(&[1.5, 2.0, 2.0, 4.5]).unwrap();
    assert_eq!(s.deltas(), &[0.5, 0.0, 1.0, 0.5]);
    assert_eq!(s.probabilities(), &[0.25, 0.0, 0.5, 0.25]);
    s.update_probabilities(&[1.5, 2.0, 2.0, 4.5]).unwrap();
    assert_eq!(s.probabilities(), &[0.25; 4]);
}

#[test]
fn uniform_kind_ignores_losses() {
    let nodes: Vec<usize> = (0..5).collect();
    let mut s = SamplerState::new(SamplerKind::Uniform, &nodes, 1.0).unwrap();
    s.update_probabilities(&[0.0; 5]).unwrap();
    s.update_probabilities(&[1.0, 5.0, 0.0, 2.0, 9.0]).unwrap();
    assert_eq!(s.probabilities(), &[0.2; 5]);
}

#[test]
fn rejects_bad_inputs() {
    let nodes = [1, 2, 3];
    assert!(SamplerState::new(SamplerKind::Importance, &nodes, 0.0).is_err());
    assert!(SamplerState::new(SamplerKind::Importance, &nodes, 1.5).is_err());
    let mut s = SamplerState::new(SamplerKind::Importance, &nodes, 0.5).unwrap();
    assert!(s.update_probabilities(&[1.0, 2.0]).is_err());
    assert!(s.update_probabilities(&[1.0, f64::NAN, 0.0]).is_err());
    assert!(weighted_sample(&nodes, &[0.3, 0.3, 0.4], 0, 1).is_err());
    assert!(weighted_sample(&nodes, &[0.3, 0.3, 0.4], 4, 1).is_err());
}

#[test]
fn zero_weight_items_fill_the_remainder() {
    let items = [10, 20, 30, 40, 50];
    let weights = [0.0, 1.0, 0.0, 0.0, 0.0];
    for seed in 0..50 {
        let batch = weighted_sample(&items, &weights, 3, seed).unwrap();
        assert_eq!(batch.len(), 3);
        assert!(batch.contains(&20));
        assert!(batch.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn single_draw_frequencies_match_probabilities() {
    let items: Vec<usize> = (0..8).collect();
    let mut r = rng(2);
    let raw: Vec<f64> = (0..8).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let draws = 20_000;
    let mut counts = [0usize; 8];
    for seed in 0..draws {
        counts[weighted_sample(&items, &weights, 1, seed).unwrap()[0]] += 1;
    }
    for (c, p) in counts.iter().zip(&weights) {
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((*c as f64 / draws as f64 - p).abs() <= 4.0 * sigma);
    }
}

#[test]
fn refresh_cost_is_one_forward_pass_linear_in_client_size() {
    let g = generate_sbm(&SbmParams::new(150, 3, 0.08, 0.01, 6), 9).unwrap();
    let p = partition_dirichlet(&g, 4, 0.5, 9).unwrap();
    for hidden in [vec![8], vec![8, 8]] {
        let cfg = RunConfig { num_clients: 4, clients_per_round: 4, hidden_dims: hidden, ..RunConfig::default() };
        let params = ModelParams::init(&cfg.dims(&g), 3).unwrap();
        let tables = warm_start(&g, &params, &p, &mut CostLedger::default()).unwrap();
        for strategy in [Strategy::FedAis, Strategy::FedPns] {
            let ctx = RoundContext { graph: &g, partition: &p, config: &cfg, strategy, round: 2 };
            for k in (0..4).filter(|&k| p.n_train(k) > 0) {
                let mut state = ClientState::new(strategy, &cfg, p.train_nodes(k), &params).unwrap();
                let run = LocalRun::begin(&ctx, k, &params, 1, &mut state, Some(&tables[k]), CostLedger::default())
                    .unwrap();
                let (fwd, units) = match strategy {
                    Strategy::FedAis => (1, (p.n_train(k) * params.num_layers()) as u64),
                    _ => (0, 0),
                };
                assert_eq!(run.ledger.forward_passes(), fwd);
                assert_eq!(run.ledger.backward_passes(), 0);
                assert_eq!(run.ledger.comp_ops(), units);
                assert_eq!(run.ledger.comm_bytes(), 0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_are_scale_invariant(
        prev in prop::collection::vec(0.0f64..10.0, 2..30),
        noise in prop::collection::vec(-1.0f64..1.0, 30),
        scale in 0.01f64..100.0,
    ) {
        let n = prev.len();
        let nodes: Vec<usize> = (0..n).collect();
        let next: Vec<f64> = prev.iter().zip(&noise).map(|(a, b)| (a + b).abs()).collect();
        let mut a = SamplerState::new(SamplerKind::Importance, &nodes, 0.5).unwrap();
        let mut b = a.clone();
        a.update_probabilities(&prev).unwrap();
        a.update_probabilities(&next).unwrap();
        b.update_probabilities(&prev.iter().map(|x| x * scale).collect::<Vec<_>>()).unwrap();
        b.update_probabilities(&next.iter().map(|x| x * scale).collect::<Vec<_>>()).unwrap();
        prop_assert!((a.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_are_distinct_sorted_and_deterministic(
        weights in prop::collection::vec(0.0f64..1.0, 1..40),
        frac in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let items: Vec<usize> = (0..weights.len()).map(|i| 3 * i + 1).collect();
        let size = batch_size(items.len(), frac, 1);
        let a = weighted_sample(&items, &weights, size, seed).unwrap();
        prop_assert_eq!(&a, &weighted_sample(&items, &weights, size, seed).unwrap());
        prop_assert_eq!(a.len(), size);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().all(|v| items.contains(v)));
    }

    #[test]
    fn batch_size_stays_in_range(n in 1usize..10_000, ratio in 0.001f64..1.0, batches in 1usize..50) {
        let b = batch_size(n, ratio, batches);
        prop_assert!(b >= 1 && b <= n);
        prop_assert_eq!(b, ((n as f64 * ratio / batches as f64).ceil() as usize).clamp(1, n));
    }
}
