//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedais::graph::{Graph, Partition, Split};
use fedais::model::{adam_step, forward_exact, loss_and_grad, ModelParams, OptimizerState, StepContext};
use fedais::orchestrator::RunConfig;
use fedais::sampler::{batch_size, weighted_sample};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random graph with `n` nodes, edge probability `p`, Gaussian features and
/// uniform labels. Every node is a training node.
pub fn random_graph(n: usize, d0: usize, classes: usize, p: f64, seed: u64) -> Graph {
    let mut r = rng(seed);
    let features = Array2::from_shape_fn((n, d0), |_| r.random_range(-1.0..1.0));
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if r.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(features, labels, classes, &edges, vec![Split::Train; n]).unwrap()
}

/// Parameters with every scalar (biases included) uniform in `[-s, s]`.
pub fn random_params(dims: &[usize], s: f64, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(dims).unwrap();
    let mut r = rng(seed);
    for x in p.scalars_mut() {
        *x = r.random_range(-s..s);
    }
    p
}

/// Row-normalized adjacency: `A[v][w] = 1/deg(v)` for each neighbor `w`.
pub fn mean_adjacency(g: &Graph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut a = Array2::zeros((n, n));
    for v in 0..n {
        let nbrs = g.neighbors(v);
        for &w in nbrs {
            a[[v, w]] = 1.0 / nbrs.len() as f64;
        }
    }
    a
}

/// Dense full-graph forward pass: `H_l = act(H_{l-1} Ws + A H_{l-1} Wn + b)`
/// with ReLU on hidden layers. Returns `[H_0, .., H_L]`.
pub fn dense_forward(g: &Graph, params: &ModelParams) -> Vec<Array2<f64>> {
    let a = mean_adjacency(g);
    let mut hs = vec![g.features().clone()];
    let num_layers = params.num_layers();
    for (l, layer) in params.layers().iter().enumerate() {
        let h = hs.last().unwrap();
        let mut z = h.dot(&layer.w_self) + a.dot(h).dot(&layer.w_neigh);
        z += &layer.bias;
        if l + 1 < num_layers {
            z.mapv_inplace(|x| x.max(0.0));
        }
        hs.push(z);
    }
    hs
}

/// Mean softmax cross-entropy of `nodes` computed from dense logits.
pub fn dense_loss(g: &Graph, params: &ModelParams, nodes: &[usize]) -> f64 {
    let logits = dense_forward(g, params).pop().unwrap();
    nodes
        .iter()
        .map(|&v| {
            let row = logits.row(v);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - row[g.labels()[v]]
        })
        .sum::<f64>()
        / nodes.len() as f64
}

/// Central finite-difference gradient of `f` at `params`, flattened.
pub fn finite_difference(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let n = params.num_scalars();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = params.clone();
        let mut minus = params.clone();
        *plus.scalars_mut().nth(i).unwrap() += h;
        *minus.scalars_mut().nth(i).unwrap() -= h;
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Golden-section search for the minimizer of a unimodal `f` on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs()) {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Single-machine minibatch training with the same batch and neighbor
/// streams a one-client exact-forward run uses. Returns the parameters
/// after each round, starting with the initialization.
pub fn centralized_trajectory(cfg: &RunConfig, g: &Graph, partition: &Partition) -> Vec<ModelParams> {
    let nodes = partition.train_nodes(0).to_vec();
    let mut params = ModelParams::init(&cfg.dims(g), cfg.init_seed()).unwrap();
    let mut opt = OptimizerState::new(&params, cfg.adam);
    let size = batch_size(nodes.len(), 1.0, cfg.batches_per_round);
    let uniform = vec![1.0 / nodes.len() as f64; nodes.len()];
    let mut out = vec![params.clone()];
    for round in 1..=cfg.rounds {
        for epoch in 0..cfg.local_epochs {
            let batch = weighted_sample(&nodes, &uniform, size, cfg.batch_seed(0, round, epoch)).unwrap();
            let fwd = forward_exact(g, &params, &batch, &cfg.neighbor_sampler(round, epoch)).unwrap();
            let (_, grad) = loss_and_grad(&fwd, g.labels(), &params, StepContext::default()).unwrap();
            adam_step(&mut params, &grad, &mut opt).unwrap();
        }
        out.push(params.clone());
    }
    out
}
