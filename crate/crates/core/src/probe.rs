//! Diagnostics on small instances where exact quantities are computable.
//!
//! * Gradient-variance decomposition. For sampled per-client batches `B_k`:
//!   `g~` sums the historical-embedding batch gradients and `g_B` the
//!   gradients on the same batches with every table entry replaced by its
//!   exact value; `grad F` is `g_B` over every client's full training set.
//!   Reported are the means of `||g~ - g_B||` (embedding approximation),
//!   `||g_B - grad F||` (minibatch sampling) and `||g~ - grad F||`.
//!   Out-of-batch entries are constants in backpropagation, so `grad F`
//!   differs from the gradient of the exact recursive network; that gap is
//!   reported separately as the structural bias.
//! * Output-embedding error bound. With per-layer errors
//!   `eps_l = max ||h_bar_w^(l) - h_w^(l)||` over the historical entries read,
//!   `alpha_1` the activation Lipschitz constant and
//!   `alpha_2 = max_l (||W_self^l||_2 + ||W_neigh^l||_2)`, every batch node
//!   satisfies `||h~_v^(L) - h_v^(L)|| <= sum_{l=1}^{L-1} (alpha_1 alpha_2 |N(v)|)^{L-l} eps_l`.
//! * Gradient error bound `||g~_k - g_k|| <= lambda * max_v ||h~_v^(L) - h_v^(L)||`
//!   per client batch, with `lambda` estimated from independent probe pairs.
//! * The smoothness constant and minibatch noise used by the scheduler bound.
//!
//! Every pass uses the full neighborhood so that a synchronized table
//! reproduces the exact forward.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cost::CostLedger;
use crate::embed::{warm_start, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{cap_degree, generate_sbm, partition_dirichlet, Graph, Partition, SbmParams};
use crate::model::{
    adam_step, forward_exact, forward_full, forward_historical, loss_and_grad, AdamConfig,
    ForwardPass, Gradients, ModelParams, NeighborSampler, OptimizerState, StepContext,
};
use crate::rng::{derive_seed, rng_for, tag};
use crate::sampler::{batch_size, weighted_sample};
use crate::schedule::{
    best_integer_tau, error_bound, theoretical_tau, BoundInputs, DelayModel, ErrorBound,
};

const SAMPLER: NeighborSampler = NeighborSampler::FULL;

/// Batch sampling for the variance probe. `batch_ratio >= 1` uses every
/// training node of each client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub num_batches: usize,
    pub batch_ratio: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_batches: 10,
            batch_ratio: 0.5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn full_batch(seed: u64) -> Self {
        Self {
            num_batches: 10,
            batch_ratio: 1.0,
            seed,
        }
    }
}

fn check_instance(g: &Graph, partition: &Partition) -> Result<()> {
    if g.num_nodes() == 0 {
        return Err(Error::param("probe needs a nonempty graph"));
    }
    if partition.assignment().len() != g.num_nodes() {
        return Err(Error::param("partition does not match the graph"));
    }
    if (0..partition.num_clients()).all(|k| partition.n_train(k) == 0) {
        return Err(Error::param("probe needs at least one training node"));
    }
    Ok(())
}

fn check_tables(partition: &Partition, tables: &[EmbeddingTable]) -> Result<()> {
    if tables.len() != partition.num_clients() {
        return Err(Error::param(format!(
            "{} tables for {} clients",
            tables.len(),
            partition.num_clients()
        )));
    }
    Ok(())
}

fn active_clients(partition: &Partition) -> impl Iterator<Item = usize> + '_ {
    (0..partition.num_clients()).filter(|&k| partition.n_train(k) > 0)
}

fn probe_batch(partition: &Partition, client: usize, ratio: f64, sample: usize, seed: u64) -> Result<Vec<usize>> {
    let nodes = partition.train_nodes(client);
    if ratio >= 1.0 {
        return Ok(nodes.to_vec());
    }
    let size = batch_size(nodes.len(), ratio, 1);
    let uniform = vec![1.0; nodes.len()];
    let s = derive_seed(seed, &[tag::PROBE, sample as u64, client as u64]);
    weighted_sample(nodes, &uniform, size, s)
}

fn exact_gradient(g: &Graph, params: &ModelParams, nodes: &[usize]) -> Result<(f64, Gradients, ForwardPass)> {
    let fwd = forward_exact(g, params, nodes, &SAMPLER)?;
    let (loss, grad) = loss_and_grad(&fwd, g.labels(), params, StepContext::default())?;
    Ok((loss, grad, fwd))
}

fn historical_gradient(
    g: &Graph,
    params: &ModelParams,
    nodes: &[usize],
    table: &EmbeddingTable,
    partition: &Partition,
    client: usize,
) -> Result<(Gradients, ForwardPass)> {
    let (fwd, _) = forward_historical(g, params, nodes, table, partition, client, &SAMPLER)?;
    let (_, grad) = loss_and_grad(&fwd, g.labels(), params, StepContext::default())?;
    Ok((grad, fwd))
}

/// Largest row distance between the outputs of two passes over the same nodes.
fn max_output_error(a: &ForwardPass, b: &ForwardPass) -> f64 {
    let l = a.num_layers();
    a.targets()
        .iter()
        .map(|&v| {
            let x = a.embedding_of(l, v).expect("target row");
            let y = b.embedding_of(l, v).expect("same targets");
            x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

/// Objective `sum_k mean_{v in train_k} f(v)` and its exact gradient.
pub fn full_gradient(g: &Graph, params: &ModelParams, partition: &Partition) -> Result<(f64, Gradients)> {
    check_instance(g, partition)?;
    let mut total = ModelParams::zeros(&params.dims())?;
    let mut objective = 0.0;
    for k in active_clients(partition) {
        let (loss, grad, _) = exact_gradient(g, params, partition.train_nodes(k))?;
        objective += loss;
        total.add_scaled(1.0, &grad);
    }
    Ok((objective, total))
}

/// Tables holding the exact embeddings under `params`.
pub fn synchronized_tables(g: &Graph, params: &ModelParams, partition: &Partition) -> Result<Vec<EmbeddingTable>> {
    warm_start(g, params, partition, &mut CostLedger::default())
}

/// `sum_k` of the historical-structure gradient over each client's full
/// training set with synchronized tables.
pub fn reference_gradient(
    g: &Graph,
    params: &ModelParams,
    partition: &Partition,
    synced: &[EmbeddingTable],
) -> Result<Gradients> {
    check_instance(g, partition)?;
    check_tables(partition, synced)?;
    let mut total = ModelParams::zeros(&params.dims())?;
    for k in active_clients(partition) {
        let (grad, _) = historical_gradient(g, params, partition.train_nodes(k), &synced[k], partition, k)?;
        total.add_scaled(1.0, &grad);
    }
    Ok(total)
}

/// Gradient and output errors of one client batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchError {
    pub sample: usize,
    pub client: usize,
    pub grad_error: f64,
    pub output_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Mean `||g~ - g_B||`.
    pub approx: f64,
    /// Mean `||g_B - grad F||`.
    pub minibatch: f64,
    /// Mean `||g~ - grad F||`.
    pub total: f64,
    /// Mean `||g_B - grad F||^2`.
    pub minibatch_sq: f64,
    /// `||grad F - grad F_exact||`, with `grad F_exact` the gradient of the
    /// exact recursive network.
    pub structural_bias: f64,
    pub batches: usize,
    pub per_client: Vec<BatchError>,
}

impl VarianceReport {
    /// `total <= approx + minibatch` holds per sample, hence on average.
    pub fn triangle_holds(&self) -> bool {
        self.total <= self.approx + self.minibatch + 1e-12 * (1.0 + self.total)
    }
}

/// Historical vs exact minibatch gradients averaged over
/// `cfg.num_batches` sampled batches per client.
pub fn variance_decomposition(
    g: &Graph,
    params: &ModelParams,
    partition: &Partition,
    tables: &[EmbeddingTable],
    cfg: &ProbeConfig,
) -> Result<VarianceReport> {
    check_instance(g, partition)?;
    check_tables(partition, tables)?;
    if cfg.num_batches == 0 {
        return Err(Error::param("probe needs at least one batch"));
    }
    let synced = synchronized_tables(g, params, partition)?;
    let full = reference_gradient(g, params, partition, &synced)?;
    let (_, true_full) = full_gradient(g, params, partition)?;
    let mut report = VarianceReport {
        approx: 0.0,
        minibatch: 0.0,
        total: 0.0,
        minibatch_sq: 0.0,
        structural_bias: full.distance(&true_full),
        batches: cfg.num_batches,
        per_client: Vec::new(),
    };
    for s in 0..cfg.num_batches {
        let mut g_hist = ModelParams::zeros(&params.dims())?;
        let mut g_exact = ModelParams::zeros(&params.dims())?;
        for k in active_clients(partition) {
            let batch = probe_batch(partition, k, cfg.batch_ratio, s, cfg.seed)?;
            let (ge, fe) = historical_gradient(g, params, &batch, &synced[k], partition, k)?;
            let (gh, fh) = historical_gradient(g, params, &batch, &tables[k], partition, k)?;
            report.per_client.push(BatchError {
                sample: s,
                client: k,
                grad_error: gh.distance(&ge),
                output_error: max_output_error(&fh, &fe),
            });
            g_hist.add_scaled(1.0, &gh);
            g_exact.add_scaled(1.0, &ge);
        }
        let mb = g_exact.distance(&full);
        report.approx += g_hist.distance(&g_exact);
        report.minibatch += mb;
        report.minibatch_sq += mb * mb;
        report.total += g_hist.distance(&full);
    }
    let n = cfg.num_batches as f64;
    report.approx /= n;
    report.minibatch /= n;
    report.minibatch_sq /= n;
    report.total /= n;
    Ok(report)
}

/// Mean squared distance between synchronized-table minibatch gradients
/// and [`reference_gradient`].
pub fn estimate_zeta2(g: &Graph, params: &ModelParams, partition: &Partition, cfg: &ProbeConfig) -> Result<f64> {
    let synced = synchronized_tables(g, params, partition)?;
    Ok(variance_decomposition(g, params, partition, &synced, cfg)?.minibatch_sq)
}

fn gaussian_like(params: &ModelParams, scale: f64, rng: &mut impl Rng) -> ModelParams {
    let mut p = params.clone();
    for x in p.scalars_mut() {
        *x += scale * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

fn rms(params: &ModelParams) -> f64 {
    params.l2_norm() / (params.num_scalars().max(1) as f64).sqrt()
}

/// Adds `scale * rms(entry) * N(0, 1)` noise to every hidden-layer entry.
pub fn perturb_tables(tables: &mut [EmbeddingTable], scale: f64, seed: u64) -> Result<()> {
    for table in tables.iter_mut() {
        let mut rng = rng_for(seed, &[tag::PROBE, table.owner() as u64]);
        let entries: Vec<(usize, usize, Vec<f64>, crate::embed::Stamp)> = table
            .historical_entries()
            .map(|(v, l, e)| (v, l, e.vector.clone(), e.stamp))
            .collect();
        for (v, l, mut x, stamp) in entries {
            let r = (x.iter().map(|a| a * a).sum::<f64>() / x.len().max(1) as f64).sqrt();
            for a in x.iter_mut() {
                *a += scale * r.max(1e-3) * rng.sample::<f64, _>(StandardNormal);
            }
            table.push(v, l, &x, stamp)?;
        }
    }
    Ok(())
}

const PROBE_SCALES: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
const HALF_BATCH_DRAWS: usize = 8;
const MIX_SCALES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Largest observed `||g~_k - g_k|| / max_v ||h~_v^(L) - h_v^(L)||` over
/// probe tables built three ways, in rotation: warm starts under randomly
/// perturbed parameters, Gaussian noise on synchronized entries, and warm
/// starts under `theta + s (theta_r - theta)` for an unrelated random
/// initialization `theta_r`. Each probe is evaluated on a full batch and on
/// several half batches of every client.
pub fn estimate_gradient_lipschitz(
    g: &Graph,
    params: &ModelParams,
    partition: &Partition,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    check_instance(g, partition)?;
    let synced = synchronized_tables(g, params, partition)?;
    let mut lambda: f64 = 0.0;
    let mut ledger = CostLedger::default();
    for i in 0..probes {
        let scale = PROBE_SCALES[(i / 3) % PROBE_SCALES.len()];
        let probe_seed = derive_seed(seed, &[tag::PROBE, i as u64]);
        let tables = match i % 3 {
            0 => {
                let mut rng = rng_for(probe_seed, &[tag::INIT]);
                let shifted = gaussian_like(params, scale * rms(params), &mut rng);
                warm_start(g, &shifted, partition, &mut ledger)?
            }
            1 => {
                let mut t = warm_start(g, params, partition, &mut ledger)?;
                perturb_tables(&mut t, scale, probe_seed)?;
                t
            }
            _ => {
                let scale = MIX_SCALES[(i / 3) % MIX_SCALES.len()];
                let other = ModelParams::init(&params.dims(), derive_seed(probe_seed, &[tag::INIT]))?;
                let mut mixed = params.clone();
                mixed.scale(1.0 - scale);
                mixed.add_scaled(scale, &other);
                warm_start(g, &mixed, partition, &mut ledger)?
            }
        };
        for draw in 0..=HALF_BATCH_DRAWS {
            let ratio = if draw == 0 { 1.0 } else { 0.5 };
            for k in active_clients(partition) {
                let batch = probe_batch(partition, k, ratio, draw, probe_seed)?;
                let (ge, fe) = historical_gradient(g, params, &batch, &synced[k], partition, k)?;
                let (gh, fh) = historical_gradient(g, params, &batch, &tables[k], partition, k)?;
                let out = max_output_error(&fh, &fe);
                if out > 1e-12 {
                    lambda = lambda.max(gh.distance(&ge) / out);
                }
            }
        }
    }
    Ok(lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBoundRow {
    pub error: BatchError,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBoundCheck {
    pub lambda_hat: f64,
    pub rows: Vec<GradientBoundRow>,
}

impl GradientBoundCheck {
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max)
    }

    pub fn holds(&self) -> bool {
        self.max_ratio() <= 1.0
    }
}

fn ratio(measured: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        measured / bound
    } else if measured <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Checks `grad_error <= lambda_hat * output_error` for every client batch.
pub fn check_gradient_bound(samples: &[BatchError], lambda_hat: f64) -> GradientBoundCheck {
    let rows = samples
        .iter()
        .map(|&e| {
            let bound = lambda_hat * e.output_error;
            GradientBoundRow {
                error: e,
                bound,
                ratio: ratio(e.grad_error, bound),
            }
        })
        .collect();
    GradientBoundCheck { lambda_hat, rows }
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let m = DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied());
    m.singular_values().max()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzConstants {
    /// Activation constant: 1 for both ReLU and the identity.
    pub alpha1: f64,
    /// `max_l (||W_self^l||_2 + ||W_neigh^l||_2)`.
    pub alpha2: f64,
    /// `(||W_self^l||_2, ||W_neigh^l||_2)` per layer.
    pub layer_norms: Vec<(f64, f64)>,
}

pub fn lipschitz_constants(params: &ModelParams) -> LipschitzConstants {
    let layer_norms: Vec<(f64, f64)> = params
        .layers()
        .iter()
        .map(|l| (spectral_norm(&l.w_self), spectral_norm(&l.w_neigh)))
        .collect();
    let alpha2 = layer_norms.iter().map(|(a, b)| a + b).fold(0.0, f64::max);
    LipschitzConstants {
        alpha1: 1.0,
        alpha2,
        layer_norms,
    }
}

/// `sum_{l=1}^{L-1} (alpha1 alpha2 degree)^{L-l} eps[l]` with `L = eps.len()`.
pub fn output_error_bound(alpha1: f64, alpha2: f64, degree: usize, eps: &[f64]) -> f64 {
    let num_layers = eps.len();
    let a = alpha1 * alpha2 * degree as f64;
    (1..num_layers)
        .map(|l| a.powi((num_layers - l) as i32) * eps[l])
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBound {
    pub client: usize,
    pub node: usize,
    pub degree: usize,
    pub measured: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBoundReport {
    pub constants: LipschitzConstants,
    /// `eps[k][l]`: largest layer-`l` error among entries client `k` read.
    pub eps: Vec<Vec<f64>>,
    pub rows: Vec<NodeBound>,
}

impl OutputBoundReport {
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.ratio).fold(0.0, f64::max)
    }

    pub fn max_measured(&self) -> f64 {
        self.rows.iter().map(|r| r.measured).fold(0.0, f64::max)
    }

    pub fn holds(&self) -> bool {
        self.max_ratio() <= 1.0
    }
}

/// Measured output error of every training node (full batch per client)
/// against its instantiated bound.
pub fn output_error_check(
    g: &Graph,
    params: &ModelParams,
    partition: &Partition,
    tables: &[EmbeddingTable],
) -> Result<OutputBoundReport> {
    check_instance(g, partition)?;
    check_tables(partition, tables)?;
    let constants = lipschitz_constants(params);
    let exact = forward_full(g, params)?;
    let num_layers = params.num_layers();
    let mut eps = vec![vec![0.0_f64; num_layers]; partition.num_clients()];
    let mut rows = Vec::new();
    for k in active_clients(partition) {
        let batch = partition.train_nodes(k);
        let (fwd, log) = forward_historical(g, params, batch, &tables[k], partition, k, &SAMPLER)?;
        for read in &log.reads {
            let stored = &tables[k].get(read.node, read.layer).expect("read entry").vector;
            let truth = exact.embedding_of(read.layer, read.node).expect("full pass");
            let err = stored
                .iter()
                .zip(truth.iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            eps[k][read.layer] = eps[k][read.layer].max(err);
        }
        for &v in batch {
            let h = fwd.embedding_of(num_layers, v).expect("batch row");
            let t = exact.embedding_of(num_layers, v).expect("full pass");
            let measured = h.iter().zip(t.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let bound = output_error_bound(constants.alpha1, constants.alpha2, g.degree(v), &eps[k]);
            rows.push(NodeBound {
                client: k,
                node: v,
                degree: g.degree(v),
                measured,
                bound,
                ratio: ratio(measured, bound),
            });
        }
    }
    Ok(OutputBoundReport { constants, eps, rows })
}

/// Largest `||grad F(theta + d) - grad F(theta)|| / ||d||` over Gaussian
/// parameter perturbations `d` at several scales.
pub fn estimate_smoothness(
    g: &Graph,
    params: &ModelParams,
    partition: &Partition,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (_, base) = full_gradient(g, params, partition)?;
    let mut lambda: f64 = 0.0;
    for i in 0..probes {
        let scale = PROBE_SCALES[i % 3] * rms(params).max(1e-3_f64);
        let mut rng = rng_for(seed, &[tag::PROBE, tag::INIT, i as u64]);
        let shifted = gaussian_like(params, scale, &mut rng);
        let (_, grad) = full_gradient(g, &shifted, partition)?;
        let step = shifted.distance(params);
        if step > 0.0 {
            lambda = lambda.max(grad.distance(&base) / step);
        }
    }
    Ok(lambda)
}

/// `(theta_old, theta_new)`: an initialization and the model after `steps`
/// full-gradient Adam steps from it. A table warm-started under
/// `theta_old` is stale with respect to `theta_new`.
pub fn trained_pair(
    g: &Graph,
    partition: &Partition,
    dims: &[usize],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(ModelParams, ModelParams)> {
    let old = ModelParams::init(dims, derive_seed(seed, &[tag::PROBE, tag::INIT]))?;
    let mut new = old.clone();
    let mut opt = OptimizerState::new(
        &new,
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    );
    for _ in 0..steps {
        let (_, grad) = full_gradient(g, &new, partition)?;
        adam_step(&mut new, &grad, &mut opt)?;
    }
    Ok((old, new))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub tau: usize,
    pub bound: ErrorBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalReport {
    pub inputs: BoundInputs,
    pub delay: DelayModel,
    pub tau_star: f64,
    pub best_integer: usize,
    pub rows: Vec<IntervalRow>,
}

impl IntervalReport {
    /// Interval with the smallest bound among the tabulated rows.
    pub fn grid_argmin(&self) -> usize {
        self.rows
            .iter()
            .min_by(|a, b| a.bound.value.total_cmp(&b.bound.value))
            .map(|r| r.tau)
            .unwrap_or(1)
    }
}

/// Tabulates the synchronization error bound over `tau = 1..=max_tau`
/// together with its continuous minimizer.
pub fn interval_report(inputs: BoundInputs, delay: DelayModel, max_tau: usize) -> Result<IntervalReport> {
    delay.validate()?;
    let tau_star = theoretical_tau(
        inputs.f0,
        inputs.f_inf,
        delay.sync_delay,
        inputs.eta,
        delay.total_runtime,
        inputs.lambda,
        inputs.zeta2,
    )?;
    let best_integer = best_integer_tau(&inputs, &delay, tau_star)?;
    let rows = (1..=max_tau.max(1))
        .map(|tau| {
            Ok(IntervalRow {
                tau,
                bound: error_bound(&inputs, tau, &delay)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalReport {
        inputs,
        delay,
        tau_star,
        best_integer,
        rows,
    })
}

/// Model widths `[d0, hidden, classes]` used with [`random_instance`].
pub const RANDOM_INSTANCE_DIMS: [usize; 3] = [8, 16, 3];

/// Small bound-check instance: an 80-node, 3-class SBM with degrees capped
/// at 8, split over 3 Dirichlet(0.5) clients.
pub fn random_instance(seed: u64) -> Result<(Graph, Partition)> {
    let params = SbmParams::new(80, 3, 0.12, 0.02, RANDOM_INSTANCE_DIMS[0]);
    let g = cap_degree(&generate_sbm(&params, seed)?, 8, seed)?;
    let p = partition_dirichlet(&g, 3, 0.5, seed)?;
    Ok((g, p))
}

/// Everything `probe` prints for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub label: String,
    /// `(table, batching, report)` for fresh/stale tables and full/minibatches.
    pub variance: Vec<(String, String, VarianceReport)>,
    pub lambda_hat: f64,
    pub gradient_bound: GradientBoundCheck,
    pub output_bound: OutputBoundReport,
    pub intervals: Option<IntervalReport>,
}

impl ProbeSummary {
    pub fn bounds_hold(&self) -> bool {
        self.gradient_bound.holds() && self.output_bound.holds()
    }
}

/// Settings for [`run_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub num_batches: usize,
    pub batch_ratio: f64,
    /// Adam steps between the stale table's model and the probed model.
    pub stale_steps: usize,
    pub stale_lr: f64,
    pub lambda_probes: usize,
    pub delay: DelayModel,
    pub eta: f64,
    pub max_tau: usize,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            num_batches: 10,
            batch_ratio: 0.5,
            stale_steps: 20,
            stale_lr: 0.01,
            lambda_probes: 24,
            delay: DelayModel::default(),
            eta: AdamConfig::default().lr,
            max_tau: 20,
            seed: 0,
        }
    }
}

/// Runs the full diagnostic set on one instance. The probed model is
/// `theta_new` of [`trained_pair`]; the stale table is warm-started under
/// `theta_old` and the fresh one under `theta_new`.
pub fn run_probe(
    label: &str,
    g: &Graph,
    partition: &Partition,
    dims: &[usize],
    settings: &ProbeSettings,
) -> Result<ProbeSummary> {
    check_instance(g, partition)?;
    let (old, params) = trained_pair(g, partition, dims, settings.stale_steps, settings.stale_lr, settings.seed)?;
    let mut ledger = CostLedger::default();
    let fresh = warm_start(g, &params, partition, &mut ledger)?;
    let stale = warm_start(g, &old, partition, &mut ledger)?;

    let full = ProbeConfig::full_batch(settings.seed);
    let mini = ProbeConfig {
        num_batches: settings.num_batches,
        batch_ratio: settings.batch_ratio,
        seed: settings.seed,
    };
    let mut variance = Vec::new();
    for (tname, tables) in [("fresh", &fresh), ("stale", &stale)] {
        for (bname, cfg) in [("full", &full), ("minibatch", &mini)] {
            let report = variance_decomposition(g, &params, partition, tables, cfg)?;
            variance.push((tname.to_string(), bname.to_string(), report));
        }
    }
    let lambda_hat = estimate_gradient_lipschitz(
        g,
        &params,
        partition,
        settings.lambda_probes,
        derive_seed(settings.seed, &[tag::PROBE]),
    )?;
    let stale_samples: Vec<BatchError> = variance
        .iter()
        .filter(|(t, _, _)| t == "stale")
        .flat_map(|(_, _, r)| r.per_client.iter().copied())
        .collect();
    let gradient_bound = check_gradient_bound(&stale_samples, lambda_hat);
    let output_bound = output_error_check(g, &params, partition, &stale)?;

    let (f0, _) = full_gradient(g, &params, partition)?;
    let zeta2 = variance[1].2.minibatch_sq;
    let smooth = estimate_smoothness(g, &params, partition, 6, settings.seed)?;
    let intervals = interval_report(
        BoundInputs {
            f0,
            f_inf: 0.0,
            eta: settings.eta,
            lambda: smooth,
            zeta2,
        },
        settings.delay,
        settings.max_tau,
    )
    .ok();

    Ok(ProbeSummary {
        label: label.to_string(),
        variance,
        lambda_hat,
        gradient_bound,
        output_bound,
        intervals,
    })
}

impl fmt::Display for ProbeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== {} ==", self.label)?;
        writeln!(f, "gradient variance (means over batches)")?;
        writeln!(
            f,
            "  {:<6} {:<10} {:>12} {:>12} {:>12} {:>9} {:>12}",
            "table", "batch", "approx", "minibatch", "total", "triangle", "structural"
        )?;
        for (t, b, r) in &self.variance {
            writeln!(
                f,
                "  {:<6} {:<10} {:>12.4e} {:>12.4e} {:>12.4e} {:>9} {:>12.4e}",
                t,
                b,
                r.approx,
                r.minibatch,
                r.total,
                if r.triangle_holds() { "ok" } else { "VIOLATED" },
                r.structural_bias
            )?;
        }
        let c = &self.output_bound.constants;
        writeln!(f, "output embedding error (stale table)")?;
        writeln!(
            f,
            "  alpha1 = {:.4}  alpha2 = {:.4}  nodes = {}  max measured = {:.4e}  max measured/bound = {:.4}",
            c.alpha1,
            c.alpha2,
            self.output_bound.rows.len(),
            self.output_bound.max_measured(),
            self.output_bound.max_ratio()
        )?;
        writeln!(f, "gradient error (stale table)")?;
        writeln!(
            f,
            "  lambda_hat = {:.4}  client batches = {}  max measured/bound = {:.4}",
            self.lambda_hat,
            self.gradient_bound.rows.len(),
            self.gradient_bound.max_ratio()
        )?;
        if let Some(iv) = &self.intervals {
            writeln!(
                f,
                "synchronization bound (F0 = {:.4}, eta = {}, lambda = {:.4}, zeta2 = {:.4e})",
                iv.inputs.f0, iv.inputs.eta, iv.inputs.lambda, iv.inputs.zeta2
            )?;
            writeln!(f, "  {:>4} {:>14} {:>14} {:>14} {:>6}", "tau", "runtime", "noise", "bound", "lr_ok")?;
            for r in &iv.rows {
                writeln!(
                    f,
                    "  {:>4} {:>14.6e} {:>14.6e} {:>14.6e} {:>6}",
                    r.tau, r.bound.runtime_term, r.bound.noise_term, r.bound.value, r.bound.lr_condition_holds
                )?;
            }
            writeln!(
                f,
                "  tau* = {:.3}  best integer = {}  grid argmin = {}",
                iv.tau_star,
                iv.best_integer,
                iv.grid_argmin()
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, partition_iid, SbmParams};

    fn instance() -> (Graph, Partition, Vec<usize>) {
        let g = generate_sbm(&SbmParams::new(40, 2, 0.2, 0.05, 4), 3).unwrap();
        let p = partition_iid(&g, 2, 3).unwrap();
        (g, p, vec![4, 6, 2])
    }

    #[test]
    fn fresh_full_batch_is_exact() {
        let (g, p, dims) = instance();
        let params = ModelParams::init(&dims, 1).unwrap();
        let tables = warm_start(&g, &params, &p, &mut CostLedger::default()).unwrap();
        let r = variance_decomposition(&g, &params, &p, &tables, &ProbeConfig::full_batch(0)).unwrap();
        assert!(r.approx <= 1e-10 && r.minibatch <= 1e-10, "{r:?}");
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Array2::from_diag(&ndarray::arr1(&[3.0, -5.0, 1.0]));
        assert!((spectral_norm(&a) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn bound_is_zero_without_errors_or_neighbors() {
        assert_eq!(output_error_bound(1.0, 2.0, 3, &[0.0, 0.0]), 0.0);
        assert_eq!(output_error_bound(1.0, 2.0, 0, &[0.0, 0.5]), 0.0);
        assert_eq!(output_error_bound(1.0, 2.0, 3, &[0.0]), 0.0);
        assert_eq!(output_error_bound(1.0, 2.0, 3, &[0.0, 0.5]), 3.0);
        assert_eq!(output_error_bound(1.0, 2.0, 1, &[0.0, 1.0, 1.0]), 4.0 + 2.0);
    }

    #[test]
    fn empty_graph_rejected() {
        let g = Graph::new(Array2::zeros((0, 2)), vec![], 2, &[], vec![]).unwrap();
        let p = Partition::from_assignment(&g, vec![], 1).unwrap();
        assert!(run_probe("empty", &g, &p, &[2, 2], &ProbeSettings::default()).is_err());
    }
}
