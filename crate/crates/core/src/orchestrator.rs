//! Server round loop, client local updates and the baseline strategies.
//!
//! Round 0 is the warm-up: the initial model is evaluated and, for
//! table-backed strategies, every client's historical table is seeded from
//! one exact forward pass. Rounds `1..=T` then run
//!
//! 1. select `m` of `K` clients uniformly (stream keyed by the round);
//! 2. each selected client runs [`local_update`] from the global model;
//! 3. the server averages the returned models (unweighted, ascending client
//!    order), evaluates on the test split and picks the next interval.
//!
//! Selected clients move through their local epochs in lockstep. Within an
//! epoch every client first plans (batch draw, staged cross-client pull)
//! against tables that nobody is writing, then applies its own writes, so
//! clients can run in parallel and the result does not depend on
//! scheduling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{CostLedger, SyncEvent, DEFAULT_SCALAR_BYTES};
use crate::embed::{
    apply_sync, bytes_per_node, stage_cross_client, stage_cross_client_recomputed, warm_start, EmbeddingTable,
    Stamp, StagedSync,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Partition, Split};
use crate::metrics::{compute_metrics, MetricsRecord};
use crate::model::{
    adam_step, forward_exact, forward_historical, forward_historical_to, loss_and_grad, per_node_losses, AdamConfig, ForwardPass,
    ModelParams, NeighborSampler, OptimizerState, StepContext,
};
use crate::rng::{derive_seed, rng_for, tag};
use crate::sampler::{SamplerKind, SamplerState};
use crate::schedule::{DelayModel, SyncSchedule};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Importance sampling, historical embeddings, adaptive interval.
    #[default]
    FedAis,
    /// All local samples, exact embeddings fetched every epoch.
    FedAll,
    /// Uniform sample selection, exact embeddings fetched every epoch.
    FedRandom,
    /// All local samples, historical embeddings, fixed interval.
    FedPns,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedAis, Strategy::FedAll, Strategy::FedRandom, Strategy::FedPns];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAis => "fedais",
            Strategy::FedAll => "fedall",
            Strategy::FedRandom => "fedrandom",
            Strategy::FedPns => "fedpns",
        }
    }

    pub fn sampler_kind(self) -> SamplerKind {
        match self {
            Strategy::FedAis => SamplerKind::Importance,
            _ => SamplerKind::Uniform,
        }
    }

    pub fn uses_tables(self) -> bool {
        matches!(self, Strategy::FedAis | Strategy::FedPns)
    }

    /// Sampling ratio actually used; strategies that train on all local
    /// samples ignore the configured one.
    pub fn ratio(self, configured: f64) -> f64 {
        match self {
            Strategy::FedAis | Strategy::FedRandom => configured,
            Strategy::FedAll | Strategy::FedPns => 1.0,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown strategy `{s}` (expected one of fedais, fedall, fedrandom, fedpns)"
                ))
            })
    }
}

/// What an owner sends when asked for cross-client embeddings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncSource {
    /// Its latest stored historical entry.
    #[default]
    LatestStored,
    /// A fresh exact computation under the requester's current model.
    Recompute,
}

fn default_local_epochs() -> usize {
    10
}
fn default_batches() -> usize {
    10
}
fn default_ratio() -> f64 {
    0.7
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_cap() -> Option<usize> {
    Some(10)
}
fn default_tau() -> usize {
    2
}
fn default_scalar_bytes() -> u64 {
    DEFAULT_SCALAR_BYTES
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `K`; must match the partition.
    pub num_clients: usize,
    /// `m`, clients selected per round.
    pub clients_per_round: usize,
    /// `T`, maximum number of rounds.
    pub rounds: usize,
    /// `J`, local epochs (one batch step each) per round.
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    /// `B`, the batch count that sets batch size `ceil(n_k r / B)`.
    #[serde(default = "default_batches")]
    pub batches_per_round: usize,
    #[serde(default = "default_ratio")]
    pub sample_ratio: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Hidden widths; input width and class count come from the graph.
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_cap")]
    pub neighbor_cap: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau0: usize,
    /// Use the mean number of batches per client as `tau_0` instead.
    #[serde(default)]
    pub tau0_from_batches: bool,
    /// Fixed interval of the periodic baseline.
    #[serde(default = "default_tau")]
    pub pns_tau: usize,
    /// Pins the adaptive interval to a constant.
    #[serde(default)]
    pub tau_override: Option<usize>,
    #[serde(default)]
    pub sync_source: SyncSource,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    /// Stop once test accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    #[serde(default)]
    pub delay: DelayModel,
    #[serde(default = "default_scalar_bytes")]
    pub scalar_bytes: u64,
    /// Run selected clients on the rayon pool. Results do not depend on it.
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_clients: 5,
            clients_per_round: 5,
            rounds: 50,
            local_epochs: default_local_epochs(),
            batches_per_round: default_batches(),
            sample_ratio: default_ratio(),
            adam: AdamConfig::default(),
            hidden_dims: default_hidden(),
            neighbor_cap: default_cap(),
            tau0: default_tau(),
            tau0_from_batches: false,
            pns_tau: default_tau(),
            tau_override: None,
            sync_source: SyncSource::default(),
            strategy: Strategy::default(),
            seed: 0,
            target_accuracy: None,
            delay: DelayModel::default(),
            scalar_bytes: DEFAULT_SCALAR_BYTES,
            parallel: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::param(m));
        if self.num_clients == 0 {
            return fail("num_clients must be at least 1".into());
        }
        if !(1..=self.num_clients).contains(&self.clients_per_round) {
            return fail(format!(
                "clients_per_round must lie in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            ));
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.batches_per_round == 0 {
            return fail("batches_per_round must be at least 1".into());
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return fail(format!("sample_ratio must lie in (0, 1], got {}", self.sample_ratio));
        }
        if self.tau0 == 0 || self.pns_tau == 0 || self.tau_override == Some(0) {
            return fail("synchronization intervals must be at least 1".into());
        }
        if self.hidden_dims.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        if self.neighbor_cap == Some(0) {
            return fail("neighbor_cap must be positive when set".into());
        }
        if !(self.adam.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if self.scalar_bytes == 0 {
            return fail("scalar_bytes must be positive".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("target_accuracy must lie in [0, 1], got {t}"));
            }
        }
        self.delay.validate()
    }

    /// `[d0, hidden.., C]`.
    pub fn dims(&self, g: &Graph) -> Vec<usize> {
        let mut dims = vec![g.feature_dim()];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(g.num_classes());
        dims
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[tag::INIT])
    }

    /// Seed of client `k`'s batch draw in `(round, epoch)`.
    pub fn batch_seed(&self, client: usize, round: usize, epoch: usize) -> u64 {
        derive_seed(self.seed, &[tag::BATCH, client as u64, round as u64, epoch as u64])
    }

    pub fn neighbor_sampler(&self, round: usize, epoch: usize) -> NeighborSampler {
        NeighborSampler::capped(self.neighbor_cap, derive_seed(self.seed, &[tag::NEIGHBOR]), round, epoch)
    }

    /// Clients taking part in `round`, ascending.
    pub fn select_clients(&self, round: usize) -> Vec<usize> {
        let mut rng = rng_for(self.seed, &[tag::SELECT, round as u64]);
        let mut picked = index::sample(&mut rng, self.num_clients, self.clients_per_round).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// Per-round summary. Cumulative fields include the warm-up round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub test_loss: f64,
    pub test_acc: f64,
    pub macro_f1: f64,
    /// Interval used during this round.
    pub tau: usize,
    pub sync_events: u64,
    pub comp_ops: u64,
    pub comm_bytes: u64,
    pub cum_comp_ops: u64,
    pub cum_comm_bytes: u64,
    pub sim_time: f64,
}

impl RoundRecord {
    pub fn to_metrics(&self, strategy: Strategy, seed: u64) -> MetricsRecord {
        MetricsRecord {
            round: self.round,
            strategy: strategy.name().to_string(),
            seed,
            tau: self.tau,
            test_loss: self.test_loss,
            test_acc: self.test_acc,
            macro_f1: self.macro_f1,
            comp_ops: self.comp_ops,
            comm_bytes: self.comm_bytes,
            cum_comm_bytes: self.cum_comm_bytes,
            sim_time: self.sim_time,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub records: Vec<RoundRecord>,
    pub params: ModelParams,
    /// Global model after each round, index 0 being the initial model.
    pub trajectory: Vec<ModelParams>,
    /// Client models returned in the last round, ascending client order.
    pub last_client_models: Vec<(usize, ModelParams)>,
    pub ledger: CostLedger,
    pub schedule: Option<SyncSchedule>,
    pub stopped_early: bool,
}

impl RunOutput {
    pub fn metrics(&self, seed: u64) -> Vec<MetricsRecord> {
        self.records.iter().map(|r| r.to_metrics(self.strategy, seed)).collect()
    }
}

/// Client-private state that survives between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub sampler: SamplerState,
    pub optimizer: OptimizerState,
}

impl ClientState {
    pub fn new(strategy: Strategy, cfg: &RunConfig, train_nodes: &[usize], params: &ModelParams) -> Result<Self> {
        Ok(Self {
            sampler: SamplerState::new(strategy.sampler_kind(), train_nodes, strategy.ratio(cfg.sample_ratio))?,
            optimizer: OptimizerState::new(params, cfg.adam),
        })
    }
}

/// Read-only inputs shared by every client in a round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub graph: &'a Graph,
    pub partition: &'a Partition,
    pub config: &'a RunConfig,
    pub strategy: Strategy,
    pub round: usize,
}

/// Summary of one client's local update.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ModelParams,
    pub sync_events: usize,
    pub bytes: u64,
}

/// Distinct nodes of other clients among the (sampled) neighbors of `batch`.
pub fn cross_neighbors_of(
    g: &Graph,
    partition: &Partition,
    client: usize,
    batch: &[usize],
    sampler: &NeighborSampler,
) -> Vec<usize> {
    let mut out: Vec<usize> = batch
        .iter()
        .flat_map(|&v| sampler.neighbors(g, v).into_owned())
        .filter(|&w| !partition.is_local(client, w))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn charge_forward(ledger: &mut CostLedger, fwd: &ForwardPass) {
    ledger.charge_compute(fwd.compute_units() as u64);
    ledger.charge_forward_pass();
}

/// One epoch's batch and synchronization, fixed before any table is
/// written in that epoch.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub epoch: usize,
    pub batch: Vec<usize>,
    /// Cross-client neighbors of the batch.
    pub cross: Vec<usize>,
    pub sync: bool,
    sampler: NeighborSampler,
    staged: Option<StagedSync>,
}

/// A client's progress through one round of local updates.
///
/// Each epoch runs in two steps: [`LocalRun::plan`] draws the batch and
/// stages the cross-client pull while every table is only read, then
/// [`LocalRun::execute`] writes the client's own table and takes the
/// optimizer step. The orchestrator runs all selected clients through the
/// same epoch in lockstep, so a pull sees its owners' tables as they stood
/// at the end of the previous epoch.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub client: usize,
    pub tau: usize,
    pub params: ModelParams,
    pub ledger: CostLedger,
    pub sync_events: usize,
    pub bytes: u64,
    batch_size: usize,
}

impl LocalRun {
    /// Starts from the received global model. Importance-sampling clients
    /// first refresh their probabilities with one forward pass over their
    /// training nodes (no backward pass).
    pub fn begin(
        ctx: &RoundContext<'_>,
        client: usize,
        global: &ModelParams,
        tau: usize,
        state: &mut ClientState,
        table: Option<&EmbeddingTable>,
        ledger: CostLedger,
    ) -> Result<Self> {
        if ctx.strategy.uses_tables() != table.is_some() {
            return Err(Error::param(format!(
                "strategy {} {} a historical table",
                ctx.strategy,
                if table.is_some() { "does not take" } else { "needs" }
            )));
        }
        let mut run = Self {
            client,
            tau: tau.max(1),
            params: global.clone(),
            ledger,
            sync_events: 0,
            bytes: 0,
            batch_size: state.sampler.batch_size(ctx.config.batches_per_round),
        };
        if state.sampler.kind() == SamplerKind::Importance && ctx.partition.n_train(client) > 0 {
            let nodes = ctx.partition.train_nodes(client);
            let sampler = ctx.config.neighbor_sampler(ctx.round, 0);
            let fwd = match table {
                Some(t) => forward_historical(ctx.graph, &run.params, nodes, t, ctx.partition, client, &sampler)?.0,
                None => forward_exact(ctx.graph, &run.params, nodes, &sampler)?,
            };
            charge_forward(&mut run.ledger, &fwd);
            let step = StepContext { round: ctx.round, epoch: 0 };
            let losses = per_node_losses(&fwd, ctx.graph.labels(), step)?;
            state.sampler.update_probabilities(&losses)?;
        }
        Ok(run)
    }

    /// Draws the batch for `epoch` and, on a synchronization epoch of a
    /// table-backed strategy, stages the pull of the batch's cross-client
    /// neighbors from `owners` (indexed by client id).
    pub fn plan(
        &mut self,
        ctx: &RoundContext<'_>,
        epoch: usize,
        state: &ClientState,
        table: Option<&EmbeddingTable>,
        owners: &[EmbeddingTable],
    ) -> Result<EpochPlan> {
        let cfg = ctx.config;
        let sampler = cfg.neighbor_sampler(ctx.round, epoch);
        let batch = state
            .sampler
            .sample_batch(self.batch_size, cfg.batch_seed(self.client, ctx.round, epoch))?;
        let cross = cross_neighbors_of(ctx.graph, ctx.partition, self.client, &batch, &sampler);
        let sync = table.is_none() || epoch.is_multiple_of(self.tau);
        let staged = match table {
            Some(t) if sync => {
                let stamp = Stamp::new(ctx.round, epoch);
                Some(match cfg.sync_source {
                    SyncSource::LatestStored => stage_cross_client(owners, t, ctx.partition, &cross, stamp)?,
                    SyncSource::Recompute => stage_cross_client_recomputed(
                        ctx.graph,
                        &self.params,
                        t,
                        ctx.partition,
                        &cross,
                        stamp,
                        &sampler,
                        &mut self.ledger,
                    )?,
                })
            }
            _ => None,
        };
        Ok(EpochPlan {
            epoch,
            batch,
            cross,
            sync,
            sampler,
            staged,
        })
    }

    /// Applies the plan: synchronization and table refresh (sync epochs of
    /// table-backed strategies), forward, backward and one Adam step.
    pub fn execute(
        &mut self,
        ctx: &RoundContext<'_>,
        mut plan: EpochPlan,
        state: &mut ClientState,
        table: Option<&mut EmbeddingTable>,
    ) -> Result<()> {
        let g = ctx.graph;
        let step = StepContext { round: ctx.round, epoch: plan.epoch };
        let grads = match table {
            None => {
                let fwd = forward_exact(g, &self.params, &plan.batch, &plan.sampler)?;
                charge_forward(&mut self.ledger, &fwd);
                // the exact pass needs the current embeddings of every
                // cross-client neighbor, fetched from their owners
                let widths = &self.params.dims()[..self.params.num_layers()];
                let bytes = plan.cross.len() as u64 * bytes_per_node(widths, self.ledger.scalar_bytes());
                self.ledger.record_sync(SyncEvent {
                    round: ctx.round,
                    epoch: plan.epoch,
                    client: self.client,
                    nodes: plan.cross.len(),
                    bytes,
                });
                self.sync_events += 1;
                self.bytes += bytes;
                loss_and_grad(&fwd, g.labels(), &self.params, step)?.1
            }
            Some(table) => {
                if let Some(staged) = plan.staged.take() {
                    let receipt = apply_sync(table, staged, &mut self.ledger)?;
                    self.sync_events += 1;
                    self.bytes += receipt.bytes;
                }
                if plan.sync {
                    self.refresh_table(ctx, table, &plan)?;
                }
                let (fwd, _) =
                    forward_historical(g, &self.params, &plan.batch, table, ctx.partition, self.client, &plan.sampler)?;
                charge_forward(&mut self.ledger, &fwd);
                loss_and_grad(&fwd, g.labels(), &self.params, step)?.1
            }
        };
        self.ledger.charge_backward_pass();
        adam_step(&mut self.params, &grads, &mut state.optimizer)?;
        if !self.params.is_finite() {
            return Err(Error::Numeric {
                round: ctx.round,
                epoch: plan.epoch,
                what: format!("client {} parameters diverged", self.client),
            });
        }
        Ok(())
    }

    /// Recomputes the hidden embeddings of the batch and its local
    /// out-of-batch neighbors under the current model and writes them to
    /// the table.
    fn refresh_table(&mut self, ctx: &RoundContext<'_>, table: &mut EmbeddingTable, plan: &EpochPlan) -> Result<()> {
        let num_layers = self.params.num_layers();
        if num_layers < 2 {
            return Ok(());
        }
        let mut rows = plan.batch.clone();
        for &v in &plan.batch {
            rows.extend(
                plan.sampler
                    .neighbors(ctx.graph, v)
                    .iter()
                    .filter(|&&w| ctx.partition.is_local(self.client, w)),
            );
        }
        rows.sort_unstable();
        rows.dedup();
        let (fwd, _) = forward_historical_to(
            ctx.graph,
            &self.params,
            &rows,
            table,
            ctx.partition,
            self.client,
            &plan.sampler,
            num_layers - 1,
        )?;
        charge_forward(&mut self.ledger, &fwd);
        let stamp = Stamp::new(ctx.round, plan.epoch);
        for l in 1..num_layers {
            for (r, &v) in fwd.rows(l).iter().enumerate() {
                let row = fwd.embeddings(l).row(r);
                table.push(v, l, row.as_slice().expect("standard layout"), stamp)?;
            }
        }
        Ok(())
    }

    pub fn outcome(&self) -> LocalOutcome {
        LocalOutcome {
            params: self.params.clone(),
            sync_events: self.sync_events,
            bytes: self.bytes,
        }
    }
}

/// `J` local epochs of `client` starting from `global`, reading other
/// clients' embeddings from `owners` (indexed by client id).
///
/// Table-backed strategies synchronize the batch's cross-client neighbors
/// and refresh their own table on epochs with `epoch % tau == 0` (epochs
/// are 0-based, so epoch 0 always syncs); other epochs read the table as it
/// stands. Exact strategies fetch the exact embeddings of the batch's
/// cross-client neighbors every epoch.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    ctx: &RoundContext<'_>,
    client: usize,
    global: &ModelParams,
    tau: usize,
    state: &mut ClientState,
    mut table: Option<&mut EmbeddingTable>,
    owners: &[EmbeddingTable],
    ledger: &mut CostLedger,
) -> Result<LocalOutcome> {
    if ctx.config.local_epochs == 0 || ctx.partition.n_train(client) == 0 {
        return Ok(LocalOutcome {
            params: global.clone(),
            sync_events: 0,
            bytes: 0,
        });
    }
    let mut run = LocalRun::begin(ctx, client, global, tau, state, table.as_deref(), ledger.scoped(ctx.round))?;
    for epoch in 0..ctx.config.local_epochs {
        let plan = run.plan(ctx, epoch, state, table.as_deref(), owners)?;
        run.execute(ctx, plan, state, table.as_deref_mut())?;
    }
    ledger.absorb(&run.ledger);
    Ok(run.outcome())
}

/// Runs `f` over `items`, on the rayon pool when `parallel`. Output order
/// follows input order either way.
fn for_each_client<T: Send, R: Send>(parallel: bool, items: Vec<T>, f: impl Fn(T) -> R + Sync + Send) -> Vec<R> {
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

/// One round of lockstep local updates for `selected`.
#[allow(clippy::too_many_arguments)]
fn run_round(
    ctx: &RoundContext<'_>,
    selected: &[usize],
    global: &ModelParams,
    tau: usize,
    states: &mut [ClientState],
    tables: &mut [EmbeddingTable],
    ledger: &CostLedger,
) -> Result<Vec<LocalRun>> {
    let cfg = ctx.config;
    let active: Vec<usize> = selected
        .iter()
        .copied()
        .filter(|&k| ctx.partition.n_train(k) > 0)
        .collect();

    let mut runs: Vec<LocalRun> = {
        let mut slots: Vec<(usize, &mut ClientState)> = states
            .iter_mut()
            .enumerate()
            .filter(|(k, _)| active.binary_search(k).is_ok())
            .collect();
        let tables_ro: &[EmbeddingTable] = tables;
        let begun = for_each_client(cfg.parallel, std::mem::take(&mut slots), |(k, state)| {
            LocalRun::begin(ctx, k, global, tau, state, tables_ro.get(k), ledger.scoped(ctx.round))
        });
        begun.into_iter().collect::<Result<_>>()?
    };

    for epoch in 0..cfg.local_epochs {
        let plans: Vec<EpochPlan> = {
            let tables_ro: &[EmbeddingTable] = tables;
            let states_ro: &[ClientState] = states;
            let work: Vec<&mut LocalRun> = runs.iter_mut().collect();
            for_each_client(cfg.parallel, work, |run| {
                let k = run.client;
                run.plan(ctx, epoch, &states_ro[k], tables_ro.get(k), tables_ro)
            })
            .into_iter()
            .collect::<Result<_>>()?
        };
        let mut states_mut: Vec<Option<&mut ClientState>> = states.iter_mut().map(Some).collect();
        let mut tables_mut: Vec<Option<&mut EmbeddingTable>> = tables.iter_mut().map(Some).collect();
        let work: Vec<_> = runs
            .iter_mut()
            .zip(plans)
            .map(|(run, plan)| {
                let k = run.client;
                let state = states_mut[k].take().expect("each client runs once per round");
                let table = tables_mut.get_mut(k).and_then(Option::take);
                (run, plan, state, table)
            })
            .collect();
        for_each_client(cfg.parallel, work, |(run, plan, state, table)| run.execute(ctx, plan, state, table))
            .into_iter()
            .collect::<Result<Vec<()>>>()?;
    }
    Ok(runs)
}

fn initial_tau0(cfg: &RunConfig, partition: &Partition) -> usize {
    if !cfg.tau0_from_batches {
        return cfg.tau0;
    }
    let k = partition.num_clients();
    let total: usize = (0..k)
        .map(|c| {
            let n = partition.n_train(c);
            let b = crate::sampler::batch_size(n, cfg.sample_ratio, cfg.batches_per_round);
            n.div_ceil(b.max(1))
        })
        .sum();
    (total as f64 / k as f64).round().max(1.0) as usize
}

/// Runs `config.strategy` end to end.
pub fn run_training(config: &RunConfig, g: &Graph, partition: &Partition) -> Result<RunOutput> {
    config.validate()?;
    if partition.num_clients() != config.num_clients {
        return Err(Error::param(format!(
            "config has {} clients, partition has {}",
            config.num_clients,
            partition.num_clients()
        )));
    }
    if partition.assignment().len() != g.num_nodes() {
        return Err(Error::param("partition does not match the graph"));
    }
    if g.nodes_in(Split::Test).is_empty() {
        return Err(Error::param("graph has no test nodes"));
    }
    let strategy = config.strategy;
    let dims = config.dims(g);
    let mut params = ModelParams::init(&dims, config.init_seed())?;
    let mut ledger = CostLedger::new(config.scalar_bytes);
    ledger.begin_round(0);

    let mut tables = if strategy.uses_tables() {
        warm_start(g, &params, partition, &mut ledger)?
    } else {
        Vec::new()
    };
    let mut states = (0..config.num_clients)
        .map(|k| ClientState::new(strategy, config, partition.train_nodes(k), &params))
        .collect::<Result<Vec<_>>>()?;

    let initial = compute_metrics(g, &params, Split::Test)?;
    let tau0 = initial_tau0(config, partition);
    let mut schedule = match strategy {
        Strategy::FedAis | Strategy::FedPns => Some(SyncSchedule::new(tau0, initial.loss)?),
        _ => None,
    };
    let mut tau = match strategy {
        Strategy::FedAis => config.tau_override.unwrap_or(tau0),
        Strategy::FedPns => config.pns_tau,
        _ => 1,
    };
    let warm_bytes = ledger.comm_bytes();
    let mut sim_time = warm_bytes as f64 / config.delay.bandwidth;
    let mut records = vec![RoundRecord {
        round: 0,
        clients: Vec::new(),
        test_loss: initial.loss,
        test_acc: initial.accuracy,
        macro_f1: initial.macro_f1,
        tau,
        sync_events: 0,
        comp_ops: ledger.comp_ops(),
        comm_bytes: warm_bytes,
        cum_comp_ops: ledger.comp_ops(),
        cum_comm_bytes: warm_bytes,
        sim_time,
    }];
    let mut trajectory = vec![params.clone()];
    let mut last_client_models = Vec::new();
    let mut stopped_early = false;

    for round in 1..=config.rounds {
        ledger.begin_round(round);
        let selected = config.select_clients(round);
        let ctx = RoundContext {
            graph: g,
            partition,
            config,
            strategy,
            round,
        };
        let runs = run_round(&ctx, &selected, &params, tau, &mut states, &mut tables, &ledger)?;

        // clients without training nodes return the global model unchanged
        let mut client_models = Vec::with_capacity(selected.len());
        let mut max_syncs = 0;
        let mut max_bytes = 0;
        let mut runs = runs.into_iter().peekable();
        for &k in &selected {
            match runs.next_if(|r| r.client == k) {
                Some(run) => {
                    ledger.absorb(&run.ledger);
                    max_syncs = max_syncs.max(run.sync_events);
                    max_bytes = max_bytes.max(run.bytes);
                    client_models.push((k, run.params));
                }
                None => client_models.push((k, params.clone())),
            }
        }
        let models: Vec<ModelParams> = client_models.iter().map(|(_, m)| m.clone()).collect();
        params = ModelParams::mean_of(&models)?;
        if !params.is_finite() {
            return Err(Error::Numeric {
                round,
                epoch: 0,
                what: "aggregated model is not finite".into(),
            });
        }

        let eval = compute_metrics(g, &params, Split::Test)?;
        if !eval.loss.is_finite() {
            return Err(Error::Numeric {
                round,
                epoch: 0,
                what: "non-finite test loss".into(),
            });
        }
        let d = &config.delay;
        sim_time += config.local_epochs as f64 * d.compute
            + max_syncs as f64 * d.sync_delay
            + max_bytes as f64 / d.bandwidth;
        let cost = ledger.round(round);
        records.push(RoundRecord {
            round,
            clients: selected,
            test_loss: eval.loss,
            test_acc: eval.accuracy,
            macro_f1: eval.macro_f1,
            tau,
            sync_events: cost.sync_events,
            comp_ops: cost.comp_ops,
            comm_bytes: cost.comm_bytes,
            cum_comp_ops: ledger.comp_ops(),
            cum_comm_bytes: ledger.comm_bytes(),
            sim_time,
        });
        trajectory.push(params.clone());
        last_client_models = client_models;

        if let Some(s) = schedule.as_mut() {
            let fixed = match strategy {
                Strategy::FedAis => config.tau_override,
                _ => Some(config.pns_tau),
            };
            tau = match fixed {
                None => s.update(round, eval.loss)?,
                Some(f) => {
                    s.record_fixed(round, eval.loss, f);
                    f
                }
            };
        }
        log::debug!(
            "{strategy} round {round}: loss {:.4} acc {:.4} tau {} bytes {}",
            eval.loss,
            eval.accuracy,
            records[round].tau,
            cost.comm_bytes
        );
        if config.target_accuracy.is_some_and(|t| eval.accuracy >= t) {
            stopped_early = round < config.rounds;
            break;
        }
    }

    Ok(RunOutput {
        strategy,
        records,
        params,
        trajectory,
        last_client_models,
        ledger,
        schedule,
        stopped_early,
    })
}

/// [`run_training`] with the strategy replaced.
pub fn run_baseline(config: &RunConfig, strategy: Strategy, g: &Graph, partition: &Partition) -> Result<RunOutput> {
    let cfg = RunConfig {
        strategy,
        ..config.clone()
    };
    run_training(&cfg, g, partition)
}
