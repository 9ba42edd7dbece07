//! Per-client historical embedding tables and cross-client synchronization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::cost::{CostLedger, SyncEvent};
use crate::error::{Error, Result};
use crate::graph::{Graph, Partition};
use crate::model::{forward_exact_to, forward_full, ModelParams, NeighborSampler};

/// Time of a write, ordered lexicographically by `(round, epoch)`.
/// Round 0 is the warm-up round.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Stamp {
    pub round: usize,
    pub epoch: usize,
}

impl Stamp {
    pub const WARM_START: Stamp = Stamp { round: 0, epoch: 0 };

    pub fn new(round: usize, epoch: usize) -> Self {
        Self { round, epoch }
    }

    /// Local epochs elapsed since `earlier`, with `epochs_per_round` epochs per round.
    pub fn epochs_since(self, earlier: Stamp, epochs_per_round: usize) -> usize {
        let now = self.round * epochs_per_round + self.epoch;
        let then = earlier.round * epochs_per_round + earlier.epoch;
        now.saturating_sub(then)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub vector: Vec<f64>,
    pub stamp: Stamp,
}

/// Historical embeddings held by one client for layers `0..L`. Layer 0 holds
/// raw features and is never rewritten after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    owner: usize,
    widths: Vec<usize>,
    capacity: BTreeSet<usize>,
    cross: BTreeSet<usize>,
    layers: Vec<BTreeMap<usize, Entry>>,
}

impl EmbeddingTable {
    /// Empty table for `owner` sized for the local nodes and their
    /// cross-client neighbors. `widths[l]` is the embedding width of layer `l`.
    pub fn new(owner: usize, partition: &Partition, widths: &[usize]) -> Self {
        let cross: BTreeSet<usize> = partition.cross_neighbors(owner).iter().copied().collect();
        let capacity = partition
            .local_nodes(owner)
            .iter()
            .copied()
            .chain(cross.iter().copied())
            .collect();
        Self {
            owner,
            widths: widths.to_vec(),
            capacity,
            cross,
            layers: vec![BTreeMap::new(); widths.len()],
        }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, node: usize, layer: usize) -> Option<&Entry> {
        self.layers.get(layer)?.get(&node)
    }

    pub fn holds(&self, node: usize) -> bool {
        self.capacity.contains(&node)
    }

    pub fn is_cross_client(&self, node: usize) -> bool {
        self.cross.contains(&node)
    }

    fn check_write(&self, node: usize, layer: usize, width: usize, stamp: Stamp) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::param(format!("table has no layer {layer}")));
        }
        if !self.capacity.contains(&node) {
            return Err(Error::param(format!(
                "node {node} is outside the table of client {}",
                self.owner
            )));
        }
        if width != self.widths[layer] {
            return Err(Error::Dimension(format!(
                "layer {layer} expects width {}, got {width}",
                self.widths[layer]
            )));
        }
        if let Some(current) = self.layers[layer].get(&node).map(|e| e.stamp) {
            if stamp < current {
                return Err(Error::StaleWrite {
                    node,
                    layer,
                    current,
                    attempted: stamp,
                });
            }
        }
        Ok(())
    }

    /// Replaces the entry for `(node, layer)`. Writes with an older stamp are
    /// rejected; equal stamps overwrite. Layer 0 is read-only.
    pub fn push(&mut self, node: usize, layer: usize, vector: &[f64], stamp: Stamp) -> Result<()> {
        if layer == 0 {
            return Err(Error::param("layer 0 holds raw features and is read-only"));
        }
        self.check_write(node, layer, vector.len(), stamp)?;
        self.layers[layer].insert(
            node,
            Entry {
                vector: vector.to_vec(),
                stamp,
            },
        );
        Ok(())
    }

    fn seed_entry(&mut self, node: usize, layer: usize, vector: ArrayView1<'_, f64>) {
        self.layers[layer].insert(
            node,
            Entry {
                vector: vector.to_vec(),
                stamp: Stamp::WARM_START,
            },
        );
    }

    /// Entries in historical layers `1..L`.
    pub fn historical_entries(&self) -> impl Iterator<Item = (usize, usize, &Entry)> {
        self.layers
            .iter()
            .enumerate()
            .skip(1)
            .flat_map(|(l, m)| m.iter().map(move |(&v, e)| (v, l, e)))
    }

    pub fn to_json(&self) -> Result<String> {
        let dump: BTreeMap<usize, &BTreeMap<usize, Entry>> = self.layers.iter().enumerate().collect();
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Bytes needed to move one node's historical layers `1..L`.
pub fn bytes_per_node(widths: &[usize], scalar_bytes: u64) -> u64 {
    widths.iter().skip(1).map(|&d| d as u64).sum::<u64>() * scalar_bytes
}

/// Seeds one table per client from a single exact full-graph forward pass
/// under `params`. Every entry gets the warm-start stamp. Transferring the
/// cross-client entries of all layers (features included) is charged to
/// the ledger; this is the only time raw features cross clients.
pub fn warm_start(
    g: &Graph,
    params: &ModelParams,
    partition: &Partition,
    ledger: &mut CostLedger,
) -> Result<Vec<EmbeddingTable>> {
    let num_layers = params.num_layers();
    let dims = params.dims();
    let widths = &dims[..num_layers];
    let fwd = forward_full(g, params)?;
    ledger.charge_compute(fwd.compute_units() as u64);
    ledger.charge_forward_pass();

    let mut tables = Vec::with_capacity(partition.num_clients());
    for k in 0..partition.num_clients() {
        let mut table = EmbeddingTable::new(k, partition, widths);
        let nodes: Vec<usize> = table.capacity.iter().copied().collect();
        for l in 0..num_layers {
            for &v in &nodes {
                // full forward covers every node at every layer
                let row = fwd.embedding_of(l, v).expect("full pass covers all nodes");
                table.seed_entry(v, l, row);
            }
        }
        let cross_scalars: u64 = widths.iter().map(|&d| d as u64).sum();
        ledger.charge_comm(table.cross.len() as u64 * cross_scalars * ledger.scalar_bytes());
        tables.push(table);
    }
    Ok(tables)
}

/// Result of one synchronization transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncReceipt {
    pub nodes: Vec<usize>,
    pub bytes: u64,
}

fn validate_request(
    target: &EmbeddingTable,
    partition: &Partition,
    nodes: &[usize],
    stamp: Stamp,
) -> Result<Vec<usize>> {
    let requester = target.owner;
    let mut wanted: Vec<usize> = nodes.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    for &w in &wanted {
        if w >= partition.assignment().len() || partition.client_of(w) == requester {
            return Err(Error::Sync(format!(
                "node {w} is not owned by a client other than {requester}"
            )));
        }
        if !target.is_cross_client(w) {
            return Err(Error::Sync(format!(
                "node {w} does not neighbor client {requester}"
            )));
        }
        for l in 1..target.num_layers() {
            if let Some(e) = target.get(w, l) {
                if stamp < e.stamp {
                    return Err(Error::StaleWrite {
                        node: w,
                        layer: l,
                        current: e.stamp,
                        attempted: stamp,
                    });
                }
            }
        }
    }
    Ok(wanted)
}

/// A validated synchronization whose entries are staged but not yet
/// written. Produced by [`stage_cross_client`] or
/// [`stage_cross_client_recomputed`], committed by [`apply_sync`].
#[derive(Debug, Clone, PartialEq)]
pub struct StagedSync {
    requester: usize,
    stamp: Stamp,
    nodes: Vec<usize>,
    entries: Vec<(usize, usize, Vec<f64>)>,
}

impl StagedSync {
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn stamp(&self) -> Stamp {
        self.stamp
    }
}

/// Reads each requested node's latest stored layers `1..L` from its owner's
/// table. `owners` is indexed by client id; the requester's own slot is
/// never read.
pub fn stage_cross_client(
    owners: &[EmbeddingTable],
    target: &EmbeddingTable,
    partition: &Partition,
    nodes: &[usize],
    stamp: Stamp,
) -> Result<StagedSync> {
    let wanted = validate_request(target, partition, nodes, stamp)?;
    let mut entries = Vec::with_capacity(wanted.len() * target.num_layers());
    for &w in &wanted {
        let owner = owners
            .get(partition.client_of(w))
            .ok_or_else(|| Error::Sync(format!("no table for the owner of node {w}")))?;
        for l in 1..target.num_layers() {
            let entry = owner.get(w, l).ok_or(Error::MissingEntry { node: w, layer: l })?;
            entries.push((w, l, entry.vector.clone()));
        }
    }
    Ok(StagedSync {
        requester: target.owner,
        stamp,
        nodes: wanted,
        entries,
    })
}

/// Like [`stage_cross_client`], but each owner recomputes the requested
/// embeddings with an exact forward pass under `params` (the requester's
/// current model) instead of sending its stored copy. The owners'
/// aggregation work is charged to `ledger` as compute.
#[allow(clippy::too_many_arguments)]
pub fn stage_cross_client_recomputed(
    g: &Graph,
    params: &ModelParams,
    target: &EmbeddingTable,
    partition: &Partition,
    nodes: &[usize],
    stamp: Stamp,
    sampler: &NeighborSampler,
    ledger: &mut CostLedger,
) -> Result<StagedSync> {
    let wanted = validate_request(target, partition, nodes, stamp)?;
    let mut entries = Vec::new();
    if !wanted.is_empty() && target.num_layers() >= 2 {
        // embeddings at layers 1..L-1 only need the first L-1 layers
        let fwd = forward_exact_to(g, params, &wanted, sampler, target.num_layers() - 1)?;
        ledger.charge_compute(fwd.compute_units() as u64);
        ledger.charge_forward_pass();
        for &w in &wanted {
            for l in 1..target.num_layers() {
                let row = fwd
                    .embedding_of(l, w)
                    .ok_or(Error::MissingEntry { node: w, layer: l })?;
                entries.push((w, l, row.to_vec()));
            }
        }
    }
    Ok(StagedSync {
        requester: target.owner,
        stamp,
        nodes: wanted,
        entries,
    })
}

/// Writes a staged synchronization into `target` and charges its bytes.
/// All entries are checked before the first write, so a failure leaves the
/// table untouched.
pub fn apply_sync(target: &mut EmbeddingTable, staged: StagedSync, ledger: &mut CostLedger) -> Result<SyncReceipt> {
    if staged.requester != target.owner {
        return Err(Error::Sync(format!(
            "sync staged for client {} applied to client {}",
            staged.requester, target.owner
        )));
    }
    for (w, l, v) in &staged.entries {
        target.check_write(*w, *l, v.len(), staged.stamp)?;
    }
    for (w, l, vector) in staged.entries {
        target.push(w, l, &vector, staged.stamp)?;
    }
    let bytes = staged.nodes.len() as u64 * bytes_per_node(&target.widths, ledger.scalar_bytes());
    ledger.record_sync(SyncEvent {
        round: staged.stamp.round,
        epoch: staged.stamp.epoch,
        client: target.owner,
        nodes: staged.nodes.len(),
        bytes,
    });
    Ok(SyncReceipt {
        nodes: staged.nodes,
        bytes,
    })
}

/// Stages and applies one synchronization of stored entries.
pub fn pull_cross_client(
    owners: &[EmbeddingTable],
    target: &mut EmbeddingTable,
    partition: &Partition,
    nodes: &[usize],
    stamp: Stamp,
    ledger: &mut CostLedger,
) -> Result<SyncReceipt> {
    let staged = stage_cross_client(owners, target, partition, nodes, stamp)?;
    apply_sync(target, staged, ledger)
}

/// [`pull_cross_client`] over a single slice of tables.
pub fn sync_cross_client(
    tables: &mut [EmbeddingTable],
    partition: &Partition,
    requester: usize,
    nodes: &[usize],
    stamp: Stamp,
    ledger: &mut CostLedger,
) -> Result<SyncReceipt> {
    let staged = stage_cross_client(tables, &tables[requester], partition, nodes, stamp)?;
    apply_sync(&mut tables[requester], staged, ledger)
}

/// Stages and applies one recomputing synchronization.
#[allow(clippy::too_many_arguments)]
pub fn pull_cross_client_recomputed(
    g: &Graph,
    params: &ModelParams,
    target: &mut EmbeddingTable,
    partition: &Partition,
    nodes: &[usize],
    stamp: Stamp,
    sampler: &NeighborSampler,
    ledger: &mut CostLedger,
) -> Result<SyncReceipt> {
    let staged = stage_cross_client_recomputed(g, params, target, partition, nodes, stamp, sampler, ledger)?;
    apply_sync(target, staged, ledger)
}

/// Histogram of staleness (epochs since last write) over historical layers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StalenessReport {
    pub all: BTreeMap<usize, usize>,
    pub cross_client: BTreeMap<usize, usize>,
}

impl StalenessReport {
    pub fn total(&self) -> usize {
        self.all.values().sum()
    }

    pub fn min_cross_client(&self) -> Option<usize> {
        self.cross_client.keys().next().copied()
    }

    pub fn max(&self) -> Option<usize> {
        self.all.keys().next_back().copied()
    }
}

pub fn staleness_report(table: &EmbeddingTable, now: Stamp, epochs_per_round: usize) -> StalenessReport {
    let mut report = StalenessReport::default();
    for (v, _, e) in table.historical_entries() {
        let age = now.epochs_since(e.stamp, epochs_per_round);
        *report.all.entry(age).or_default() += 1;
        if table.is_cross_client(v) {
            *report.cross_client.entry(age).or_default() += 1;
        }
    }
    report
}
