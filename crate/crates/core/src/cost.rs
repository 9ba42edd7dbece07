//! Exact computation and communication ledgers.
//!
//! One computation unit is one neighbor aggregation at one `(node, layer)`;
//! weight FLOPs are not counted. Communication is counted in bytes at a
//! configurable scalar width (8 by default).

use serde::{Deserialize, Serialize};

pub const DEFAULT_SCALAR_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: usize,
    pub comp_ops: u64,
    pub comm_bytes: u64,
    pub sync_events: u64,
    pub forward_passes: u64,
    pub backward_passes: u64,
}

/// One cross-client synchronization transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncEvent {
    pub round: usize,
    pub epoch: usize,
    pub client: usize,
    pub nodes: usize,
    pub bytes: u64,
}

/// Cumulative counters with a per-round breakdown. Charges are attributed
/// to the round set by [`CostLedger::begin_round`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostLedger {
    scalar_bytes: u64,
    current: usize,
    comp_ops: u64,
    comm_bytes: u64,
    forward_passes: u64,
    backward_passes: u64,
    rounds: Vec<RoundCost>,
    syncs: Vec<SyncEvent>,
}

impl Default for CostLedger {
    fn default() -> Self {
        Self::new(DEFAULT_SCALAR_BYTES)
    }
}

impl CostLedger {
    pub fn new(scalar_bytes: u64) -> Self {
        Self {
            scalar_bytes,
            current: 0,
            comp_ops: 0,
            comm_bytes: 0,
            forward_passes: 0,
            backward_passes: 0,
            rounds: vec![RoundCost::default()],
            syncs: Vec::new(),
        }
    }

    /// Empty ledger that attributes its charges to `round`; merged back with
    /// [`CostLedger::absorb`].
    pub fn scoped(&self, round: usize) -> Self {
        let mut child = Self::new(self.scalar_bytes);
        child.begin_round(round);
        child
    }

    pub fn scalar_bytes(&self) -> u64 {
        self.scalar_bytes
    }

    pub fn begin_round(&mut self, round: usize) {
        self.current = round;
        if self.slot_index(round).is_none() {
            self.rounds.push(RoundCost {
                round,
                ..RoundCost::default()
            });
            self.rounds.sort_by_key(|r| r.round);
        }
    }

    fn slot_index(&self, round: usize) -> Option<usize> {
        self.rounds.binary_search_by_key(&round, |r| r.round).ok()
    }

    fn slot(&mut self) -> &mut RoundCost {
        let i = self.slot_index(self.current).expect("current round has a slot");
        &mut self.rounds[i]
    }

    pub fn charge_compute(&mut self, units: u64) {
        self.comp_ops += units;
        self.slot().comp_ops += units;
    }

    pub fn charge_comm(&mut self, bytes: u64) {
        self.comm_bytes += bytes;
        self.slot().comm_bytes += bytes;
    }

    pub fn charge_forward_pass(&mut self) {
        self.forward_passes += 1;
        self.slot().forward_passes += 1;
    }

    pub fn charge_backward_pass(&mut self) {
        self.backward_passes += 1;
        self.slot().backward_passes += 1;
    }

    /// Logs a synchronization and charges its bytes.
    pub fn record_sync(&mut self, event: SyncEvent) {
        self.charge_comm(event.bytes);
        self.slot().sync_events += 1;
        self.syncs.push(event);
    }

    /// Folds another ledger's charges in, keeping their round attribution.
    pub fn absorb(&mut self, other: &CostLedger) {
        let current = self.current;
        for r in &other.rounds {
            self.begin_round(r.round);
            let slot = self.slot();
            slot.comp_ops += r.comp_ops;
            slot.comm_bytes += r.comm_bytes;
            slot.sync_events += r.sync_events;
            slot.forward_passes += r.forward_passes;
            slot.backward_passes += r.backward_passes;
        }
        self.current = current;
        self.comp_ops += other.comp_ops;
        self.comm_bytes += other.comm_bytes;
        self.forward_passes += other.forward_passes;
        self.backward_passes += other.backward_passes;
        self.syncs.extend_from_slice(&other.syncs);
    }

    pub fn comp_ops(&self) -> u64 {
        self.comp_ops
    }

    pub fn comm_bytes(&self) -> u64 {
        self.comm_bytes
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes
    }

    pub fn round(&self, round: usize) -> RoundCost {
        self.slot_index(round)
            .map(|i| self.rounds[i])
            .unwrap_or(RoundCost {
                round,
                ..RoundCost::default()
            })
    }

    pub fn rounds(&self) -> &[RoundCost] {
        &self.rounds
    }

    pub fn sync_trace(&self) -> &[SyncEvent] {
        &self.syncs
    }

    /// Per-round sums equal the cumulative totals.
    pub fn is_consistent(&self) -> bool {
        let sum = |f: fn(&RoundCost) -> u64| self.rounds.iter().map(f).sum::<u64>();
        sum(|r| r.comp_ops) == self.comp_ops
            && sum(|r| r.comm_bytes) == self.comm_bytes
            && sum(|r| r.forward_passes) == self.forward_passes
            && sum(|r| r.backward_passes) == self.backward_passes
            && sum(|r| r.sync_events) == self.syncs.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charges_attributed_to_round() {
        let mut l = CostLedger::default();
        l.begin_round(1);
        l.charge_compute(10);
        l.charge_comm(64);
        l.begin_round(2);
        l.charge_compute(0);
        l.charge_comm(8);
        assert_eq!(l.round(1).comp_ops, 10);
        assert_eq!(l.round(2).comp_ops, 0);
        assert_eq!(l.comm_bytes(), 72);
        assert!(l.is_consistent());
    }

    #[test]
    fn zero_charge_leaves_ledger_unchanged() {
        let mut l = CostLedger::default();
        let before = l.clone();
        l.charge_compute(0);
        l.charge_comm(0);
        assert_eq!(l, before);
    }

    #[test]
    fn absorb_keeps_rounds_and_totals() {
        let mut main = CostLedger::default();
        main.begin_round(3);
        let mut child = main.scoped(3);
        child.charge_compute(5);
        child.record_sync(SyncEvent {
            round: 3,
            epoch: 0,
            client: 1,
            nodes: 2,
            bytes: 512,
        });
        main.absorb(&child);
        main.absorb(&child);
        assert_eq!(main.round(3).comp_ops, 10);
        assert_eq!(main.round(3).sync_events, 2);
        assert_eq!(main.comm_bytes(), 1024);
        assert_eq!(main.sync_trace().len(), 2);
        assert!(main.is_consistent());
    }
}
