//! Loss-difference importance scores and weighted batch selection.
//!
//! Each client keeps the per-node training loss observed at its previous
//! participation. When it receives a new global model it evaluates the
//! losses again (one forward pass, no backward pass) and sets
//!
//! ```text
//! p_v = |f_new(v) - f_prev(v)| / sum_u |f_new(u) - f_prev(u)|
//! ```
//!
//! falling back to the uniform distribution on the first call or when
//! every difference is zero.
//!
//! Batches are drawn without replacement with the Efraimidis–Spirakis key
//! method: node `v` with `p_v > 0` gets key `ln(u_v) / p_v` with
//! `u_v ~ U(0, 1]` drawn in node order from a `ChaCha8Rng` seeded with the
//! batch seed, and the `k` largest keys win (ties to the lower node id).
//! This is successive sampling proportional to `p`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Loss-difference importance scores.
    Importance,
    /// Probabilities stay uniform.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    kind: SamplerKind,
    nodes: Vec<usize>,
    prev_loss: Option<Vec<f64>>,
    delta: Vec<f64>,
    probs: Vec<f64>,
    ratio: f64,
}

impl SamplerState {
    /// State over a client's training nodes, starting uniform.
    pub fn new(kind: SamplerKind, nodes: &[usize], ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::param(format!("sampling ratio must lie in (0, 1], got {ratio}")));
        }
        let n = nodes.len();
        Ok(Self {
            kind,
            nodes: nodes.to_vec(),
            prev_loss: None,
            delta: vec![0.0; n],
            probs: vec![1.0 / n as f64; n],
            ratio,
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn deltas(&self) -> &[f64] {
        &self.delta
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn previous_losses(&self) -> Option<&[f64]> {
        self.prev_loss.as_deref()
    }

    fn set_uniform(&mut self) {
        let n = self.nodes.len();
        self.probs.iter_mut().for_each(|p| *p = 1.0 / n as f64);
    }

    /// Feeds the per-node losses (in `nodes()` order) under the newly
    /// received model.
    pub fn update_probabilities(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.nodes.len() {
            return Err(Error::param(format!(
                "{} losses for {} nodes",
                losses.len(),
                self.nodes.len()
            )));
        }
        if losses.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                round: 0,
                epoch: 0,
                what: "non-finite per-node loss in probability update".into(),
            });
        }
        if let Some(prev) = &self.prev_loss {
            for ((d, new), old) in self.delta.iter_mut().zip(losses).zip(prev) {
                *d = (new - old).abs();
            }
        }
        self.prev_loss = Some(losses.to_vec());
        match self.kind {
            SamplerKind::Uniform => self.set_uniform(),
            SamplerKind::Importance => {
                let total: f64 = self.delta.iter().sum();
                if total > 0.0 {
                    for (p, d) in self.probs.iter_mut().zip(&self.delta) {
                        *p = d / total;
                    }
                } else {
                    self.set_uniform();
                }
            }
        }
        Ok(())
    }

    /// Draws `size` distinct nodes; result is sorted by node id.
    pub fn sample_batch(&self, size: usize, seed: u64) -> Result<Vec<usize>> {
        weighted_sample(&self.nodes, &self.probs, size, seed)
    }

    /// `ceil(n_k * r / batches)`, at least 1 and at most `n_k`.
    pub fn batch_size(&self, batches_per_round: usize) -> usize {
        batch_size(self.nodes.len(), self.ratio, batches_per_round)
    }
}

pub fn batch_size(n: usize, ratio: f64, batches_per_round: usize) -> usize {
    let raw = (n as f64 * ratio / batches_per_round.max(1) as f64).ceil() as usize;
    raw.clamp(1, n.max(1))
}

/// Efraimidis–Spirakis weighted sampling without replacement. If fewer than
/// `size` items carry positive weight, the remainder is filled uniformly
/// from the zero-weight items.
pub fn weighted_sample(items: &[usize], weights: &[f64], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size > items.len() {
        return Err(Error::param(format!(
            "batch size {size} outside 1..={}",
            items.len()
        )));
    }
    let mut rng = rng_for(seed, &[tag::BATCH]);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(items.len());
    let mut zero: Vec<usize> = Vec::new();
    for (&item, &w) in items.iter().zip(weights) {
        let u: f64 = 1.0 - rng.random::<f64>();
        if w > 0.0 {
            keyed.push((u.ln() / w, item));
        } else {
            zero.push(item);
        }
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed.iter().take(size).map(|&(_, v)| v).collect();
    if picked.len() < size {
        log::debug!(
            "only {} positive-probability nodes for a batch of {size}; filling uniformly",
            picked.len()
        );
        zero.shuffle(&mut rng);
        picked.extend(zero.into_iter().take(size - picked.len()));
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_update_stays_uniform() {
        let mut s = SamplerState::new(SamplerKind::Importance, &[4, 7, 9], 0.7).unwrap();
        s.update_probabilities(&[1.0, 5.0, 2.0]).unwrap();
        assert_eq!(s.probabilities(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn deltas_normalize() {
        let mut s = SamplerState::new(SamplerKind::Importance, &[0, 1, 2], 1.0).unwrap();
        s.update_probabilities(&[1.0, 1.0, 1.0]).unwrap();
        s.update_probabilities(&[3.0, 0.0, 2.0]).unwrap();
        assert_eq!(s.deltas(), &[2.0, 1.0, 1.0]);
        assert_eq!(s.probabilities(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn equal_and_zero_deltas_are_uniform() {
        let mut s = SamplerState::new(SamplerKind::Importance, &[0, 1, 2, 3], 1.0).unwrap();
        s.update_probabilities(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        s.update_probabilities(&[1.5, 2.5, 3.5, 4.5]).unwrap();
        assert!(s.probabilities().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        s.update_probabilities(&[1.5, 2.5, 3.5, 4.5]).unwrap();
        assert_eq!(s.probabilities(), &[0.25; 4]);
    }

    #[test]
    fn nan_loss_rejected() {
        let mut s = SamplerState::new(SamplerKind::Importance, &[0, 1], 1.0).unwrap();
        assert!(matches!(
            s.update_probabilities(&[f64::NAN, 1.0]),
            Err(Error::Numeric { .. })
        ));
        assert!(s.update_probabilities(&[1.0]).is_err());
    }

    #[test]
    fn full_batch_returns_everything() {
        let s = SamplerState::new(SamplerKind::Importance, &[3, 1, 8], 1.0).unwrap();
        assert_eq!(s.batch_size(1), 3);
        assert_eq!(s.sample_batch(3, 42).unwrap(), vec![1, 3, 8]);
    }

    #[test]
    fn one_hot_always_picks_the_mass() {
        for seed in 0..50 {
            let b = weighted_sample(&[10, 11, 12], &[0.0, 1.0, 0.0], 1, seed).unwrap();
            assert_eq!(b, vec![11]);
        }
    }

    #[test]
    fn zero_mass_fill_is_logged_not_fatal() {
        let b = weighted_sample(&[10, 11, 12, 13], &[0.0, 1.0, 0.0, 0.0], 3, 7).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.contains(&11));
    }

    #[test]
    fn batch_size_bounds() {
        assert_eq!(batch_size(100, 0.7, 10), 7);
        assert_eq!(batch_size(5, 0.7, 10), 1);
        assert_eq!(batch_size(7, 1.0, 1), 7);
        assert!(weighted_sample(&[1, 2], &[0.5, 0.5], 0, 1).is_err());
        assert!(weighted_sample(&[1, 2], &[0.5, 0.5], 3, 1).is_err());
        assert!(SamplerState::new(SamplerKind::Uniform, &[1], 0.0).is_err());
    }
}
