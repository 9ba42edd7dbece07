//! Adaptive synchronization interval.
//!
//! Under a constant per-epoch compute time `c` and per-sync delay `o`, a
//! round with synchronization every `tau` epochs costs `c + o / tau` per
//! epoch on average. The optimization error after a runtime budget
//! `c_total` is bounded by
//!
//! ```text
//! 2 (F0 - F_inf) / (eta c_total) * (c + o / tau) + eta^2 lambda^2 zeta^2 (tau - 1)
//! ```
//!
//! whose continuous minimizer is
//! `tau* = sqrt(2 (F_t - F_inf) o / (eta^3 c_total lambda^2 zeta^2))`.
//! Training uses the constant-free rule `tau_t = ceil(sqrt(F_t / F_0) tau_0)`,
//! clamped to at least one epoch.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    /// Local compute time per epoch.
    pub compute: f64,
    /// Delay of one synchronization.
    pub sync_delay: f64,
    /// Bytes per time unit, used to turn ledger bytes into transfer time.
    pub bandwidth: f64,
    /// Runtime budget `c_total`.
    pub total_runtime: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            compute: 1.0,
            sync_delay: 10.0,
            bandwidth: 1.0e6,
            total_runtime: 1.0e4,
        }
    }
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.compute > 0.0) || !(self.sync_delay >= 0.0) || !(self.bandwidth > 0.0) {
            return Err(Error::param(format!(
                "delay model needs compute > 0, sync_delay >= 0, bandwidth > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    /// Synchronize every epoch.
    Full,
    /// Synchronize every `tau` epochs.
    Periodic,
}

/// Per-epoch time: `c + o` for full synchronization, `c + o / tau` for
/// periodic.
pub fn round_runtime(model: &DelayModel, tau: usize, mode: SyncMode) -> f64 {
    let tau = tau.max(1) as f64;
    match mode {
        SyncMode::Full => model.compute + model.sync_delay,
        SyncMode::Periodic => model.compute + model.sync_delay / tau,
    }
}

/// Constants of the error bound besides the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub f0: f64,
    pub f_inf: f64,
    pub eta: f64,
    pub lambda: f64,
    pub zeta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorBound {
    pub value: f64,
    pub runtime_term: f64,
    pub noise_term: f64,
    /// `eta lambda + eta^2 lambda^2 tau (tau - 1) <= 1`
    pub lr_condition_holds: bool,
}

fn bound_terms(inputs: &BoundInputs, tau: f64, model: &DelayModel) -> (f64, f64) {
    let BoundInputs { f0, f_inf, eta, lambda, zeta2 } = *inputs;
    let runtime = 2.0 * (f0 - f_inf) / (eta * model.total_runtime)
        * (model.compute + model.sync_delay / tau);
    let noise = eta * eta * lambda * lambda * zeta2 * (tau - 1.0);
    (runtime, noise)
}

/// Error bound at a real-valued interval `tau >= 1`.
pub fn error_bound_continuous(inputs: &BoundInputs, tau: f64, model: &DelayModel) -> Result<ErrorBound> {
    if !(model.total_runtime > 0.0) {
        return Err(Error::param("total runtime must be positive"));
    }
    let BoundInputs { eta, lambda, zeta2, .. } = *inputs;
    if !(eta > 0.0 && lambda > 0.0 && zeta2 > 0.0) {
        return Err(Error::param("eta, lambda and zeta2 must be positive"));
    }
    if !(tau >= 1.0) {
        return Err(Error::param(format!("tau must be at least 1, got {tau}")));
    }
    let (runtime_term, noise_term) = bound_terms(inputs, tau, model);
    let el = eta * lambda;
    Ok(ErrorBound {
        value: runtime_term + noise_term,
        runtime_term,
        noise_term,
        lr_condition_holds: el + el * el * tau * (tau - 1.0) <= 1.0,
    })
}

pub fn error_bound(inputs: &BoundInputs, tau: usize, model: &DelayModel) -> Result<ErrorBound> {
    error_bound_continuous(inputs, tau as f64, model)
}

/// Unrounded minimizer of the error bound at objective value `f_t`.
pub fn theoretical_tau(
    f_t: f64,
    f_inf: f64,
    sync_delay: f64,
    eta: f64,
    total_runtime: f64,
    lambda: f64,
    zeta2: f64,
) -> Result<f64> {
    let num = 2.0 * (f_t - f_inf) * sync_delay;
    let den = eta.powi(3) * total_runtime * lambda * lambda * zeta2;
    if !(num > 0.0 && den > 0.0) || !(num / den).is_finite() {
        return Err(Error::param(format!(
            "optimal interval undefined: numerator {num}, denominator {den}"
        )));
    }
    Ok((num / den).sqrt())
}

/// Integer interval with the smaller bound among the floor and ceiling of
/// the continuous minimizer (clamped to 1).
pub fn best_integer_tau(inputs: &BoundInputs, model: &DelayModel, tau_star: f64) -> Result<usize> {
    let lo = (tau_star.floor() as usize).max(1);
    let hi = (tau_star.ceil() as usize).max(1);
    let b_lo = error_bound(inputs, lo, model)?.value;
    let b_hi = error_bound(inputs, hi, model)?.value;
    Ok(if b_hi < b_lo { hi } else { lo })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub round: usize,
    pub objective: f64,
    pub tau: usize,
}

/// Server-side interval state driven by the test loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncSchedule {
    tau0: usize,
    tau: usize,
    f0: f64,
    history: Vec<ScheduleEntry>,
}

impl SyncSchedule {
    pub fn new(tau0: usize, f0: f64) -> Result<Self> {
        if tau0 == 0 {
            return Err(Error::param("tau_0 must be at least 1"));
        }
        if !(f0 > 0.0 && f0.is_finite()) {
            return Err(Error::param(format!("initial objective must be positive, got {f0}")));
        }
        Ok(Self {
            tau0,
            tau: tau0,
            f0,
            history: vec![ScheduleEntry {
                round: 0,
                objective: f0,
                tau: tau0,
            }],
        })
    }

    pub fn tau0(&self) -> usize {
        self.tau0
    }

    pub fn current(&self) -> usize {
        self.tau
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn history(&self) -> &[ScheduleEntry] {
        &self.history
    }

    /// `ceil(sqrt(F_t / F_0) tau_0)`, at least 1.
    pub fn interval_for(&self, f_t: f64) -> Result<usize> {
        practical_tau(f_t, self.f0, self.tau0)
    }

    /// Computes the interval for the next round from the objective observed
    /// after `round` and appends it to the history.
    pub fn update(&mut self, round: usize, f_t: f64) -> Result<usize> {
        if let Some(last) = self.history.last() {
            if round <= last.round {
                return Err(Error::param(format!(
                    "schedule round {round} does not follow {}",
                    last.round
                )));
            }
        }
        self.tau = self.interval_for(f_t)?;
        self.history.push(ScheduleEntry {
            round,
            objective: f_t,
            tau: self.tau,
        });
        Ok(self.tau)
    }

    /// Appends an externally fixed interval (for fixed-period baselines).
    pub fn record_fixed(&mut self, round: usize, f_t: f64, tau: usize) {
        self.tau = tau.max(1);
        self.history.push(ScheduleEntry {
            round,
            objective: f_t,
            tau: self.tau,
        });
    }

    /// CSV with columns `round,objective,tau,runtime_term,noise_term`. The
    /// bound terms are filled when `bound` is given, empty otherwise.
    pub fn export_csv(
        &self,
        path: impl AsRef<Path>,
        bound: Option<(&BoundInputs, &DelayModel)>,
    ) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("round,objective,tau,runtime_term,noise_term\n");
        for e in &self.history {
            let terms = match bound {
                Some((inputs, model)) => {
                    let b = error_bound(&BoundInputs { f0: e.objective, ..*inputs }, e.tau, model)?;
                    format!("{},{}", b.runtime_term, b.noise_term)
                }
                None => ",".to_string(),
            };
            out.push_str(&format!("{},{},{},{}\n", e.round, e.objective, e.tau, terms));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn practical_tau(f_t: f64, f0: f64, tau0: usize) -> Result<usize> {
    if !(f0 > 0.0) {
        return Err(Error::param("initial objective F_0 must be positive"));
    }
    if !(f_t >= 0.0 && f_t.is_finite()) {
        return Err(Error::param(format!("objective must be finite and non-negative, got {f_t}")));
    }
    let raw = ((f_t / f0).sqrt() * tau0 as f64).ceil();
    Ok((raw as usize).max(1))
}

/// Partial sums of the step-size/interval series over a finite horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rounds: usize,
    /// sum eta_r tau_r (should grow without bound)
    pub sum_eta_tau: f64,
    /// sum eta_r^2 tau_r (should stay bounded)
    pub sum_eta2_tau: f64,
    /// sum eta_r^3 tau_r^2 (should stay bounded)
    pub sum_eta3_tau2: f64,
    pub constant_eta: bool,
    pub max_tau: usize,
}

pub fn check_convergence_conditions(etas: &[f64], taus: &[usize]) -> Result<ConvergenceReport> {
    if etas.len() != taus.len() {
        return Err(Error::param(format!(
            "{} learning rates for {} intervals",
            etas.len(),
            taus.len()
        )));
    }
    let mut report = ConvergenceReport {
        rounds: etas.len(),
        sum_eta_tau: 0.0,
        sum_eta2_tau: 0.0,
        sum_eta3_tau2: 0.0,
        constant_eta: etas.windows(2).all(|w| w[0] == w[1]),
        max_tau: taus.iter().copied().max().unwrap_or(0),
    };
    for (&eta, &tau) in etas.iter().zip(taus) {
        let t = tau as f64;
        report.sum_eta_tau += eta * t;
        report.sum_eta2_tau += eta * eta * t;
        report.sum_eta3_tau2 += eta.powi(3) * t * t;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runtime_examples() {
        let m = DelayModel { compute: 1.0, sync_delay: 10.0, ..DelayModel::default() };
        assert_eq!(round_runtime(&m, 1, SyncMode::Full), 11.0);
        assert_eq!(round_runtime(&m, 1, SyncMode::Periodic), 11.0);
        assert_eq!(round_runtime(&m, 5, SyncMode::Periodic), 3.0);
        let mut last = f64::INFINITY;
        for tau in 1..50 {
            let t = round_runtime(&m, tau, SyncMode::Periodic);
            assert!(t <= last);
            last = t;
        }
    }

    #[test]
    fn bound_at_tau_one_has_no_noise() {
        let m = DelayModel { compute: 2.0, sync_delay: 3.0, bandwidth: 1.0, total_runtime: 100.0 };
        let inputs = BoundInputs { f0: 2.5, f_inf: 0.5, eta: 0.01, lambda: 4.0, zeta2: 0.3 };
        let b = error_bound(&inputs, 1, &m).unwrap();
        assert_eq!(b.noise_term, 0.0);
        let expected = 2.0 * (2.5 - 0.5) * (2.0 + 3.0) / (0.01 * 100.0);
        assert!((b.value - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn no_sync_delay_favors_tau_one() {
        let m = DelayModel { sync_delay: 0.0, ..DelayModel::default() };
        let inputs = BoundInputs { f0: 1.0, f_inf: 0.0, eta: 0.01, lambda: 2.0, zeta2: 1.0 };
        let b1 = error_bound(&inputs, 1, &m).unwrap().value;
        for tau in 2..20 {
            assert!(error_bound(&inputs, tau, &m).unwrap().value > b1);
        }
    }

    #[test]
    fn bound_rejects_bad_inputs() {
        let inputs = BoundInputs { f0: 1.0, f_inf: 0.0, eta: 0.01, lambda: 2.0, zeta2: 1.0 };
        let m = DelayModel { total_runtime: 0.0, ..DelayModel::default() };
        assert!(error_bound(&inputs, 1, &m).is_err());
        assert!(error_bound(&BoundInputs { eta: 0.0, ..inputs }, 1, &DelayModel::default()).is_err());
    }

    #[test]
    fn lr_condition_flag() {
        let m = DelayModel::default();
        let ok = BoundInputs { f0: 1.0, f_inf: 0.0, eta: 0.001, lambda: 1.0, zeta2: 1.0 };
        assert!(error_bound(&ok, 3, &m).unwrap().lr_condition_holds);
        let bad = BoundInputs { eta: 0.5, lambda: 4.0, ..ok };
        assert!(!error_bound(&bad, 3, &m).unwrap().lr_condition_holds);
    }

    #[test]
    fn theoretical_tau_scales_with_sqrt_delay() {
        let a = theoretical_tau(2.0, 0.0, 1.0, 0.01, 1e4, 3.0, 0.5).unwrap();
        let b = theoretical_tau(2.0, 0.0, 4.0, 0.01, 1e4, 3.0, 0.5).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
        assert!(theoretical_tau(1.0, 1.0, 1.0, 0.01, 1e4, 3.0, 0.5).is_err());
    }

    #[test]
    fn practical_tau_examples() {
        assert_eq!(practical_tau(3.0, 3.0, 2).unwrap(), 2);
        assert_eq!(practical_tau(0.25, 1.0, 2).unwrap(), 1);
        assert_eq!(practical_tau(0.0, 1.0, 2).unwrap(), 1);
        assert!(practical_tau(1.0, 0.0, 2).is_err());
        assert!(SyncSchedule::new(2, 0.0).is_err());
    }

    #[test]
    fn schedule_history_is_ordered() {
        let mut s = SyncSchedule::new(4, 2.0).unwrap();
        assert_eq!(s.update(1, 2.0).unwrap(), 4);
        assert_eq!(s.update(2, 0.5).unwrap(), 2);
        assert!(s.update(2, 0.4).is_err());
        assert_eq!(s.history().len(), 3);
    }

    #[test]
    fn convergence_sums_constant_case() {
        let r = check_convergence_conditions(&[0.1; 5], &[3; 5]).unwrap();
        assert!((r.sum_eta_tau - 0.1 * 5.0 * 3.0).abs() < 1e-12);
        assert!((r.sum_eta2_tau - 0.01 * 5.0 * 3.0).abs() < 1e-12);
        assert!((r.sum_eta3_tau2 - 0.001 * 5.0 * 9.0).abs() < 1e-12);
        assert!(r.constant_eta);
        assert_eq!(r, check_convergence_conditions(&[0.1; 5], &[3; 5]).unwrap());
    }

    #[test]
    fn decreasing_taus_are_dominated() {
        let c = check_convergence_conditions(&[0.05; 4], &[4; 4]).unwrap();
        let d = check_convergence_conditions(&[0.05; 4], &[4, 3, 2, 1]).unwrap();
        assert!(d.sum_eta2_tau <= c.sum_eta2_tau);
        assert!(d.sum_eta3_tau2 <= c.sum_eta3_tau2);
        assert!(check_convergence_conditions(&[0.1], &[]).is_err());
    }
}
