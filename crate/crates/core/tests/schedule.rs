mod common;

use proptest::prelude::*;

use common::golden_section;
use fedais::schedule::{
    best_integer_tau, check_convergence_conditions, error_bound, error_bound_continuous, practical_tau,
    round_runtime, theoretical_tau, BoundInputs, DelayModel, SyncMode, SyncSchedule,
};

fn inputs() -> BoundInputs {
    BoundInputs { f0: 2.0, f_inf: 0.1, eta: 0.01, lambda: 2.0, zeta2: 0.5 }
}

fn delay() -> DelayModel {
    DelayModel { compute: 1.0, sync_delay: 10.0, bandwidth: 1.0, total_runtime: 1.0e4 }
}

fn star(i: &BoundInputs, d: &DelayModel) -> f64 {
    theoretical_tau(i.f0, i.f_inf, d.sync_delay, i.eta, d.total_runtime, i.lambda, i.zeta2).unwrap()
}

#[test]
fn bound_terms_by_hand() {
    let b = error_bound(&inputs(), 4, &delay()).unwrap();
    let runtime = 2.0 * 1.9 / (0.01 * 1.0e4) * (1.0 + 10.0 / 4.0);
    let noise = 0.01f64.powi(2) * 4.0 * 0.5 * 3.0;
    assert!((b.runtime_term - runtime).abs() < 1e-15);
    assert!((b.noise_term - noise).abs() < 1e-18);
    assert!((b.value - runtime - noise).abs() < 1e-15);
}

#[test]
fn continuous_minimizer_beats_neighbors() {
    let (i, d) = (inputs(), delay());
    let t = star(&i, &d);
    let at = |x: f64| error_bound_continuous(&i, x, &d).unwrap().value;
    assert!(at(t) <= at(t * 1.01) && at(t) <= at(t * 0.99));
    assert!((golden_section(at, 1.0, 1e4, 1e-12) - t).abs() / t < 1e-4);
}

#[test]
fn best_integer_is_the_better_rounding() {
    let (i, d) = (inputs(), delay());
    let t = star(&i, &d);
    let best = best_integer_tau(&i, &d, t).unwrap();
    let grid = (1..=1000).min_by(|&a, &b| {
        error_bound(&i, a, &d).unwrap().value.total_cmp(&error_bound(&i, b, &d).unwrap().value)
    });
    assert_eq!(Some(best), grid);
}

#[test]
fn sync_free_delay_makes_interval_undefined() {
    let i = inputs();
    assert!(theoretical_tau(i.f0, i.f_inf, 0.0, i.eta, 1e4, i.lambda, i.zeta2).is_err());
    assert!(theoretical_tau(i.f_inf, i.f_inf, 10.0, i.eta, 1e4, i.lambda, i.zeta2).is_err());
    assert!(error_bound_continuous(&i, 0.5, &delay()).is_err());
}

#[test]
fn runtime_per_epoch() {
    let d = delay();
    assert_eq!(round_runtime(&d, 5, SyncMode::Full), 11.0);
    assert_eq!(round_runtime(&d, 5, SyncMode::Periodic), 3.0);
    assert_eq!(round_runtime(&d, 0, SyncMode::Periodic), 11.0);
}

#[test]
fn schedule_starts_at_tau0_and_rejects_replays() {
    let mut s = SyncSchedule::new(4, 1.6).unwrap();
    assert_eq!(s.current(), 4);
    assert_eq!(s.interval_for(1.6).unwrap(), 4);
    assert_eq!(s.update(1, 0.4).unwrap(), 2);
    assert!(s.update(1, 0.3).is_err());
    assert_eq!(s.history().len(), 2);
    assert!(SyncSchedule::new(0, 1.0).is_err());
    assert!(SyncSchedule::new(2, 0.0).is_err());
}

#[test]
fn constant_step_series() {
    let etas = vec![0.01; 100];
    let taus: Vec<usize> = (0..100).map(|r| 1 + (100 - r) / 25).collect();
    let report = check_convergence_conditions(&etas, &taus).unwrap();
    assert!(report.constant_eta);
    assert_eq!(report.max_tau, 5);
    let expect: f64 = taus.iter().map(|&t| 0.01 * t as f64).sum();
    assert!((report.sum_eta_tau - expect).abs() < 1e-12);
}

proptest! {
    #[test]
    fn theoretical_tau_matches_golden_section(
        f0 in 0.5f64..3.0,
        eta_exp in -3.0f64..-1.0,
        lambda in 0.1f64..20.0,
        zeta2 in 0.01f64..10.0,
        o in 0.5f64..50.0,
        c_total_exp in 2.0f64..5.0,
    ) {
        let i = BoundInputs { f0, f_inf: 0.0, eta: 10f64.powf(eta_exp), lambda, zeta2 };
        let d = DelayModel { compute: 1.0, sync_delay: o, bandwidth: 1.0, total_runtime: 10f64.powf(c_total_exp) };
        let t = star(&i, &d);
        prop_assume!((1.5..=1e4).contains(&t));
        let gs = golden_section(|x| error_bound_continuous(&i, x.exp(), &d).unwrap().value, 0.0, 1e6f64.ln(), 1e-10).exp();
        prop_assert!((gs - t).abs() / t < 0.01);
    }

    #[test]
    fn practical_tau_is_monotone(
        f0 in 0.01f64..10.0,
        tau0 in 1usize..20,
        factors in prop::collection::vec(0.0f64..=1.0, 1..40),
    ) {
        prop_assert_eq!(practical_tau(f0, f0, tau0).unwrap(), tau0);
        let mut f = f0;
        let mut prev = tau0;
        for x in factors {
            f *= x;
            let t = practical_tau(f, f0, tau0).unwrap();
            prop_assert!(t <= prev && t >= 1);
            prev = t;
        }
    }

    #[test]
    fn bound_is_convex_in_tau(tau in 2usize..500) {
        // runtime term is convex in tau and the noise term linear
        let (i, d) = (inputs(), delay());
        let b = |t: usize| error_bound(&i, t, &d).unwrap().value;
        prop_assert!(b(tau - 1) + b(tau + 1) - 2.0 * b(tau) >= -1e-15);
    }
}
