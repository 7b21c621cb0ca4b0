use std::time::Instant;

use odenorm::solver::{integrate, steps_for_budget};
use odenorm::{Result, Scheme, SolverSpec, Tensor};
use proptest::prelude::*;

const Z0: f64 = 0.8;

fn forced(z: &Tensor, t: f64) -> Result<Tensor> {
    Ok(z.map(|v| -2.0 * v + t.sin()))
}

fn exact(t: f64) -> f64 {
    (Z0 + 0.2) * (-2.0 * t).exp() + (2.0 * t.sin() - t.cos()) / 5.0
}

fn solve(scheme: Scheme, n_evals: usize) -> f64 {
    let spec = SolverSpec::new(scheme, n_evals).unwrap();
    integrate(forced, &Tensor::from_vec(vec![Z0]), 0.0, 1.0, spec).unwrap().0.data()[0]
}

/// Least-squares slope of log(error) against log(h).
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[test]
fn reference_agrees_with_closed_form() {
    let r = solve(Scheme::Rk4, 4096);
    assert!((r - exact(1.0)).abs() < 1e-12, "{:e}", r - exact(1.0));
}

#[test]
fn convergence_orders() {
    let started = Instant::now();
    let reference = solve(Scheme::Rk4, 4096);
    for (scheme, steps, expected) in [
        (Scheme::Euler, [16, 32, 64, 128], 1.0),
        (Scheme::Rk2, [8, 16, 32, 64], 2.0),
        (Scheme::Rk4, [4, 8, 16, 32], 4.0),
    ] {
        let pts: Vec<(f64, f64)> = steps
            .iter()
            .map(|&s| (1.0 / s as f64, (solve(scheme, s * scheme.evals_per_step()) - reference).abs()))
            .collect();
        let p = slope(&pts);
        assert!((p - expected).abs() < 0.3, "{scheme}: slope {p}");
    }
    assert!(started.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn budget_examples() {
    assert_eq!(steps_for_budget(Scheme::Euler, 8).unwrap(), 8);
    assert_eq!(steps_for_budget(Scheme::Rk2, 8).unwrap(), 4);
    assert_eq!(steps_for_budget(Scheme::Rk4, 8).unwrap(), 2);
}

#[test]
fn trajectory_covers_interval() {
    for scheme in Scheme::ALL {
        let spec = SolverSpec::new(scheme, 16).unwrap();
        let (z1, tr) = integrate(forced, &Tensor::from_vec(vec![Z0]), 0.0, 0.7, spec).unwrap();
        assert_eq!(tr.times.len(), spec.n_steps() + 1);
        assert_eq!(tr.times.first(), Some(&0.0));
        assert_eq!(tr.times.last(), Some(&0.7));
        assert_eq!(tr.states.last(), Some(&z1));
    }
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![Just(Scheme::Euler), Just(Scheme::Rk2), Just(Scheme::Rk4)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_dynamics_give_linear_flow(
        s in scheme(),
        steps in 1usize..12,
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        alpha in -2.0f64..2.0,
    ) {
        let spec = SolverSpec::new(s, steps * s.evals_per_step()).unwrap();
        let m = Tensor::new([2, 2], vec![-1.0, 0.5, -0.3, 0.2]).unwrap();
        let rhs = |z: &Tensor, _t: f64| z.reshape([2, 2])?.matmul(&m)?.reshape([4]);
        let flow = |z: Vec<f64>| integrate(rhs, &Tensor::from_vec(z), 0.0, 1.0, spec).unwrap().0;
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let lhs = flow(combo);
        let rhs_sum = flow(a).scale(alpha).add(&flow(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs_sum).unwrap() < 1e-12);
    }

    #[test]
    fn repeat_solves_are_bitwise_equal(s in scheme(), steps in 1usize..20, z0 in -3.0f64..3.0) {
        let spec = SolverSpec::new(s, steps * s.evals_per_step()).unwrap();
        let run = || integrate(forced, &Tensor::from_vec(vec![z0]), 0.0, 1.0, spec).unwrap().0.data()[0].to_bits();
        prop_assert_eq!(run(), run());
    }
}
