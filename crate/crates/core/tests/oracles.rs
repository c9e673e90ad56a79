//! Cross-checks of the solver and simulator against independent oracles.

use emfg::meanfield::{solve_consistency, SolverConfig};
use emfg::model::{PopulationSpec, SubpopParams};
use emfg::nalgebra::{DMatrix, DVector};
use emfg::numerics::TimeGrid;
use emfg::simulator::{simulate_population, simulate_representatives, CostMode, Mode, SimConfig};
use emfg::Exec;
use proptest::prelude::*;

fn noisy_scalar() -> PopulationSpec {
    let mut p = SubpopParams::scalar(-0.2, 1.0, 1.0, 1.0, 0.0);
    p.d = DMatrix::from_element(1, 1, 0.3);
    p.lambda_explore = 0.2;
    PopulationSpec::single(p, 0.5, DVector::from_element(1, 1.0))
}

/// Discounted value function of the classical scalar problem by
/// semi-Lagrangian value iteration on a state grid. Three-point
/// Gauss-Hermite for the Brownian increment, golden section over the control.
struct ValueIteration {
    lo: f64,
    step: f64,
    v: Vec<f64>,
}

impl ValueIteration {
    fn interp(&self, x: f64) -> f64 {
        let n = self.v.len();
        let s = ((x - self.lo) / self.step).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let w = s - i as f64;
        self.v[i] * (1.0 - w) + self.v[i + 1] * w
    }

    fn solve(a: f64, b: f64, q: f64, r: f64, d: f64, rho: f64) -> Self {
        let (lo, hi, nodes, dt) = (-4.0, 4.0, 801, 0.01);
        let step = (hi - lo) / (nodes - 1) as f64;
        let mut vi = ValueIteration { lo, step, v: vec![0.0; nodes] };
        let beta = (-rho * dt).exp();
        let spread = d * (3.0 * dt).sqrt();
        let golden = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..20_000 {
            let next: Vec<f64> = (0..nodes)
                .map(|j| {
                    let x = lo + j as f64 * step;
                    let q_val = |u: f64| {
                        let drift = x + (a * x + b * u) * dt;
                        let cont = (vi.interp(drift - spread) + 4.0 * vi.interp(drift) + vi.interp(drift + spread)) / 6.0;
                        0.5 * (q * x * x + r * u * u) * dt + beta * cont
                    };
                    let (mut l, mut h) = (-10.0, 10.0);
                    for _ in 0..60 {
                        let m1 = h - golden * (h - l);
                        let m2 = l + golden * (h - l);
                        if q_val(m1) < q_val(m2) {
                            h = m2;
                        } else {
                            l = m1;
                        }
                    }
                    q_val(0.5 * (l + h))
                })
                .collect();
            let change = next.iter().zip(&vi.v).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
            vi.v = next;
            if change < 1e-10 {
                break;
            }
        }
        vi
    }
}

#[test]
fn value_iteration_agrees_with_riccati_and_simulation() {
    let spec = noisy_scalar();
    let p = &spec.subpops[0];
    let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
    let pi = mf.pi[0].pi[(0, 0)];
    let d = p.d[(0, 0)];
    let closed_form = 0.5 * pi + d * d * pi / (2.0 * spec.rho);

    let dp = ValueIteration::solve(p.a[(0, 0)], 1.0, 1.0, 1.0, d, spec.rho);
    let dp_value = dp.interp(1.0);
    assert!((dp_value - closed_form).abs() < 0.02 * closed_form, "dp {dp_value} vs {closed_form}");

    let grid = TimeGrid::with_step(40.0, 0.01).unwrap();
    let batch = simulate_representatives(&spec, &mf, &SimConfig::new(vec![4000], grid, 3, Mode::Classical)).unwrap();
    let est = batch.cost_estimate(0, CostMode::Classical, 1e-4).unwrap();
    assert!(
        (est.mean - dp_value).abs() < 3.0 * est.std_err + 0.02 * closed_form,
        "simulated {} ± {} vs dp {dp_value}",
        est.mean,
        est.std_err
    );
}

#[test]
fn exploratory_mean_cost_matches_classical_value_plus_spread() {
    // Sampling from N(mean, lambda R^-1) costs an extra m lambda / 2 per unit
    // time, so m lambda / (2 rho) after discounting.
    let spec = noisy_scalar();
    let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
    let grid = TimeGrid::with_step(40.0, 0.01).unwrap();
    let config = SimConfig::new(vec![4000], grid, 9, Mode::Exploratory);
    let batch = simulate_representatives(&spec, &mf, &config).unwrap();
    let classical = simulate_representatives(&spec, &mf, &SimConfig::new(vec![4000], grid, 9, Mode::Classical)).unwrap();
    let diffs: Vec<f64> = (0..4000)
        .map(|i| batch.cost(i, CostMode::NoEntropy) - classical.cost(i, CostMode::Classical))
        .collect();
    let (mean, se) = emfg::numerics::mean_and_se(&diffs);
    let expected = spec.subpops[0].lambda_explore / (2.0 * spec.rho);
    assert!((mean - expected).abs() < 3.0 * se + 0.01 * expected, "{mean} ± {se} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn execution_strategy_does_not_change_results(seed in 0u64..1000, n in 2usize..40) {
        let spec = emfg::reference::two_type();
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let grid = TimeGrid::with_step(1.0, 0.05).unwrap();
        let base = SimConfig::proportional(&spec, n, grid, seed, Mode::Exploratory);
        let a = simulate_population(&spec, &mf, &base.clone().with_exec(Exec::Sequential)).unwrap();
        let b = simulate_population(&spec, &mf, &base.with_exec(Exec::Parallel)).unwrap();
        prop_assert_eq!(a.costs, b.costs);
        prop_assert_eq!(a.xbar_emp, b.xbar_emp);
    }

    #[test]
    fn classical_mode_regularized_equals_no_entropy(seed in 0u64..1000) {
        let spec = noisy_scalar();
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let grid = TimeGrid::with_step(2.0, 0.05).unwrap();
        let batch = simulate_representatives(&spec, &mf, &SimConfig::new(vec![5], grid, seed, Mode::Classical)).unwrap();
        for i in 0..5 {
            prop_assert_eq!(batch.cost(i, CostMode::Regularized), batch.cost(i, CostMode::NoEntropy));
        }
    }
}
