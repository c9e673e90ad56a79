//! End-to-end acceptance suite. Runs every criterion in sequence, prints one
//! line per criterion and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use emfg::experiments::{self, ExperimentOptions, ExperimentRow};
use emfg::meanfield::{consistency_residual, solve_consistency, solve_system, SolverConfig, System};
use emfg::model::{PopulationSpec, SubpopParams};
use emfg::nalgebra::{DMatrix, DVector};
use emfg::numerics::{agent_rng, mean_and_se, TimeGrid};
use emfg::policy::value_gap;
use emfg::reference;
use emfg::riccati::solve_discounted_are;
use emfg::simulator::{simulate_population, Mode, SimConfig};
use emfg::trading::{self, MarketData, RlConfig};
use emfg::variational::{gateaux_derivative, mean_down_direction, random_admissible_directions, TruncatedProblem};
use emfg::Exec;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn solve(spec: &PopulationSpec) -> Result<emfg::meanfield::MeanFieldSolution, String> {
    solve_consistency(spec, &SolverConfig::default()).map_err(err)
}

fn opts(horizon: f64, dt: f64) -> ExperimentOptions {
    ExperimentOptions::new(TimeGrid::with_step(horizon, dt).expect("grid"))
}

/// Independent residual of the discounted algebraic Riccati equation.
fn are_defect(p: &SubpopParams, rho: f64, pi: &DMatrix<f64>) -> f64 {
    let r_inv = p.r.clone().try_inverse().expect("R invertible");
    let cross = pi * &p.b + &p.s;
    let res = &p.q + pi * &p.a + p.a.transpose() * pi - pi * rho - &cross * r_inv * cross.transpose();
    res.abs().max() / (1.0 + pi.abs().max())
}

fn riccati() -> Outcome {
    let mut rng = agent_rng(101, 0);
    let mut worst_scalar: f64 = 0.0;
    for _ in 0..50 {
        let (a, b, q, r, rho) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.1..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..1.0),
        );
        let sol = solve_discounted_are(&SubpopParams::scalar(a, b, q, r, 0.0), rho, 1e-12).map_err(err)?;
        // b^2/r P^2 + (rho - 2a) P - q = 0, positive root
        let c = b * b / r;
        let lin = rho - 2.0 * a;
        let root = (-lin + (lin * lin + 4.0 * c * q).sqrt()) / (2.0 * c);
        worst_scalar = worst_scalar.max((sol.pi[(0, 0)] - root).abs());
    }
    let mut worst_matrix: f64 = 0.0;
    let rand_mat = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    for _ in 0..20 {
        let mut p = SubpopParams::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
        p.a = rand_mat(3, 3, &mut rng);
        p.b = rand_mat(3, 2, &mut rng);
        let l = rand_mat(2, 2, &mut rng);
        p.r = &l * l.transpose() + DMatrix::identity(2, 2) * 0.5;
        p.s = rand_mat(3, 2, &mut rng) * 0.3;
        let g = rand_mat(3, 3, &mut rng);
        let r_inv = p.r.clone().try_inverse().unwrap();
        p.q = &g * g.transpose() + &p.s * r_inv * p.s.transpose() + DMatrix::identity(3, 3) * 0.1;
        p.f = DMatrix::zeros(3, 3);
        p.h = DMatrix::zeros(3, 2);
        p.d = DMatrix::zeros(3, 1);
        p.drift = emfg::model::DriftTable::zeros(3);
        p.eta = DVector::zeros(3);
        p.nvec = DVector::zeros(2);
        p.psi = DMatrix::zeros(3, 3);
        let rho = rng.random_range(0.0..1.0);
        let sol = solve_discounted_are(&p, rho, 1e-12).map_err(err)?;
        worst_matrix = worst_matrix.max(are_defect(&p, rho, &sol.pi));
    }
    check(
        worst_scalar < 1e-8 && worst_matrix < 1e-8,
        format!("scalar max error {worst_scalar:.1e}, 3x3 max relative residual {worst_matrix:.1e}"),
    )
}

fn consistency() -> Outcome {
    let mut iters = Vec::new();
    for spec in [reference::decoupled_scalar(), reference::scalar_coe(), reference::planar_coe()] {
        iters.push(solve(&spec)?.iterations);
    }
    let spec = reference::two_type();
    let sol = solve(&spec)?;
    let independent = consistency_residual(&sol, &spec);
    check(
        iters.iter().all(|&i| i == 1) && sol.residual < 1e-6 && independent < 1e-5,
        format!("decoupled iterations {iters:?}, two-type residual {:.1e}, checker {independent:.1e}", sol.residual),
    )
}

fn equivalence() -> Outcome {
    let spec = reference::two_type();
    let config = SolverConfig::default();
    let classical = solve_system(&spec, &config, System::Classical).map_err(err)?;
    let exploratory = solve_system(&spec, &config, System::Exploratory).map_err(err)?;
    let identical = classical == exploratory;
    let grid = TimeGrid::with_step(5.0, 0.0025).map_err(err)?;
    let cfg = SimConfig::proportional(&spec, 10_000, grid, 5, Mode::Exploratory).recording(400);
    let batch = simulate_population(&spec, &exploratory, &cfg).map_err(err)?;
    let mut worst: f64 = 0.0;
    for t in [1.0, 2.0, 3.0, 4.0, 5.0] {
        let xs = batch.states_at(t).map_err(err)?;
        for k in 0..spec.types() {
            let v: Vec<f64> = batch.of_type(k).map(|i| xs[i][0]).collect();
            let (m, se) = mean_and_se(&v);
            let target = exploratory.type_mean(k, t).map_err(err)?[0];
            worst = worst.max((m - target).abs() / se);
        }
    }
    check(identical && worst < 5.0, format!("bitwise identical: {identical}, max |z| over checkpoints {worst:.2}"))
}

fn coupling_rate() -> Outcome {
    let spec = reference::coupled_single_type();
    let mf = solve(&spec)?;
    let (_, s) = experiments::coupling_gap_experiment(&spec, &mf, &[16, 64, 256, 1024], 64, 41, &opts(2.0, 0.01)).map_err(err)?;
    let slope = s.slope.ok_or("slope undefined")?;
    check((slope + 1.0).abs() <= 0.2, format!("slope {slope:.3}, means {:?}", short(&s.means)))
}

fn cost_and_nash() -> Outcome {
    let spec = reference::coupled_single_type();
    let mf = solve(&spec)?;
    let o = opts(12.0, 0.02);
    let ns = [16, 64, 256, 1024];
    let (_, s) = experiments::cost_gap_experiment(&spec, &mf, &ns, 64, 51, (DVector::from_element(1, 0.5), 1.0), &o).map_err(err)?;
    let slope = s.slope.ok_or("slope undefined")?;

    let quiet = reference::coupled_quiet();
    let mf_q = solve(&quiet)?;
    let family = experiments::fine_family(1);
    let eps = |n: usize| -> Result<f64, String> {
        Ok(experiments::nash_deviation_experiment(&quiet, &mf_q, n, &family, 32, 52, &o).map_err(err)?.1.eps_hat)
    };
    let (small, large) = (eps(16)?, eps(1024)?);
    check(
        slope <= -0.4 && large < small,
        format!("cost-gap slope {slope:.3}, eps(16) {small:.2e}, eps(1024) {large:.2e}"),
    )
}

fn cost_of_exploration() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, spec) in [("m=1", reference::scalar_coe()), ("m=2", reference::planar_coe())] {
        let mf = solve(&spec)?;
        let (_, s) = experiments::coe_experiment(&spec, &mf, 0, 10_000, 61, &opts(150.0, 0.05)).map_err(err)?;
        let expected = spec.m() as f64 * spec.subpops[0].lambda_explore / (2.0 * spec.rho);
        ok &= (s.estimate - expected).abs() <= 3.0 * s.std_err && s.std_err < 0.05 * expected;
        lines.push(format!("{name}: {:.4} ± {:.4} vs {expected}", s.estimate, s.std_err));
    }
    check(ok, lines.join(", "))
}

fn vanishing_exploration() -> Outcome {
    let spec = reference::scalar_coe();
    let mf = solve(&spec)?;
    let lambdas: Vec<f64> = (0..=6).map(|e| 10f64.powi(-e)).collect();
    let (_, points) = experiments::lambda_sweep(&spec, &mf, 0, &lambdas, 10_000, 71).map_err(err)?;
    let gaps: Vec<f64> = points.iter().map(|p| p.value_gap.abs()).collect();
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let rms = points.last().unwrap().action_rms;
    let mut tiny = spec.clone();
    tiny.subpops[0].lambda_explore = 1e-6;
    let last = value_gap(0, &tiny).map_err(err)?;
    check(monotone && rms < 1e-2, format!("|gap| {:?}, final {last:.2e}, action rms at 1e-6 {rms:.2e}", short(&gaps)))
}

fn first_order() -> Outcome {
    let spec = reference::decoupled_scalar();
    let mf = solve(&spec)?;
    let prob = TruncatedProblem::new(&spec, &mf, 0, TimeGrid::new(0.0, 5.0, 500).map_err(err)?, spec.x0_mean.clone());
    let star = prob.optimal_path(0.0, 1.0).map_err(err)?;
    let mut rng = agent_rng(81, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let omega = random_admissible_directions(&star, 5.0, &mut rng);
        worst = worst.max(gateaux_derivative(&prob, &star, &omega, 1e-4).map_err(err)?.abs());
    }
    let shifted = prob.optimal_path(0.5, 1.0).map_err(err)?;
    let descent = gateaux_derivative(&prob, &shifted, &mean_down_direction(&shifted), 1e-4).map_err(err)?;
    check(worst < 1e-3 && descent < 0.0, format!("max |dJ| {worst:.1e} over 10 directions, descent {descent:.3e}"))
}

fn optimality() -> Outcome {
    let spec = reference::coupled_single_type();
    let mf = solve(&spec)?;
    let (_, gains) = experiments::optimality_check(&spec, &mf, 0, &experiments::standard_family(1), 256, 91, &opts(12.0, 0.02)).map_err(err)?;
    let worst = gains.iter().map(|g| g.gain / g.std_err).fold(f64::INFINITY, f64::min);
    check(gains.len() == 8 && worst > 3.0, format!("8 members, smallest gain/SE {worst:.1}"))
}

fn trading_loop() -> Outcome {
    let truth = trading::reference_market();
    let mut init = truth.clone();
    init.lambda_perm = 0.0;
    init.a_temp = 0.2;
    let config = RlConfig {
        lambda_explore: 0.1,
        seed: 101,
        ..RlConfig::default()
    };
    let trace = trading::rl_loop(&truth, &init, &config).map_err(err)?;
    if let Some(f) = trace.failure {
        return Err(f);
    }
    let first = &trace.records[0];
    let last = trace.records.last().ok_or("empty trace")?;
    let lam_err = (last.lambda_hat - truth.lambda_perm).abs();
    let a_err = (last.a_hat - truth.a_temp).abs();
    let shrank = lam_err < (first.lambda_hat - truth.lambda_perm).abs() && a_err < (first.a_hat - truth.a_temp).abs();
    let within = lam_err <= 3.0 * last.lambda_se && a_err <= (3.0 * last.a_se).max(1e-10);

    let mut quiet = truth.clone();
    quiet.sigma = 1e-300;
    let grid = TimeGrid::new(0.0, quiet.horizon, 200).map_err(err)?;
    let plan = trading::plan_execution(&quiet, 0.1, grid).map_err(err)?;
    let mut data = MarketData::default();
    for seed in 0..3 {
        trading::simulate_market(&quiet, &plan, 10, grid, seed).map_err(err)?.append_to(&mut data);
    }
    let est = trading::estimate_params(&data).map_err(err)?;
    let exact = (est.lambda_perm - quiet.lambda_perm).abs() < 1e-10 && (est.a_temp - quiet.a_temp).abs() < 1e-10;
    check(
        shrank && within && exact,
        format!(
            "iteration {}: lambda err {lam_err:.2e} (3SE {:.2e}), a err {a_err:.2e} (3SE {:.2e}); noise-free errors {:.1e}, {:.1e}",
            last.iteration,
            3.0 * last.lambda_se,
            3.0 * last.a_se,
            (est.lambda_perm - quiet.lambda_perm).abs(),
            (est.a_temp - quiet.a_temp).abs()
        ),
    )
}

fn csv(rows: &[ExperimentRow]) -> Vec<u8> {
    let mut buf = Vec::new();
    experiments::write_csv(rows, &mut buf).expect("in-memory write");
    buf
}

/// Every experiment's CSV, run under one execution strategy.
fn all_csvs(exec: Exec) -> Result<Vec<Vec<u8>>, String> {
    let spec = reference::coupled_single_type();
    let mf = solve(&spec)?;
    let mut o = opts(12.0, 0.05);
    o.exec = exec;
    let mut short_o = opts(2.0, 0.02);
    short_o.exec = exec;
    let ns = [4, 16];
    let mut out = vec![
        csv(&experiments::coupling_gap_experiment(&spec, &mf, &ns, 4, 7, &short_o).map_err(err)?.0),
        csv(&experiments::cost_gap_experiment(&spec, &mf, &ns, 4, 7, (DVector::from_element(1, 0.5), 1.0), &o).map_err(err)?.0),
        csv(&experiments::nash_deviation_experiment(&spec, &mf, 4, &experiments::standard_family(1), 4, 7, &o).map_err(err)?.0),
        csv(&experiments::optimality_check(&spec, &mf, 0, &experiments::standard_family(1), 8, 7, &o).map_err(err)?.0),
        csv(&experiments::lambda_sweep(&spec, &mf, 0, &[1.0, 0.1], 100, 7).map_err(err)?.0),
        csv(&experiments::entropy_audit(&spec, 0).map_err(err)?.0),
    ];
    let coe = reference::scalar_coe();
    let mf_c = solve(&coe)?;
    let mut long_o = opts(150.0, 0.1);
    long_o.exec = exec;
    out.push(csv(&experiments::coe_experiment(&coe, &mf_c, 0, 50, 7, &long_o).map_err(err)?.0));
    let config = RlConfig {
        iterations: 2,
        episodes: 2,
        steps: 50,
        exec,
        ..RlConfig::default()
    };
    let market = trading::reference_market();
    let mut buf = Vec::new();
    trading::rl_loop(&market, &market, &config).map_err(err)?.write_csv(&mut buf).map_err(err)?;
    out.push(buf);
    Ok(out)
}

fn determinism() -> Outcome {
    let a = all_csvs(Exec::Parallel)?;
    let b = all_csvs(Exec::Parallel)?;
    let c = all_csvs(Exec::Sequential)?;
    check(a == b && a == c, format!("{} experiment CSVs identical across reruns and execution strategies", a.len()))
}

fn short(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.3e}")).collect()
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("riccati correctness", Duration::from_secs(10), riccati),
        ("consistency fixed point", Duration::from_secs(30), consistency),
        ("classical/exploratory equivalence", Duration::from_secs(120), equivalence),
        ("coupling-gap rate", Duration::from_secs(300), coupling_rate),
        ("cost-gap rate and epsilon-Nash", Duration::from_secs(600), cost_and_nash),
        ("cost of exploration", Duration::from_secs(120), cost_of_exploration),
        ("vanishing exploration", Duration::from_secs(120), vanishing_exploration),
        ("first-order condition", Duration::from_secs(60), first_order),
        ("optimality spot check", Duration::from_secs(300), optimality),
        ("trading learning loop", Duration::from_secs(120), trading_loop),
        ("determinism", Duration::from_secs(300), determinism),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) => (elapsed <= *budget, d),
            Err(d) => (false, d),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] {:>2}. {name}: {detail} ({:.1}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
