//! Monte Carlo experiments on top of the simulator: propagation-of-chaos
//! rates, cost gaps, epsilon-Nash deviations, cost of exploration, a
//! deviation-family optimality check, the vanishing-exploration sweep and an
//! entropy audit. Each returns plain rows for CSV export plus a summary.

use std::io::{self, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::meanfield::MeanFieldSolution;
use crate::model::PopulationSpec;
use crate::numerics::{derive_seed, fit_rate, mean_and_se, TimeGrid};
use crate::policy::{analytic_coe, entropy_term_displayed, entropy_term_standard, policy_entropy, value_gap, value_gap_derived, GaussianPolicy};
use crate::simulator::{
    proportional_counts, simulate_population, simulate_representatives, CostMode, Deviation, Mode, SimConfig,
};
use crate::variational::GridDensity;

pub const CSV_HEADER: &str = "experiment,N,rep,checkpoint_t,value,std_err";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub experiment: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub rep: usize,
    pub checkpoint_t: f64,
    pub value: f64,
    pub std_err: f64,
}

impl ExperimentRow {
    fn new(experiment: &str, n: usize, rep: usize, checkpoint_t: f64, value: f64, std_err: f64) -> Self {
        ExperimentRow {
            experiment: experiment.to_string(),
            n,
            rep,
            checkpoint_t,
            value,
            std_err,
        }
    }
}

/// Plain CSV; `f64` display is locale-free and round-trips.
pub fn write_csv<W: Write>(rows: &[ExperimentRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.experiment, r.n, r.rep, r.checkpoint_t, r.value, r.std_err
        )?;
    }
    Ok(())
}

/// Grid, checkpoint and execution strategy shared by the experiments.
#[derive(Clone, Copy, Debug)]
pub struct ExperimentOptions {
    pub grid: TimeGrid,
    /// Defaults to the midpoint of the grid.
    pub checkpoint: Option<f64>,
    pub exec: Exec,
    /// Largest tolerated discounted-cost truncation bound.
    pub tail_tol: f64,
}

impl ExperimentOptions {
    pub fn new(grid: TimeGrid) -> Self {
        ExperimentOptions {
            grid,
            checkpoint: None,
            exec: Exec::default(),
            tail_tol: 1e-3,
        }
    }

    fn checkpoint_node(&self) -> usize {
        let t = self.checkpoint.unwrap_or(0.5 * (self.grid.t0 + self.grid.t1));
        self.grid.nearest(t).max(1)
    }
}

/// Per-`N` means of a Monte Carlo statistic and its fitted log-log slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub experiment: String,
    pub ns: Vec<usize>,
    pub means: Vec<f64>,
    pub std_errs: Vec<f64>,
    pub slope: Option<f64>,
}

impl RateSummary {
    fn from_rows(experiment: &str, ns: &[usize], rows: &[ExperimentRow]) -> Self {
        let mut means = Vec::new();
        let mut std_errs = Vec::new();
        for &n in ns {
            let vals: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.value).collect();
            let (m, se) = mean_and_se(&vals);
            means.push(m);
            std_errs.push(se);
        }
        let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        RateSummary {
            experiment: experiment.to_string(),
            ns: ns.to_vec(),
            slope: fit_rate(&xs, &means).ok(),
            means,
            std_errs,
        }
    }

    pub fn rows(&self, checkpoint_t: f64) -> Vec<ExperimentRow> {
        self.ns
            .iter()
            .enumerate()
            .map(|(i, &n)| ExperimentRow::new(&format!("{}-mean", self.experiment), n, 0, checkpoint_t, self.means[i], self.std_errs[i]))
            .collect()
    }
}

fn exact_counts(spec: &PopulationSpec, n: usize) -> Result<Vec<usize>> {
    let counts = proportional_counts(&spec.pi, n);
    let exact = counts
        .iter()
        .zip(&spec.pi)
        .all(|(&c, &w)| (c as f64 / n as f64 - w).abs() < 1e-12);
    if !exact {
        return Err(Error::InvalidArgument(format!(
            "N = {n} cannot reproduce the mixture weights exactly"
        )));
    }
    Ok(counts)
}

fn rep_seed(seed: u64, n: usize, rep: usize) -> u64 {
    derive_seed(seed, ((n as u64) << 24) ^ rep as u64)
}

/// Average over agents of `|x_i^N(t_c) - x_i(t_c)|^2` between a finite
/// population and its representative twins on common random numbers.
pub fn coupling_gap_experiment(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    ns: &[usize],
    reps: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<(Vec<ExperimentRow>, RateSummary)> {
    let node = opts.checkpoint_node();
    let t_c = opts.grid.time(node);
    let mut rows = Vec::new();
    for &n in ns {
        let counts = exact_counts(spec, n)?;
        let gaps = opts.exec.try_map(reps, |rep| -> Result<f64> {
            let config = SimConfig::new(counts.clone(), opts.grid, rep_seed(seed, n, rep), Mode::Exploratory)
                .recording(node)
                .with_exec(Exec::Sequential);
            let finite = simulate_population(spec, mf, &config)?;
            let limit = simulate_representatives(spec, mf, &config)?;
            let a = finite.states_at(t_c)?;
            let b = limit.states_at(t_c)?;
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / n as f64)
        })?;
        rows.extend(gaps.into_iter().enumerate().map(|(rep, g)| ExperimentRow::new("coupling-gap", n, rep, t_c, g, 0.0)));
    }
    let summary = RateSummary::from_rows("coupling-gap", ns, &rows);
    Ok((rows, summary))
}

/// `|J_0^N - J_0|` for agent 0 playing `deviation` (regularized cost) while
/// everybody else plays the equilibrium policy.
pub fn cost_gap_experiment(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    ns: &[usize],
    reps: usize,
    seed: u64,
    deviation: (DVector<f64>, f64),
    opts: &ExperimentOptions,
) -> Result<(Vec<ExperimentRow>, RateSummary)> {
    let t_end = opts.grid.t1;
    let dev = Deviation::new(Some(0), deviation.0, deviation.1);
    let mut rows = Vec::new();
    for &n in ns {
        let counts = exact_counts(spec, n)?;
        let mut solo = vec![0; spec.types()];
        solo[0] = 1;
        let gaps = opts.exec.try_map(reps, |rep| -> Result<f64> {
            let s = rep_seed(seed, n, rep);
            let finite = simulate_population(
                spec,
                mf,
                &SimConfig::new(counts.clone(), opts.grid, s, Mode::Exploratory)
                    .with_deviation(dev.clone())
                    .with_exec(Exec::Sequential),
            )?;
            let limit = simulate_representatives(
                spec,
                mf,
                &SimConfig::new(solo.clone(), opts.grid, s, Mode::Exploratory)
                    .with_deviation(dev.clone())
                    .with_exec(Exec::Sequential),
            )?;
            let bound = finite.truncation_bound(0..1, CostMode::Regularized);
            if !(bound <= opts.tail_tol) {
                return Err(Error::HorizonTooShort { bound, tol: opts.tail_tol });
            }
            Ok((finite.cost(0, CostMode::Regularized) - limit.cost(0, CostMode::Regularized)).abs())
        })?;
        rows.extend(gaps.into_iter().enumerate().map(|(rep, g)| ExperimentRow::new("cost-gap", n, rep, t_end, g, 0.0)));
    }
    let summary = RateSummary::from_rows("cost-gap", ns, &rows);
    Ok((rows, summary))
}

/// A deviation-family member: additive mean shift and covariance scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    #[serde(with = "crate::serde_mat::vector")]
    pub shift: DVector<f64>,
    pub cov_scale: f64,
}

impl FamilyMember {
    pub fn new(shift: DVector<f64>, cov_scale: f64) -> Self {
        FamilyMember { shift, cov_scale }
    }

    pub fn is_equilibrium(&self) -> bool {
        self.cov_scale == 1.0 && self.shift.iter().all(|&v| v == 0.0)
    }

    fn deviation(&self, agent: Option<usize>) -> Deviation {
        Deviation::new(agent, self.shift.clone(), self.cov_scale)
    }
}

/// Scalar mean shifts `+-0.25, +-0.5, +-1` and covariance scalings `1/2, 2`.
pub fn standard_family(m: usize) -> Vec<FamilyMember> {
    let mut out: Vec<FamilyMember> = [0.25, -0.25, 0.5, -0.5, 1.0, -1.0]
        .iter()
        .map(|&d| FamilyMember::new(DVector::from_element(m, d), 1.0))
        .collect();
    out.push(FamilyMember::new(DVector::zeros(m), 0.5));
    out.push(FamilyMember::new(DVector::zeros(m), 2.0));
    out
}

/// Paired (common-random-number) cost differences against the equilibrium.
/// Small deviations for probing the Nash gap: shifts of ±0.01, ±0.02, ±0.05
/// and covariance scales 0.9 and 1.1.
pub fn fine_family(m: usize) -> Vec<FamilyMember> {
    let mut out: Vec<FamilyMember> = [0.01, -0.01, 0.02, -0.02, 0.05, -0.05]
        .iter()
        .map(|&d| FamilyMember::new(DVector::from_element(m, d), 1.0))
        .collect();
    out.push(FamilyMember::new(DVector::zeros(m), 0.9));
    out.push(FamilyMember::new(DVector::zeros(m), 1.1));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberGain {
    pub member: FamilyMember,
    /// Mean of `J(equilibrium) - J(member)`.
    pub gain: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashSummary {
    pub n: usize,
    pub eps_hat: f64,
    pub members: Vec<MemberGain>,
}

/// Lower bound on the epsilon of the N-player equilibrium from a finite
/// deviation family: `max(0, max_d mean[J_0(Phi*) - J_0(d)])`.
pub fn nash_deviation_experiment(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    n: usize,
    family: &[FamilyMember],
    reps: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<(Vec<ExperimentRow>, NashSummary)> {
    let counts = exact_counts(spec, n)?;
    let per_rep = opts.exec.try_map(reps, |rep| -> Result<Vec<f64>> {
        let s = rep_seed(seed, n, rep);
        let run = |dev: Option<Deviation>| -> Result<f64> {
            let mut config = SimConfig::new(counts.clone(), opts.grid, s, Mode::Exploratory).with_exec(Exec::Sequential);
            config.deviation = dev;
            let batch = simulate_population(spec, mf, &config)?;
            let bound = batch.truncation_bound(0..1, CostMode::Regularized);
            if !(bound <= opts.tail_tol) {
                return Err(Error::HorizonTooShort { bound, tol: opts.tail_tol });
            }
            Ok(batch.cost(0, CostMode::Regularized))
        };
        let base = run(None)?;
        family
            .iter()
            .map(|member| {
                if member.is_equilibrium() {
                    Ok(0.0)
                } else {
                    Ok(base - run(Some(member.deviation(Some(0))))?)
                }
            })
            .collect()
    })?;
    let members: Vec<MemberGain> = family
        .iter()
        .enumerate()
        .map(|(d, member)| {
            let diffs: Vec<f64> = per_rep.iter().map(|r| r[d]).collect();
            let (gain, std_err) = mean_and_se(&diffs);
            MemberGain {
                member: member.clone(),
                gain,
                std_err,
            }
        })
        .collect();
    let eps_hat = members.iter().map(|g| g.gain).fold(0.0, f64::max);
    let t_end = opts.grid.t1;
    let mut rows: Vec<ExperimentRow> = members
        .iter()
        .enumerate()
        .map(|(d, g)| ExperimentRow::new("nash-member", n, d, t_end, g.gain, g.std_err))
        .collect();
    rows.push(ExperimentRow::new("nash", n, 0, t_end, eps_hat, 0.0));
    Ok((rows, NashSummary { n, eps_hat, members }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeSummary {
    pub estimate: f64,
    pub std_err: f64,
    /// `m lambda / (2 rho)`
    pub analytic: f64,
    /// The analytic value discounted over the simulated horizon only.
    pub analytic_truncated: f64,
}

/// Original-cost difference between sampling from the exploratory policy
/// and applying the classical control on the same noise.
pub fn coe_experiment(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    k: usize,
    reps: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<(Vec<ExperimentRow>, CoeSummary)> {
    let analytic = analytic_coe(k, spec)?;
    let mut counts = vec![0; spec.types()];
    counts[k] = reps;
    let run = |mode: Mode| {
        simulate_representatives(spec, mf, &SimConfig::new(counts.clone(), opts.grid, seed, mode).with_exec(opts.exec))
    };
    let explore = run(Mode::Exploratory)?;
    let classic = run(Mode::Classical)?;
    for b in [&explore, &classic] {
        let bound = b.truncation_bound(0..reps, CostMode::Classical);
        if !(bound <= opts.tail_tol) {
            return Err(Error::HorizonTooShort { bound, tol: opts.tail_tol });
        }
    }
    let diffs: Vec<f64> = (0..reps)
        .map(|i| explore.cost(i, CostMode::Classical) - classic.cost(i, CostMode::Classical))
        .collect();
    let (estimate, std_err) = mean_and_se(&diffs);
    let t_end = opts.grid.t1;
    let summary = CoeSummary {
        estimate,
        std_err,
        analytic,
        analytic_truncated: analytic * (1.0 - (-spec.rho * t_end).exp()),
    };
    let rows = vec![
        ExperimentRow::new("coe", reps, 0, t_end, estimate, std_err),
        ExperimentRow::new("coe-analytic", reps, 0, t_end, analytic, 0.0),
    ];
    Ok((rows, summary))
}

/// Paired regularized-cost differences `J(member) - J(Phi*)` for independent
/// representative agents; positive gains mean the equilibrium is better.
pub fn optimality_check(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    k: usize,
    family: &[FamilyMember],
    reps: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<(Vec<ExperimentRow>, Vec<MemberGain>)> {
    let mut counts = vec![0; spec.types()];
    counts[k] = reps;
    let run = |member: Option<&FamilyMember>| -> Result<Vec<f64>> {
        let mut config = SimConfig::new(counts.clone(), opts.grid, seed, Mode::Exploratory).with_exec(opts.exec);
        config.deviation = member.map(|m| m.deviation(None));
        let batch = simulate_representatives(spec, mf, &config)?;
        Ok(batch.cost_estimate(k, CostMode::Regularized, opts.tail_tol)?.values)
    };
    let base = run(None)?;
    let mut gains = Vec::new();
    for member in family {
        let other = run(Some(member))?;
        let diffs: Vec<f64> = other.iter().zip(&base).map(|(a, b)| a - b).collect();
        let (gain, std_err) = mean_and_se(&diffs);
        gains.push(MemberGain {
            member: member.clone(),
            gain,
            std_err,
        });
    }
    let t_end = opts.grid.t1;
    let rows = gains
        .iter()
        .enumerate()
        .map(|(d, g)| ExperimentRow::new("optimality", reps, d, t_end, g.gain, g.std_err))
        .collect();
    Ok((rows, gains))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub value_gap: f64,
    pub value_gap_derived: f64,
    /// Root mean square of `u - mean` over sampled actions.
    pub action_rms: f64,
}

/// Value gaps and sampled action spread as exploration vanishes. The mean
/// field does not depend on `lambda`, so one solution serves every point.
pub fn lambda_sweep(
    spec: &PopulationSpec,
    mf: &MeanFieldSolution,
    k: usize,
    lambdas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(Vec<ExperimentRow>, Vec<SweepPoint>)> {
    let mut points = Vec::new();
    for (i, &lambda) in lambdas.iter().enumerate() {
        let mut s = spec.clone();
        s.subpops[k].lambda_explore = lambda;
        let policy = GaussianPolicy::new(mf, &s, k)?;
        let mut rng = crate::numerics::agent_rng(derive_seed(seed, i as u64), 0);
        let mean = DVector::zeros(policy.m());
        let sq: f64 = (0..samples).map(|_| policy.sample(&mean, &mut rng).norm_squared()).sum();
        points.push(SweepPoint {
            lambda,
            value_gap: value_gap(k, &s)?,
            value_gap_derived: value_gap_derived(k, &s)?,
            action_rms: (sq / samples.max(1) as f64).sqrt(),
        });
    }
    let rows = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            [
                ExperimentRow::new("value-gap", 0, i, p.lambda, p.value_gap, 0.0),
                ExperimentRow::new("value-gap-derived", 0, i, p.lambda, p.value_gap_derived, 0.0),
                ExperimentRow::new("action-rms", samples, i, p.lambda, p.action_rms, 0.0),
            ]
        })
        .collect();
    Ok((rows, points))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyAudit {
    /// `lambda / rho` times `int Phi ln Phi` by quadrature (scalar and 2-d controls).
    pub quadrature: Option<f64>,
    pub standard: f64,
    pub displayed: f64,
}

/// Compares the two closed forms of the discounted entropy term against
/// quadrature of the optimal density.
pub fn entropy_audit(spec: &PopulationSpec, k: usize) -> Result<(Vec<ExperimentRow>, EntropyAudit)> {
    let standard = entropy_term_standard(k, spec)?;
    let displayed = entropy_term_displayed(k, spec)?;
    let p = &spec.subpops[k];
    let quadrature = if p.m() <= 2 {
        let cov = crate::policy::exploration_covariance(p)?;
        let density = GridDensity::gaussian(&DVector::zeros(p.m()), &cov, 401, 8.0)?;
        Some(p.lambda_explore / spec.rho * density.neg_entropy())
    } else {
        None
    };
    // Consistency guard: the standard form is minus lambda H / rho.
    debug_assert!((standard + p.lambda_explore / spec.rho * policy_entropy(k, spec)?).abs() < 1e-12);
    let mut rows = vec![
        ExperimentRow::new("entropy-standard", 0, 0, 0.0, standard, 0.0),
        ExperimentRow::new("entropy-displayed", 0, 0, 0.0, displayed, 0.0),
    ];
    if let Some(q) = quadrature {
        rows.push(ExperimentRow::new("entropy-quadrature", 0, 0, 0.0, q, 0.0));
    }
    Ok((rows, EntropyAudit {
        quadrature,
        standard,
        displayed,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{solve_consistency, SolverConfig};
    use crate::model::SubpopParams;
    use nalgebra::DMatrix;

    fn uncoupled(lambda: f64) -> PopulationSpec {
        let mut p = SubpopParams::scalar(-0.3, 1.0, 1.0, 1.0, 0.0);
        p.lambda_explore = lambda;
        p.d = DMatrix::from_element(1, 1, 0.3);
        let mut spec = PopulationSpec::single(p, 1.0, DVector::from_element(1, 1.0));
        spec.x0_cov[(0, 0)] = 0.05;
        spec
    }

    #[test]
    fn csv_format() {
        let rows = vec![ExperimentRow::new("coe", 10, 0, 1.5, 0.25, 1e-3)];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "experiment,N,rep,checkpoint_t,value,std_err\ncoe,10,0,1.5,0.25,0.001\n");
    }

    #[test]
    fn uncoupled_gaps_vanish() {
        let spec = uncoupled(0.2);
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let opts = ExperimentOptions::new(TimeGrid::with_step(2.0, 0.01).unwrap());
        let (rows, _) = coupling_gap_experiment(&spec, &mf, &[4, 8], 3, 1, &opts).unwrap();
        assert!(rows.iter().all(|r| r.value < 1e-24));
    }

    #[test]
    fn equilibrium_only_family_gives_zero_eps() {
        let spec = uncoupled(0.2);
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let opts = ExperimentOptions::new(TimeGrid::with_step(12.0, 0.02).unwrap());
        let family = vec![FamilyMember::new(DVector::zeros(1), 1.0)];
        let (_, summary) = nash_deviation_experiment(&spec, &mf, 4, &family, 4, 2, &opts).unwrap();
        assert_eq!(summary.eps_hat, 0.0);
    }

    #[test]
    fn uncoupled_deviations_never_profit() {
        let spec = uncoupled(0.2);
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let opts = ExperimentOptions::new(TimeGrid::with_step(12.0, 0.02).unwrap());
        let (_, summary) = nash_deviation_experiment(&spec, &mf, 4, &standard_family(1), 16, 3, &opts).unwrap();
        for g in &summary.members {
            assert!(g.gain < 0.0, "{g:?}");
        }
    }

    #[test]
    fn zero_lambda_costs_nothing_to_explore() {
        let spec = uncoupled(0.0);
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let opts = ExperimentOptions::new(TimeGrid::with_step(12.0, 0.02).unwrap());
        let (_, coe) = coe_experiment(&spec, &mf, 0, 200, 5, &opts).unwrap();
        assert_eq!(coe.estimate, 0.0);
    }

    #[test]
    fn exact_mixture_required() {
        let spec = crate::meanfield::tests_support::two_type_coupled();
        assert!(exact_counts(&spec, 10).is_ok());
        assert!(exact_counts(&spec, 7).is_err());
    }

    #[test]
    fn sweep_shrinks() {
        let spec = uncoupled(1.0);
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let (_, pts) = lambda_sweep(&spec, &mf, 0, &[1.0, 0.1, 0.01], 1000, 0).unwrap();
        assert!(pts.windows(2).all(|w| w[1].action_rms < w[0].action_rms));
    }
}
