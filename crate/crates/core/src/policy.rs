//! Optimal feedback law and the optimal Gaussian control distribution, plus
//! the closed forms for entropy, cost of exploration and the value gap.
//!
//! The exploratory mean is the classical control itself; only the covariance
//! `lambda R^-1` is new. Both paths go through [`GaussianPolicy::mean`].

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::meanfield::MeanFieldSolution;
use crate::model::{expand_block, PopulationSpec, SubpopParams};
use crate::numerics::{psd_factor, standard_normals};

/// Policy of a type-`k` agent against a solved mean field.
#[derive(Clone, Debug)]
pub struct GaussianPolicy<'a> {
    pub k: usize,
    pub lambda: f64,
    /// `R^-1 (B^T P + S^T)`
    pub gain: DMatrix<f64>,
    /// `lambda R^-1`
    pub covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    r_inv_bt: DMatrix<f64>,
    /// `R^-1 S^T psibar`, acting on the stacked mean
    r_inv_st_psi: DMatrix<f64>,
    nvec: DVector<f64>,
    mf: &'a MeanFieldSolution,
}

impl<'a> GaussianPolicy<'a> {
    pub fn new(mf: &'a MeanFieldSolution, spec: &PopulationSpec, k: usize) -> Result<Self> {
        let p = spec.subpops.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            count: spec.types(),
        })?;
        if mf.types() != spec.types() {
            return Err(Error::Dimension("solution and spec disagree on type count".into()));
        }
        let r_inv = p.r_inv()?;
        let pi = &mf.pi[k].pi;
        let gain = &r_inv * (p.b.transpose() * pi + p.s.transpose());
        let covariance = exploration_covariance(p)?;
        let factor = psd_factor(&covariance)?;
        Ok(GaussianPolicy {
            k,
            lambda: p.lambda_explore,
            gain,
            factor,
            covariance,
            r_inv_bt: &r_inv * p.b.transpose(),
            r_inv_st_psi: &r_inv * p.s.transpose() * expand_block(&p.psi, &spec.pi),
            nvec: p.nvec.clone(),
            r_inv,
            mf,
        })
    }

    pub fn m(&self) -> usize {
        self.gain.nrows()
    }

    /// State-independent part `-R^-1 (B^T s(t) - S^T psibar xbar(t) + n)`.
    pub fn feedforward(&self, t: f64) -> Result<DVector<f64>> {
        let s = self.mf.s_at(self.k, t)?;
        let xbar = self.mf.xbar_at(t)?;
        Ok(-(&self.r_inv_bt * s - &self.r_inv_st_psi * xbar + &self.r_inv * &self.nvec))
    }

    /// Mean given a precomputed [`feedforward`](Self::feedforward).
    pub fn mean_with(&self, feedforward: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        feedforward - &self.gain * x
    }

    pub fn mean(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.mean_with(&self.feedforward(t)?, x))
    }

    /// `mean + L z`; always consumes `m` normals so rng streams stay aligned
    /// across exploration weights.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = standard_normals(rng, self.m());
        self.perturb(mean, &z)
    }

    /// `mean + L z` for caller-supplied standard normals.
    pub fn perturb(&self, mean: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        mean + &self.factor * z
    }
}

pub fn exploration_covariance(p: &SubpopParams) -> Result<DMatrix<f64>> {
    if !(p.lambda_explore >= 0.0) {
        return Err(Error::InvalidArgument("lambda_explore must be ≥ 0".into()));
    }
    Ok(p.r_inv()? * p.lambda_explore)
}

/// `u* = -R^-1 [(B^T P + S^T) x + B^T s(t) - S^T psibar xbar(t) + n]`.
pub fn classical_control(
    t: f64,
    x: &DVector<f64>,
    mf: &MeanFieldSolution,
    spec: &PopulationSpec,
    k: usize,
) -> Result<DVector<f64>> {
    GaussianPolicy::new(mf, spec, k)?.mean(t, x)
}

/// Mean and covariance of the optimal control distribution at `(t, x)`.
pub fn exploratory_policy(
    t: f64,
    x: &DVector<f64>,
    mf: &MeanFieldSolution,
    spec: &PopulationSpec,
    k: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let policy = GaussianPolicy::new(mf, spec, k)?;
    Ok((policy.mean(t, x)?, policy.covariance.clone()))
}

fn params(k: usize, spec: &PopulationSpec) -> Result<&SubpopParams> {
    spec.subpops.get(k).ok_or(Error::IndexOutOfRange {
        index: k,
        count: spec.types(),
    })
}

/// `ln det(2 pi lambda R^-1)`
fn log_det_scaled_cov(p: &SubpopParams) -> Result<f64> {
    let cov = p.r_inv()? * (2.0 * PI * p.lambda_explore);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("exploration covariance not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Differential entropy `1/2 ln det(2 pi e lambda R^-1)`.
pub fn policy_entropy(k: usize, spec: &PopulationSpec) -> Result<f64> {
    let p = params(k, spec)?;
    if !(p.lambda_explore > 0.0) {
        return Err(Error::EntropyUndefined);
    }
    let cov = p.r_inv()? * (2.0 * PI * E * p.lambda_explore);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("exploration covariance not positive definite".into()))?;
    Ok(chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Cost of exploration `m lambda / (2 rho)`: the extra quadratic control cost
/// `1/2 tr(R lambda R^-1)` per unit time, discounted.
pub fn analytic_coe(k: usize, spec: &PopulationSpec) -> Result<f64> {
    let p = params(k, spec)?;
    if !(spec.rho > 0.0) {
        return Err(Error::InvalidArgument("cost of exploration needs rho > 0".into()));
    }
    Ok(p.m() as f64 * p.lambda_explore / (2.0 * spec.rho))
}

/// `(lambda / 2 rho) (ln det(2 pi lambda R^-1) - m)`, the multivariate form of
/// the reference scalar expression for the value gap (see `value_gap_derived`).
pub fn value_gap(k: usize, spec: &PopulationSpec) -> Result<f64> {
    let p = params(k, spec)?;
    if !(p.lambda_explore > 0.0) {
        return Err(Error::InvalidArgument("value gap needs lambda > 0".into()));
    }
    if !(spec.rho > 0.0) {
        return Err(Error::InvalidArgument("value gap needs rho > 0".into()));
    }
    let lam = p.lambda_explore;
    Ok(lam / (2.0 * spec.rho) * (log_det_scaled_cov(p)? - p.m() as f64))
}

/// `V_exp - V` assembled directly: the exploratory running cost adds
/// `m lambda / 2` of control cost and subtracts `lambda H`, with identical
/// state paths. Equals `-(lambda / 2 rho) ln det(2 pi lambda R^-1)`.
pub fn value_gap_derived(k: usize, spec: &PopulationSpec) -> Result<f64> {
    let p = params(k, spec)?;
    if !(p.lambda_explore > 0.0) || !(spec.rho > 0.0) {
        return Err(Error::InvalidArgument("value gap needs lambda > 0 and rho > 0".into()));
    }
    let lam = p.lambda_explore;
    let per_time = p.m() as f64 * lam / 2.0 - lam * policy_entropy(k, spec)?;
    Ok(per_time / spec.rho)
}

/// Discounted entropy term `lambda E int e^{-rho t} int Phi ln Phi du dt`
/// from the standard Gaussian identity:
/// `-(lambda / 2 rho)(ln det(2 pi lambda R^-1) + m)`.
pub fn entropy_term_standard(k: usize, spec: &PopulationSpec) -> Result<f64> {
    let p = params(k, spec)?;
    Ok(-p.lambda_explore / spec.rho * policy_entropy(k, spec)?)
}

/// The same quantity in its reference display form,
/// `(lambda / 2 rho) ln det(2 pi lambda R^-1)`; kept only for auditing.
pub fn entropy_term_displayed(k: usize, spec: &PopulationSpec) -> Result<f64> {
    let p = params(k, spec)?;
    if !(p.lambda_explore > 0.0) {
        return Err(Error::EntropyUndefined);
    }
    Ok(p.lambda_explore / (2.0 * spec.rho) * log_det_scaled_cov(p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::{solve_consistency, SolverConfig};
    use crate::numerics::{agent_rng, TimeGrid, Trajectory};
    use crate::riccati::RiccatiSolution;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn spec_with(lambda: f64, r: f64) -> PopulationSpec {
        let mut p = SubpopParams::scalar(0.0, 1.0, 1.0, r, 0.0);
        p.lambda_explore = lambda;
        PopulationSpec::single(p, 0.5, DVector::from_element(1, 1.0))
    }

    /// Hand-built solution with `P = 1` and a constant offset.
    fn fake_solution(s: f64) -> MeanFieldSolution {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let c = |v: f64| Trajectory::constant(grid, DVector::from_element(1, v));
        MeanFieldSolution {
            grid,
            pi: vec![RiccatiSolution {
                pi: DMatrix::from_element(1, 1, 1.0),
                residual: 0.0,
                iterations: 0,
                closed_loop_abscissa: -1.0,
            }],
            s: vec![c(s)],
            j: DMatrix::from_element(1, 1, -1.0),
            l: c(-s),
            abar: DMatrix::from_element(1, 1, -1.0),
            mbar: c(-s),
            xbar: c(0.3),
            mubar: c(-0.3 - s),
            residual: 0.0,
            iterations: 0,
        }
    }

    #[test]
    fn control_examples() {
        let spec = spec_with(0.0, 1.0);
        let zero = fake_solution(0.0);
        let u = classical_control(0.5, &DVector::zeros(1), &zero, &spec, 0).unwrap();
        assert_eq!(u[0], 0.0);
        let mf = fake_solution(0.5);
        let u = classical_control(0.5, &DVector::from_element(1, 2.0), &mf, &spec, 0).unwrap();
        assert_abs_diff_eq!(u[0], -2.5, epsilon = 1e-15);
        assert!(classical_control(2.0, &DVector::zeros(1), &mf, &spec, 0).is_err());
    }

    #[test]
    fn no_cross_weight_means_no_mean_dependence() {
        let spec = spec_with(0.0, 1.0);
        let mut a = fake_solution(0.5);
        let u1 = classical_control(0.3, &DVector::from_element(1, 1.0), &a, &spec, 0).unwrap();
        a.xbar = Trajectory::constant(a.grid, DVector::from_element(1, 9.0));
        let u2 = classical_control(0.3, &DVector::from_element(1, 1.0), &a, &spec, 0).unwrap();
        assert_eq!(u1, u2);
    }

    #[test]
    fn dirac_limit_returns_mean() {
        let spec = spec_with(0.0, 1.0);
        let mf = fake_solution(0.5);
        let policy = GaussianPolicy::new(&mf, &spec, 0).unwrap();
        assert_eq!(policy.covariance[(0, 0)], 0.0);
        let mean = policy.mean(0.2, &DVector::from_element(1, 1.0)).unwrap();
        let u = policy.sample(&mean, &mut agent_rng(1, 0));
        assert_eq!(u, mean);
        assert!(matches!(policy_entropy(0, &spec), Err(Error::EntropyUndefined)));
    }

    #[test]
    fn identity_covariance() {
        let mut p = SubpopParams::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
        p.b = DMatrix::identity(1, 2);
        p.h = DMatrix::zeros(1, 2);
        p.s = DMatrix::zeros(1, 2);
        p.r = DMatrix::identity(2, 2);
        p.nvec = DVector::zeros(2);
        p.lambda_explore = 1.0;
        assert_eq!(exploration_covariance(&p).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn exploratory_mean_is_classical_control() {
        let mut spec = spec_with(0.3, 2.0);
        spec.subpops[0].s[(0, 0)] = 0.4;
        spec.subpops[0].psi[(0, 0)] = 0.5;
        spec.subpops[0].f[(0, 0)] = 0.2;
        let mf = solve_consistency(&spec, &SolverConfig::default()).unwrap();
        let mut rng = agent_rng(5, 0);
        for _ in 0..100 {
            let t = rng.random_range(0.0..mf.grid.t1);
            let x = DVector::from_element(1, rng.random_range(-3.0..3.0));
            let (mean, cov) = exploratory_policy(t, &x, &mf, &spec, 0).unwrap();
            assert_eq!(mean, classical_control(t, &x, &mf, &spec, 0).unwrap());
            assert_abs_diff_eq!(cov[(0, 0)], 0.15, epsilon = 1e-15);
        }
    }

    #[test]
    fn sample_moments() {
        let spec = spec_with(0.5, 2.0);
        let mf = fake_solution(0.0);
        let policy = GaussianPolicy::new(&mf, &spec, 0).unwrap();
        let mean = DVector::from_element(1, 0.7);
        let mut rng = agent_rng(9, 0);
        let draws = 1_000_000;
        let (mut s, mut ss) = (0.0, 0.0);
        for _ in 0..draws {
            let u = policy.sample(&mean, &mut rng)[0];
            s += u;
            ss += u * u;
        }
        let m = s / draws as f64;
        let var = ss / draws as f64 - m * m;
        assert!((var - 0.25).abs() < 0.01 * 0.25, "var {var}");
        assert!((m - 0.7).abs() < 4.0 * (0.25f64 / draws as f64).sqrt());
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(policy_entropy(0, &spec_with(1.0, 1.0)).unwrap(), 1.418939, epsilon = 1e-6);
        assert_abs_diff_eq!(policy_entropy(0, &spec_with(0.5, 2.0)).unwrap(), 0.725791, epsilon = 1e-6);
        let a = policy_entropy(0, &spec_with(0.3, 1.0)).unwrap();
        let b = policy_entropy(0, &spec_with(1.2, 1.0)).unwrap();
        assert_abs_diff_eq!(b - a, 0.5 * 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn entropy_matches_quadrature() {
        let spec = spec_with(0.5, 2.0);
        let var: f64 = 0.25;
        let sd = var.sqrt();
        let nodes = 4001;
        let (lo, hi) = (-10.0 * sd, 10.0 * sd);
        let h = (hi - lo) / (nodes - 1) as f64;
        let mut total = 0.0;
        for i in 0..nodes {
            let u = lo + i as f64 * h;
            let f = (-(u * u) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            total -= w * h * f * f.ln();
        }
        assert_abs_diff_eq!(policy_entropy(0, &spec).unwrap(), total, epsilon = 1e-8);
    }

    #[test]
    fn coe_examples() {
        let mut spec = spec_with(0.2, 1.0);
        spec.rho = 0.1;
        assert_abs_diff_eq!(analytic_coe(0, &spec).unwrap(), 1.0, epsilon = 1e-15);
        spec.subpops[0].lambda_explore = 0.0;
        assert_eq!(analytic_coe(0, &spec).unwrap(), 0.0);
        spec.rho = 0.0;
        assert!(analytic_coe(0, &spec).is_err());
    }

    #[test]
    fn value_gap_examples() {
        let spec = spec_with(1.0, 1.0);
        assert_abs_diff_eq!(value_gap(0, &spec).unwrap(), (2.0 * PI).ln() - 1.0, epsilon = 1e-12);
        // Root: 2 pi lambda / R = e.
        let root = spec_with(E / (2.0 * PI), 1.0);
        assert_abs_diff_eq!(value_gap(0, &root).unwrap(), 0.0, epsilon = 1e-15);
        let mut prev = f64::INFINITY;
        for e in 1..=6 {
            let g = value_gap(0, &spec_with(10f64.powi(-e), 1.0)).unwrap().abs();
            assert!(g < prev);
            prev = g;
        }
        assert!(value_gap(0, &spec_with(0.0, 1.0)).is_err());
    }

    #[test]
    fn derived_gap_is_entropy_plus_control_cost() {
        let spec = spec_with(0.4, 1.5);
        let lam = 0.4;
        let expect = -(lam / (2.0 * spec.rho)) * (2.0 * PI * lam / 1.5).ln();
        assert_abs_diff_eq!(value_gap_derived(0, &spec).unwrap(), expect, epsilon = 1e-14);
        let std = entropy_term_standard(0, &spec).unwrap();
        assert_abs_diff_eq!(std, -(lam / (2.0 * spec.rho)) * ((2.0 * PI * lam / 1.5).ln() + 1.0), epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn covariance_linear_in_lambda(lam in 0.0f64..5.0, r in 0.2f64..4.0) {
            let one = exploration_covariance(&spec_with(lam, r).subpops[0]).unwrap();
            let two = exploration_covariance(&spec_with(2.0 * lam, r).subpops[0]).unwrap();
            prop_assert_eq!(two, one * 2.0);
        }

        #[test]
        fn density_normalizes(lam in 0.05f64..3.0, r in 0.2f64..4.0) {
            let var = lam / r;
            let sd = var.sqrt();
            let nodes = 801;
            let h = 16.0 * sd / (nodes - 1) as f64;
            let mut total = 0.0;
            for i in 0..nodes {
                let u = -8.0 * sd + i as f64 * h;
                let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
                total += w * h * (-(u * u) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            }
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
