//! Control densities tabulated on a bounded action grid, the
//! entropy-regularized cost functional evaluated by quadrature, the
//! multiplicative perturbation `e^{eps omega} Phi`, and a finite-difference
//! directional (Gateaux) derivative of the cost.
//!
//! All functionals here treat the mean field as frozen and follow the mean
//! state path driven by the density means; the state noise contributes a
//! policy-independent constant and is left out.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::meanfield::MeanFieldSolution;
use crate::model::{expand_block, PopulationSpec};
use crate::numerics::{TimeGrid, Trajectory};
use crate::policy::{exploration_covariance, GaussianPolicy};

/// Density values on a tensor grid over an axis-aligned box (`m <= 2`).
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: Vec<usize>,
    /// Row-major: the last dimension varies fastest.
    pub values: Vec<f64>,
    pub normalized: bool,
}

/// A perturbation direction tabulated on the grid of a [`GridDensity`].
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub values: Vec<f64>,
}

impl Direction {
    pub fn zero(like: &GridDensity) -> Self {
        Direction {
            values: vec![0.0; like.values.len()],
        }
    }

    pub fn from_fn(like: &GridDensity, f: impl Fn(&DVector<f64>) -> f64) -> Self {
        Direction {
            values: (0..like.values.len()).map(|i| f(&like.point(i))).collect(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

impl GridDensity {
    pub fn from_fn(lo: Vec<f64>, hi: Vec<f64>, nodes: Vec<usize>, f: impl Fn(&DVector<f64>) -> f64) -> Result<Self> {
        let m = nodes.len();
        if m == 0 || m > 2 {
            return Err(Error::QuadratureDimension(m));
        }
        if lo.len() != m || hi.len() != m {
            return Err(Error::Dimension("box bounds do not match node counts".into()));
        }
        if nodes.iter().any(|&k| k < 2) || lo.iter().zip(&hi).any(|(a, b)| !(b > a)) {
            return Err(Error::InvalidArgument("grid needs hi > lo and at least 2 nodes".into()));
        }
        let mut out = GridDensity {
            lo,
            hi,
            nodes,
            values: Vec::new(),
            normalized: false,
        };
        let total: usize = out.nodes.iter().product();
        out.values = (0..total).map(|i| f(&out.point(i))).collect();
        if out.values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("density values must be finite and nonnegative".into()));
        }
        out.normalized = (out.mass() - 1.0).abs() < 1e-8;
        Ok(out)
    }

    /// Gaussian on the box `mean +- width_sd` marginal standard deviations.
    pub fn gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>, nodes: usize, width_sd: f64) -> Result<Self> {
        let m = mean.len();
        if m == 0 || m > 2 {
            return Err(Error::QuadratureDimension(m));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("grid Gaussian needs a positive definite covariance".into()))?;
        let prec = chol.inverse();
        let log_norm = -0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln()
            - chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let sd: Vec<f64> = (0..m).map(|d| cov[(d, d)].sqrt()).collect();
        let lo = (0..m).map(|d| mean[d] - width_sd * sd[d]).collect();
        let hi = (0..m).map(|d| mean[d] + width_sd * sd[d]).collect();
        Self::from_fn(lo, hi, vec![nodes; m], |u| {
            let z = u - mean;
            (log_norm - 0.5 * (z.transpose() * &prec * &z)[(0, 0)]).exp()
        })
    }

    pub fn m(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / (self.nodes[d] - 1) as f64
    }

    fn index(&self, flat: usize) -> [usize; 2] {
        if self.m() == 1 {
            [flat, 0]
        } else {
            [flat / self.nodes[1], flat % self.nodes[1]]
        }
    }

    pub fn point(&self, flat: usize) -> DVector<f64> {
        let idx = self.index(flat);
        DVector::from_fn(self.m(), |d, _| self.lo[d] + idx[d] as f64 * self.spacing(d))
    }

    /// Tensor trapezoid weight of a node.
    pub fn weight(&self, flat: usize) -> f64 {
        let idx = self.index(flat);
        (0..self.m())
            .map(|d| {
                let edge = idx[d] == 0 || idx[d] == self.nodes[d] - 1;
                self.spacing(d) * if edge { 0.5 } else { 1.0 }
            })
            .product()
    }

    /// `int g(u) phi(u) du`
    pub fn integrate(&self, g: impl Fn(&DVector<f64>) -> f64) -> f64 {
        (0..self.values.len())
            .map(|i| self.weight(i) * self.values[i] * g(&self.point(i)))
            .sum()
    }

    pub fn mass(&self) -> f64 {
        (0..self.values.len()).map(|i| self.weight(i) * self.values[i]).sum()
    }

    /// Unnormalized first moment `int u phi(u) du`.
    pub fn first_moment(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for i in 0..self.values.len() {
            out += self.point(i) * (self.weight(i) * self.values[i]);
        }
        out
    }

    /// Unnormalized second moment `int u u^T phi(u) du`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m(), self.m());
        for i in 0..self.values.len() {
            let u = self.point(i);
            out += &u * u.transpose() * (self.weight(i) * self.values[i]);
        }
        out
    }

    /// `int phi ln phi du` with `0 ln 0 = 0`.
    pub fn neg_entropy(&self) -> f64 {
        (0..self.values.len())
            .map(|i| {
                let v = self.values[i];
                if v > 0.0 {
                    self.weight(i) * v * v.ln()
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        -self.neg_entropy()
    }

    /// Rescaled copy with unit mass.
    pub fn normalize(&self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::DensityOverflow);
        }
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v /= mass);
        out.normalized = true;
        Ok(out)
    }
}

/// `e^{eps omega(u)} phi(u)` pointwise; the result is flagged unnormalized.
pub fn perturb_density(phi: &GridDensity, omega: &Direction, eps: f64) -> Result<GridDensity> {
    if omega.values.len() != phi.values.len() {
        return Err(Error::Dimension("direction and density grids differ".into()));
    }
    let values: Vec<f64> = phi
        .values
        .iter()
        .zip(&omega.values)
        .map(|(p, w)| p * (eps * w).exp())
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DensityOverflow);
    }
    Ok(GridDensity {
        values,
        normalized: false,
        ..phi.clone()
    })
}

/// Exogenous part of the type-`k` drift and the tracking target along the
/// frozen mean field.
struct Frozen<'a> {
    spec: &'a PopulationSpec,
    mf: &'a MeanFieldSolution,
    k: usize,
}

impl Frozen<'_> {
    fn exogenous_drift(&self, t: f64) -> Result<DVector<f64>> {
        let p = &self.spec.subpops[self.k];
        let xbar = self.mf.xbar_at(t)?;
        let mubar = self.mf.mubar_at(t)?;
        Ok(expand_block(&p.f, &self.spec.pi) * xbar + expand_block(&p.h, &self.spec.pi) * mubar + p.drift.eval(t))
    }

    fn target(&self, t: f64) -> Result<DVector<f64>> {
        let p = &self.spec.subpops[self.k];
        Ok(expand_block(&p.psi, &self.spec.pi) * self.mf.xbar_at(t)?)
    }

    /// Running cost at `(t, x)` under `phi`, all `u`-integrals by quadrature.
    fn running_cost(&self, t: f64, x: &DVector<f64>, phi: &GridDensity) -> Result<f64> {
        let p = &self.spec.subpops[self.k];
        let dx = x - self.target(t)?;
        let mass = phi.mass();
        let m1 = phi.first_moment();
        let m2 = phi.second_moment();
        let state = 0.5 * dx.dot(&(&p.q * &dx)) + p.eta.dot(&dx);
        let linear = (p.s.transpose() * &dx + &p.nvec).dot(&m1);
        let quad = 0.5 * (&p.r * m2).trace();
        Ok(state + p.phi_lagrange * (mass - 1.0) + linear + quad + p.lambda_explore * phi.neg_entropy())
    }
}

/// Discounted trapezoid sum of the running cost along `state_path`, which must
/// be (to first order) the mean path generated by the density means.
pub fn exploratory_cost_quadrature(
    density_path: &[GridDensity],
    state_path: &Trajectory<DVector<f64>>,
    mf: &MeanFieldSolution,
    k: usize,
    spec: &PopulationSpec,
) -> Result<f64> {
    let frozen = Frozen { spec, mf, k };
    let grid = state_path.grid;
    check_path(&frozen, density_path, state_path)?;
    let mut total = 0.0;
    for (i, (phi, x)) in density_path.iter().zip(&state_path.values).enumerate() {
        let t = grid.time(i);
        let w = if i == 0 || i == grid.steps { 0.5 } else { 1.0 };
        total += w * grid.dt() * (-spec.rho * t).exp() * frozen.running_cost(t, x, phi)?;
    }
    Ok(total)
}

fn check_path(frozen: &Frozen, density_path: &[GridDensity], state_path: &Trajectory<DVector<f64>>) -> Result<()> {
    let grid = state_path.grid;
    if density_path.len() != grid.len() {
        return Err(Error::Dimension("one density per grid node required".into()));
    }
    if density_path.iter().any(|d| d.m() > 2) {
        return Err(Error::QuadratureDimension(density_path[0].m()));
    }
    let p = &frozen.spec.subpops[frozen.k];
    let drift = |i: usize| -> Result<DVector<f64>> {
        let t = grid.time(i);
        Ok(&p.a * &state_path.values[i] + &p.b * density_path[i].first_moment() + frozen.exogenous_drift(t)?)
    };
    let mut scale: f64 = 1.0;
    let mut worst: f64 = 0.0;
    let mut prev = drift(0)?;
    for i in 0..grid.steps {
        let next = drift(i + 1)?;
        let slope = (&state_path.values[i + 1] - &state_path.values[i]) / grid.dt();
        worst = worst.max((slope - (&prev + &next) * 0.5).amax());
        scale = scale.max(next.amax());
        prev = next;
    }
    if worst > 1e-3 * scale {
        return Err(Error::InvalidArgument(format!(
            "state path inconsistent with density means (defect {worst:e})"
        )));
    }
    Ok(())
}

/// One agent's problem on `[0, T]` against the frozen mean field, optionally
/// closed with the equilibrium continuation value `e^{-rho T} V(x_T)` so that
/// the optimal density is optimal for the truncated problem as well.
pub struct TruncatedProblem<'a> {
    pub spec: &'a PopulationSpec,
    pub mf: &'a MeanFieldSolution,
    pub k: usize,
    pub grid: TimeGrid,
    pub x0: DVector<f64>,
    pub terminal_value: bool,
    /// Action grid nodes per dimension.
    pub nodes: usize,
}

impl<'a> TruncatedProblem<'a> {
    pub fn new(spec: &'a PopulationSpec, mf: &'a MeanFieldSolution, k: usize, grid: TimeGrid, x0: DVector<f64>) -> Self {
        TruncatedProblem {
            spec,
            mf,
            k,
            grid,
            x0,
            terminal_value: true,
            nodes: 401,
        }
    }

    fn frozen(&self) -> Frozen<'_> {
        Frozen {
            spec: self.spec,
            mf: self.mf,
            k: self.k,
        }
    }

    /// Trapezoid-rule state path driven by the given action means.
    fn mean_path(&self, mut mean_at: impl FnMut(usize, &DVector<f64>) -> Result<DVector<f64>>, feedback: Option<&DMatrix<f64>>) -> Result<Trajectory<DVector<f64>>> {
        let p = &self.spec.subpops[self.k];
        let n = p.n();
        let h = self.grid.dt();
        let a_eff = match feedback {
            Some(gain) => &p.a - &p.b * gain,
            None => p.a.clone(),
        };
        let eye = DMatrix::<f64>::identity(n, n);
        let lhs = (&eye - &a_eff * (0.5 * h))
            .lu();
        let rhs_mat = &eye + &a_eff * (0.5 * h);
        let frozen = self.frozen();
        let forcing = |i: usize, mean: DVector<f64>| -> Result<DVector<f64>> {
            Ok(&p.b * mean + frozen.exogenous_drift(self.grid.time(i))?)
        };
        let mut values = vec![self.x0.clone()];
        let mut g_prev = forcing(0, mean_at(0, &self.x0)?)?;
        for i in 0..self.grid.steps {
            let x = &values[i];
            let g_next = forcing(i + 1, mean_at(i + 1, x)?)?;
            let next = lhs
                .solve(&(&rhs_mat * x + (&g_prev + &g_next) * (0.5 * h)))
                .ok_or_else(|| Error::InvalidArgument("singular trapezoid step".into()))?;
            values.push(next);
            g_prev = g_next;
        }
        Ok(Trajectory {
            grid: self.grid,
            values,
        })
    }

    /// State path generated by an arbitrary (open-loop) density path.
    pub fn state_path(&self, density_path: &[GridDensity]) -> Result<Trajectory<DVector<f64>>> {
        if density_path.len() != self.grid.len() {
            return Err(Error::Dimension("one density per grid node required".into()));
        }
        let means: Vec<DVector<f64>> = density_path.iter().map(GridDensity::first_moment).collect();
        self.mean_path(|i, _| Ok(means[i].clone()), None)
    }

    /// The optimal density along its own mean path, with the mean shifted by
    /// `shift` and the covariance scaled by `cov_scale`.
    pub fn optimal_path(&self, shift: f64, cov_scale: f64) -> Result<Vec<GridDensity>> {
        let policy = GaussianPolicy::new(self.mf, self.spec, self.k)?;
        let m = policy.m();
        if m > 2 {
            return Err(Error::QuadratureDimension(m));
        }
        let ff: Vec<DVector<f64>> = (0..self.grid.len())
            .map(|i| policy.feedforward(self.grid.time(i)))
            .collect::<Result<_>>()?;
        let bump = DVector::from_element(m, shift);
        let path = self.mean_path(|i, _| Ok(&ff[i] + &bump), Some(&policy.gain))?;
        let cov = exploration_covariance(&self.spec.subpops[self.k])? * cov_scale;
        path.values
            .iter()
            .enumerate()
            .map(|(i, x)| GridDensity::gaussian(&(policy.mean_with(&ff[i], x) + &bump), &cov, self.nodes, 8.0))
            .collect()
    }

    /// `V(x) = 1/2 x^T P x + s(T)^T x`, dropping the policy-independent constant.
    fn continuation(&self, x: &DVector<f64>) -> Result<f64> {
        let pi = &self.mf.pi[self.k].pi;
        let s = self.mf.s_at(self.k, self.grid.t1)?;
        Ok(0.5 * x.dot(&(pi * x)) + s.dot(x))
    }

    pub fn cost(&self, density_path: &[GridDensity]) -> Result<f64> {
        let path = self.state_path(density_path)?;
        let mut total = exploratory_cost_quadrature(density_path, &path, self.mf, self.k, self.spec)?;
        if self.terminal_value {
            total += (-self.spec.rho * self.grid.t1).exp() * self.continuation(path.last())?;
        }
        Ok(total)
    }
}

/// Central difference `[J(Phi^{+eps}) - J(Phi^{-eps})] / (2 eps)` along `omega`.
pub fn gateaux_derivative(
    problem: &TruncatedProblem,
    phi_path: &[GridDensity],
    omega_path: &[Direction],
    eps: f64,
) -> Result<f64> {
    if phi_path.len() != omega_path.len() {
        return Err(Error::Dimension("density and direction paths differ in length".into()));
    }
    if phi_path.first().map_or(0, GridDensity::m) != 1 {
        return Err(Error::InvalidArgument("directional derivative check is scalar-control only".into()));
    }
    let shifted = |sign: f64| -> Result<Vec<GridDensity>> {
        phi_path
            .iter()
            .zip(omega_path)
            .map(|(phi, w)| perturb_density(phi, w, sign * eps))
            .collect()
    };
    let plus = problem.cost(&shifted(1.0)?)?;
    let minus = problem.cost(&shifted(-1.0)?)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Probabilists' Hermite polynomial `He_j`.
pub fn hermite(j: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, z);
    if j == 0 {
        return 1.0;
    }
    for i in 1..j {
        let next = z * cur - i as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Random smooth direction path: Hermite modes `He_1..He_4` of the
/// standardized action with slowly varying random coefficients, projected so
/// that `int omega phi du = 0` at every time (mass-preserving to first order).
pub fn random_admissible_directions<R: Rng + ?Sized>(phi_path: &[GridDensity], horizon: f64, rng: &mut R) -> Vec<Direction> {
    let coeffs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let steps = phi_path.len().saturating_sub(1).max(1);
    phi_path
        .iter()
        .enumerate()
        .map(|(i, phi)| {
            let t = horizon * i as f64 / steps as f64;
            let mass = phi.mass();
            let mean = phi.first_moment()[0] / mass;
            let var = phi.second_moment()[(0, 0)] / mass - mean * mean;
            let sd = var.sqrt();
            let raw = Direction::from_fn(phi, |u| {
                let z = (u[0] - mean) / sd;
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(j, (a, b, f, ph))| (a + b * (f * t / horizon * std::f64::consts::TAU + ph).sin()) * hermite(j + 1, z) / ((j + 1) as f64).powi(2))
                    .sum()
            });
            let avg = (0..raw.values.len())
                .map(|q| phi.weight(q) * phi.values[q] * raw.values[q])
                .sum::<f64>()
                / mass;
            Direction {
                values: raw.values.iter().map(|v| v - avg).collect(),
            }
        })
        .collect()
}

/// `-He_1` of the standardized action: moves mass toward lower `u`.
pub fn mean_down_direction(phi_path: &[GridDensity]) -> Vec<Direction> {
    phi_path
        .iter()
        .map(|phi| {
            let mass = phi.mass();
            let mean = phi.first_moment()[0] / mass;
            let sd = (phi.second_moment()[(0, 0)] / mass - mean * mean).sqrt();
            Direction::from_fn(phi, |u| -(u[0] - mean) / sd)
        })
        .collect()
}
