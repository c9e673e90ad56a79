//! Discounted Riccati equation with cross terms,
//! `rho P = P A + A^T P - (P B + S) R^-1 (B^T P + S^T) + Q`,
//! solved by running the differential form backward from `P(T) = 0` until it
//! stops moving, plus the finite-horizon transient and the stability margins.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SubpopParams;
use crate::numerics::{integrate_ode, is_pd, min_sym_eigenvalue, spectral_abscissa, Direction, TimeGrid, Trajectory};
use crate::serde_mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    #[serde(rename = "Pi", with = "serde_mat::matrix")]
    pub pi: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub closed_loop_abscissa: f64,
}

/// Right-hand side `Q + P A + A^T P - rho P - (P B + S) R^-1 (B^T P + S^T)`;
/// zero exactly at the stationary solution.
pub fn riccati_rhs(p: &SubpopParams, r_inv: &DMatrix<f64>, rho: f64, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let pbs = pi * &p.b + &p.s;
    let out = &p.q + pi * &p.a + p.a.transpose() * pi - pi * rho - &pbs * r_inv * pbs.transpose();
    (&out + out.transpose()) * 0.5
}

/// Frobenius norm of the stationary defect.
pub fn are_residual(p: &SubpopParams, rho: f64, pi: &DMatrix<f64>) -> Result<f64> {
    let r_inv = p.r_inv()?;
    Ok(riccati_rhs(p, &r_inv, rho, pi).norm())
}

/// `K = R^-1 (B^T P + S^T)`, so the optimal feedback is `-K x`.
pub fn feedback_gain(p: &SubpopParams, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(p.r_inv()? * (p.b.transpose() * pi + p.s.transpose()))
}

pub fn closed_loop(p: &SubpopParams, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(&p.a - &p.b * feedback_gain(p, pi)?)
}

fn step_size(p: &SubpopParams, r_inv: &DMatrix<f64>, rho: f64) -> f64 {
    let brb = (&p.b * r_inv * p.b.transpose()).norm();
    let srb = (&p.s * r_inv * p.b.transpose()).norm();
    let scale = 1.0 + 2.0 * p.a.norm() + rho + 2.0 * (p.q.norm() * brb).sqrt() + 2.0 * srb;
    (0.2 / scale).min(0.05)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn solve_discounted_are(p: &SubpopParams, rho: f64, tol: f64) -> Result<RiccatiSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let r_inv = p.r_inv()?;
    let n = p.n();
    let h = step_size(p, &r_inv, rho);
    let max_horizon = 200.0 / rho.max(0.1);
    let window = (1.0 / h).round().max(1.0) as usize;
    let max_steps = (max_horizon / h).ceil() as usize;

    let f = |pi: &DMatrix<f64>| riccati_rhs(p, &r_inv, rho, pi);
    // Time-to-go formulation: dP/dtau = f(P), P(0) = 0.
    let mut pi = DMatrix::zeros(n, n);
    let mut snapshot = pi.clone();
    for step in 1..=max_steps {
        let k1 = f(&pi);
        let k2 = f(&(&pi + &k1 * (0.5 * h)));
        let k3 = f(&(&pi + &k2 * (0.5 * h)));
        let k4 = f(&(&pi + &k3 * h));
        pi = symmetrize(&pi + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
        if !pi.iter().all(|x| x.is_finite()) || pi.norm() > 1e150 {
            return Err(Error::RiccatiNotStabilized(format!(
                "solution escaped after time-to-go {:.3}",
                step as f64 * h
            )));
        }
        if step % window == 0 {
            let moved = (&pi - &snapshot).norm();
            snapshot = pi.clone();
            let residual = f(&pi).norm();
            if moved < tol * (1.0 + pi.norm()) && residual <= tol * (1.0 + pi.norm()) {
                let closed_loop_abscissa = spectral_abscissa(&closed_loop(p, &pi)?)?;
                return Ok(RiccatiSolution {
                    pi,
                    residual,
                    iterations: step,
                    closed_loop_abscissa,
                });
            }
        }
    }
    Err(Error::RiccatiNotStabilized(format!(
        "no stationary limit within horizon {max_horizon}"
    )))
}

/// Backward transient from `pi_t` at `grid.t1`.
pub fn solve_differential_riccati(
    p: &SubpopParams,
    rho: f64,
    pi_t: &DMatrix<f64>,
    grid: TimeGrid,
) -> Result<Trajectory<DMatrix<f64>>> {
    let r_inv = p.r_inv()?;
    if pi_t.shape() != (p.n(), p.n()) {
        return Err(Error::Dimension("terminal matrix shape".into()));
    }
    let traj = integrate_ode(
        |_, pi: &DMatrix<f64>| {
            if pi.norm() > 1e150 {
                // Force the blow-up path so the escape time is reported.
                return DMatrix::from_element(pi.nrows(), pi.ncols(), f64::INFINITY);
            }
            -riccati_rhs(p, &r_inv, rho, pi)
        },
        symmetrize(pi_t.clone()),
        grid,
        Direction::Backward,
    )
    .map_err(|e| match e {
        Error::OdeBlowUp { t } => Error::RiccatiEscape { t },
        other => other,
    })?;
    Ok(traj.map(|m| symmetrize(m.clone())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub ok: bool,
    pub pi_min_eigenvalue: f64,
    /// `rho/2 - abscissa(Abar)`
    pub abar_margin: f64,
    /// `rho/2 - abscissa(A - B R^-1 (B^T P + S^T))`
    pub closed_loop_margin: f64,
    pub messages: Vec<String>,
}

pub fn verify_stability(solution: &RiccatiSolution, abar: &DMatrix<f64>, rho: f64) -> StabilityReport {
    let mut messages = Vec::new();
    let pi_min_eigenvalue = min_sym_eigenvalue(&solution.pi);
    if !is_pd(&solution.pi) {
        messages.push("Π not positive definite".to_string());
    }
    let abar_margin = match spectral_abscissa(abar) {
        Ok(a) => rho / 2.0 - a,
        Err(_) => f64::NAN,
    };
    if !(abar_margin > 0.0) {
        messages.push(format!("aggregate drift margin {abar_margin} not positive"));
    }
    let closed_loop_margin = rho / 2.0 - solution.closed_loop_abscissa;
    if !(closed_loop_margin > 0.0) {
        messages.push(format!("closed-loop margin {closed_loop_margin} not positive"));
    }
    StabilityReport {
        ok: messages.is_empty(),
        pi_min_eigenvalue,
        abar_margin,
        closed_loop_margin,
        messages,
    }
}
