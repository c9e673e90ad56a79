//! Mean-field consistency system: gains `J`, `L(t)`, aggregate drift
//! `Abar`, `mbar(t)`, the backward offsets `s_k(t)` and the forward mean
//! `xbar(t)`, tied together by a damped Picard iteration.
//!
//! The classical and the exploratory systems are the same map (the
//! exploratory policy mean is the classical control), so both labels run
//! through one code path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{expand_block, selector_matrix, validate_spec, PopulationSpec};
use crate::numerics::{integrate_ode, spectral_abscissa, Direction, TimeGrid, Trajectory};
use crate::riccati::{are_residual, solve_discounted_are, verify_stability, RiccatiSolution, StabilityReport};
use crate::serde_mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Truncation horizon; `None` picks one from the discount and the slowest
    /// aggregate mode.
    pub horizon: Option<f64>,
    /// Grid steps; `None` uses `dt = 0.01`.
    pub steps: Option<usize>,
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub riccati_tol: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            horizon: None,
            steps: None,
            damping: 0.5,
            tol: 1e-10,
            max_iters: 2000,
            riccati_tol: 1e-11,
            exec: Exec::default(),
        }
    }
}

impl SolverConfig {
    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument("damping must lie in (0, 1]".into()));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument("horizon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum System {
    /// Deterministic feedback controls.
    Classical,
    /// Gaussian control distributions.
    Exploratory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldSolution {
    pub grid: TimeGrid,
    #[serde(rename = "Pi")]
    pub pi: Vec<RiccatiSolution>,
    #[serde(with = "serde_mat::trajectory_vec")]
    pub s: Vec<Trajectory<DVector<f64>>>,
    #[serde(rename = "J", with = "serde_mat::matrix")]
    pub j: DMatrix<f64>,
    #[serde(rename = "L", with = "serde_mat::trajectory")]
    pub l: Trajectory<DVector<f64>>,
    #[serde(rename = "Abar", with = "serde_mat::matrix")]
    pub abar: DMatrix<f64>,
    #[serde(with = "serde_mat::trajectory")]
    pub mbar: Trajectory<DVector<f64>>,
    #[serde(with = "serde_mat::trajectory")]
    pub xbar: Trajectory<DVector<f64>>,
    #[serde(with = "serde_mat::trajectory")]
    pub mubar: Trajectory<DVector<f64>>,
    pub residual: f64,
    pub iterations: usize,
}

impl MeanFieldSolution {
    pub fn types(&self) -> usize {
        self.pi.len()
    }

    pub fn n(&self) -> usize {
        self.pi.first().map_or(0, |p| p.pi.nrows())
    }

    pub fn m(&self) -> usize {
        self.j.nrows() / self.types().max(1)
    }

    pub fn xbar_at(&self, t: f64) -> Result<DVector<f64>> {
        self.xbar.at(t)
    }

    pub fn mubar_at(&self, t: f64) -> Result<DVector<f64>> {
        self.mubar.at(t)
    }

    pub fn s_at(&self, k: usize, t: f64) -> Result<DVector<f64>> {
        self.s
            .get(k)
            .ok_or(Error::IndexOutOfRange {
                index: k,
                count: self.types(),
            })?
            .at(t)
    }

    /// Type-`k` block of the stacked mean state.
    pub fn type_mean(&self, k: usize, t: f64) -> Result<DVector<f64>> {
        let n = self.n();
        Ok(self.xbar_at(t)?.rows(k * n, n).into_owned())
    }

    pub fn stability(&self, rho: f64) -> Vec<StabilityReport> {
        self.pi.iter().map(|p| verify_stability(p, &self.abar, rho)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Time-invariant coefficients of the consistency map for one type.
struct TypeCoeffs {
    pi: DMatrix<f64>,
    hbar: DMatrix<f64>,
    /// `rho I - A_cl^T`
    s_hom: DMatrix<f64>,
    /// coefficient of `xbar` in the offset equation
    s_x: DMatrix<f64>,
    /// coefficient of `mubar` in the offset equation
    s_mu: DMatrix<f64>,
    s_const: DVector<f64>,
    /// `L_k = l_s s_k + l_const`
    l_s: DMatrix<f64>,
    l_const: DVector<f64>,
    b: DMatrix<f64>,
}

struct Coupling {
    n: usize,
    m: usize,
    types: Vec<TypeCoeffs>,
    j: DMatrix<f64>,
    abar: DMatrix<f64>,
}

impl Coupling {
    fn new(spec: &PopulationSpec, pis: &[DMatrix<f64>]) -> Result<Self> {
        let kk = spec.types();
        if pis.len() != kk {
            return Err(Error::Dimension(format!("{} Riccati solutions for {kk} types", pis.len())));
        }
        let n = spec.n();
        let m = spec.m();
        let mut j = DMatrix::zeros(m * kk, n * kk);
        let mut blocks = Vec::with_capacity(kk);
        let mut pieces = Vec::with_capacity(kk);
        for (k, (p, pi)) in spec.subpops.iter().zip(pis).enumerate() {
            if pi.shape() != (n, n) {
                return Err(Error::Dimension(format!("Π_{k} has shape {:?}", pi.shape())));
            }
            let r_inv = p.r_inv()?;
            let e_k = selector_matrix(k, n, kk)?;
            let gain = &r_inv * (p.b.transpose() * pi + p.s.transpose());
            let a_cl = &p.a - &p.b * &gain;
            let psibar = expand_block(&p.psi, &spec.pi);
            let fbar = expand_block(&p.f, &spec.pi);
            let hbar = expand_block(&p.h, &spec.pi);
            let rs_psi = &r_inv * p.s.transpose() * &psibar;
            let j_k = -&gain * &e_k + &rs_psi;
            j.view_mut((k * m, 0), (m, n * kk)).copy_from(&j_k);

            let br = &p.b * &r_inv;
            let sr = &p.s * &r_inv;
            let s_hom = DMatrix::identity(n, n) * spec.rho - a_cl.transpose();
            let s_x = -pi * (&fbar + &p.b * &rs_psi) - (&sr * p.s.transpose() - &p.q) * &psibar;
            let s_mu = -pi * &hbar;
            let s_const = pi * &br * &p.nvec + &sr * &p.nvec - &p.eta;
            let l_s = -&r_inv * p.b.transpose();
            let l_const = -&r_inv * &p.nvec;
            pieces.push((a_cl * &e_k + &p.b * &rs_psi + &fbar, hbar.clone()));
            blocks.push(TypeCoeffs {
                pi: pi.clone(),
                hbar,
                s_hom,
                s_x,
                s_mu,
                s_const,
                l_s,
                l_const,
                b: p.b.clone(),
            });
        }
        let mut abar = DMatrix::zeros(n * kk, n * kk);
        for (k, (base, hbar)) in pieces.into_iter().enumerate() {
            abar.view_mut((k * n, 0), (n, n * kk)).copy_from(&(base + hbar * &j));
        }
        Ok(Coupling {
            n,
            m,
            types: blocks,
            j,
            abar,
        })
    }

    fn stacked_l(&self, s: &[DVector<f64>]) -> DVector<f64> {
        let mut l = DVector::zeros(self.m * self.types.len());
        for (k, c) in self.types.iter().enumerate() {
            l.rows_mut(k * self.m, self.m).copy_from(&(&c.l_s * &s[k] + &c.l_const));
        }
        l
    }

    /// `mbar` without the drift offset: block `k` is `B_k L_k + Hbar_k L`.
    fn mbar_without_drift(&self, l: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n * self.types.len());
        for (k, c) in self.types.iter().enumerate() {
            let own = l.rows(k * self.m, self.m);
            out.rows_mut(k * self.n, self.n).copy_from(&(&c.b * own + &c.hbar * l));
        }
        out
    }

    fn offset_forcing(&self, k: usize, xbar: &DVector<f64>, mubar: &DVector<f64>) -> DVector<f64> {
        let c = &self.types[k];
        &c.s_x * xbar + &c.s_mu * mubar
    }

    fn offset_rhs(&self, spec: &PopulationSpec, k: usize, t: f64, s: &DVector<f64>, forcing: &DVector<f64>) -> DVector<f64> {
        let c = &self.types[k];
        &c.s_hom * s + forcing + &c.s_const - &c.pi * spec.subpops[k].drift.eval(t)
    }

    /// Affine right-hand side `z' = M z + c` of the joint system in
    /// `z = (s_1, .., s_K, xbar)` with `mubar = J xbar + L(s)` substituted and
    /// the drift offsets frozen at time `t`.
    fn joint_system(&self, spec: &PopulationSpec, t: f64) -> (DMatrix<f64>, DVector<f64>) {
        let kk = self.types.len();
        let nk = self.n * kk;
        let dim = 2 * nk;
        let b = stacked_drift(spec, t);
        let f = |z: &DVector<f64>| -> DVector<f64> {
            let (s, xbar) = self.split(z);
            let l = self.stacked_l(&s);
            let mubar = &self.j * &xbar + &l;
            let mut out = DVector::zeros(dim);
            for k in 0..kk {
                let forcing = self.offset_forcing(k, &xbar, &mubar);
                out.rows_mut(k * self.n, self.n)
                    .copy_from(&self.offset_rhs(spec, k, t, &s[k], &forcing));
            }
            out.rows_mut(nk, nk)
                .copy_from(&(&self.abar * &xbar + self.mbar_without_drift(&l) + &b));
            out
        };
        let c = f(&DVector::zeros(dim));
        let mut mat = DMatrix::zeros(dim, dim);
        for col in 0..dim {
            let mut e = DVector::zeros(dim);
            e[col] = 1.0;
            mat.set_column(col, &(f(&e) - &c));
        }
        (mat, c)
    }

    fn split(&self, z: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let nk = self.n * self.types.len();
        let s = (0..self.types.len())
            .map(|k| z.rows(k * self.n, self.n).into_owned())
            .collect();
        (s, z.rows(nk, nk).into_owned())
    }

    /// Joint algebraic steady state of the offsets and the mean with the
    /// drift offsets frozen at time `t`.
    fn steady_state(&self, spec: &PopulationSpec, t: f64) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
        let (mat, c) = self.joint_system(spec, t);
        let sv = mat.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-13 * smax.max(1.0)) {
            return Err(Error::SteadyStateUndefined(format!(
                "linear system is singular (smallest singular value {smin:e})"
            )));
        }
        let z = mat
            .lu()
            .solve(&(-c))
            .ok_or_else(|| Error::SteadyStateUndefined("LU solve failed".into()))?;
        Ok(self.split(&z))
    }

    /// Slowest decay rate among the stable modes of the joint system; the
    /// equilibrium mean relaxes along these, which can be slower than the
    /// spectrum of `Abar` alone suggests.
    fn slowest_stable_rate(&self, spec: &PopulationSpec) -> Result<f64> {
        let (mat, _) = self.joint_system(spec, 0.0);
        let schur = mat.try_schur(1e-14, 10_000).ok_or(Error::Eigen)?;
        Ok(schur
            .complex_eigenvalues()
            .iter()
            .filter(|z| z.re < 0.0)
            .map(|z| -z.re)
            .fold(f64::INFINITY, f64::min))
    }
}

fn stacked_drift(spec: &PopulationSpec, t: f64) -> DVector<f64> {
    let n = spec.n();
    let mut out = DVector::zeros(n * spec.types());
    for (k, p) in spec.subpops.iter().enumerate() {
        out.rows_mut(k * n, n).copy_from(&p.drift.eval(t));
    }
    out
}

fn stacked_xi(spec: &PopulationSpec) -> DVector<f64> {
    let n = spec.n();
    let mut out = DVector::zeros(n * spec.types());
    for k in 0..spec.types() {
        out.rows_mut(k * n, n).copy_from(&spec.x0_mean);
    }
    out
}

fn require_valid(spec: &PopulationSpec) -> Result<()> {
    let report = validate_spec(spec);
    if report.ok {
        return Ok(());
    }
    let msgs: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
    Err(Error::InvalidSpec(msgs.join("; ")))
}

fn check_grid(s_trajs: &[Trajectory<DVector<f64>>], kk: usize) -> Result<TimeGrid> {
    if s_trajs.len() != kk {
        return Err(Error::Dimension(format!("{} offset paths for {kk} types", s_trajs.len())));
    }
    let grid = s_trajs[0].grid;
    if s_trajs.iter().any(|s| s.grid != grid || s.values.len() != grid.len()) {
        return Err(Error::Dimension("offset paths on different grids".into()));
    }
    Ok(grid)
}

/// Stacked gains `J` (`mK x nK`) and the feedforward path `L(t)`.
pub fn feedback_gains(
    pis: &[DMatrix<f64>],
    s_trajs: &[Trajectory<DVector<f64>>],
    spec: &PopulationSpec,
) -> Result<(DMatrix<f64>, Trajectory<DVector<f64>>)> {
    let c = Coupling::new(spec, pis)?;
    let grid = check_grid(s_trajs, spec.types())?;
    let l = Trajectory {
        grid,
        values: (0..grid.len())
            .map(|i| {
                let s: Vec<DVector<f64>> = s_trajs.iter().map(|tr| tr.values[i].clone()).collect();
                if s.iter().any(|v| v.len() != c.n) {
                    return Err(Error::Dimension("offset vector length".into()));
                }
                Ok(c.stacked_l(&s))
            })
            .collect::<Result<_>>()?,
    };
    Ok((c.j, l))
}

/// `Abar` (`nK x nK`) and `mbar(t)`.
pub fn aggregate_drift(
    spec: &PopulationSpec,
    pis: &[DMatrix<f64>],
    j: &DMatrix<f64>,
    s_trajs: &[Trajectory<DVector<f64>>],
) -> Result<(DMatrix<f64>, Trajectory<DVector<f64>>)> {
    let c = Coupling::new(spec, pis)?;
    if j.shape() != c.j.shape() {
        return Err(Error::Dimension(format!("J has shape {:?}, expected {:?}", j.shape(), c.j.shape())));
    }
    let (_, l) = feedback_gains(pis, s_trajs, spec)?;
    let mut abar = DMatrix::zeros(c.n * spec.types(), c.n * spec.types());
    for (k, p) in spec.subpops.iter().enumerate() {
        let r_inv = p.r_inv()?;
        let e_k = selector_matrix(k, c.n, spec.types())?;
        let gain = &r_inv * (p.b.transpose() * &pis[k] + p.s.transpose());
        let psibar = expand_block(&p.psi, &spec.pi);
        let row = (&p.a - &p.b * gain) * e_k
            + &p.b * &r_inv * p.s.transpose() * psibar
            + expand_block(&p.f, &spec.pi)
            + expand_block(&p.h, &spec.pi) * j;
        abar.view_mut((k * c.n, 0), (c.n, c.n * spec.types())).copy_from(&row);
    }
    let mbar = Trajectory {
        grid: l.grid,
        values: l
            .values
            .iter()
            .enumerate()
            .map(|(i, li)| c.mbar_without_drift(li) + stacked_drift(spec, l.grid.time(i)))
            .collect(),
    };
    Ok((abar, mbar))
}

/// Joint steady state `(s_inf, xbar_inf)`; needs constant drift offsets.
pub fn steady_state(spec: &PopulationSpec, pis: &[DMatrix<f64>]) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
    if spec.subpops.iter().any(|p| !p.drift.is_constant()) {
        return Err(Error::SteadyStateUndefined("drift offset b is time-varying".into()));
    }
    Coupling::new(spec, pis)?.steady_state(spec, 0.0)
}

fn decoupled(spec: &PopulationSpec) -> PopulationSpec {
    let mut out = spec.clone();
    for p in &mut out.subpops {
        p.f.fill(0.0);
        p.h.fill(0.0);
        p.psi.fill(0.0);
    }
    out
}

/// Truncation horizon: long enough that both the discount factor and the
/// slowest relaxation mode fall below `1e-8`.
pub fn auto_horizon(rho: f64, slowest_rate: f64) -> f64 {
    let decay = 8.0 * std::f64::consts::LN_10;
    (decay / rho.min(slowest_rate).max(1e-3)).min(2000.0)
}

pub fn solve_consistency(spec: &PopulationSpec, config: &SolverConfig) -> Result<MeanFieldSolution> {
    solve_system(spec, config, System::Exploratory)
}

/// Same fixed point for either label.
pub fn solve_system(spec: &PopulationSpec, config: &SolverConfig, _system: System) -> Result<MeanFieldSolution> {
    config.check()?;
    require_valid(spec)?;
    let riccati: Vec<RiccatiSolution> = config
        .exec
        .try_map(spec.types(), |k| solve_discounted_are(&spec.subpops[k], spec.rho, config.riccati_tol))?;
    let pis: Vec<DMatrix<f64>> = riccati.iter().map(|r| r.pi.clone()).collect();
    let coupling = Coupling::new(spec, &pis)?;

    let alpha = spectral_abscissa(&coupling.abar)?;
    if alpha >= spec.rho / 2.0 {
        return Err(Error::ConsistencyDiverged(format!(
            "aggregate drift has spectral abscissa {alpha} ≥ rho/2 = {}",
            spec.rho / 2.0
        )));
    }
    let horizon = match config.horizon {
        Some(h) => h,
        None => auto_horizon(spec.rho, coupling.slowest_stable_rate(spec)?),
    };
    let steps = config.steps.unwrap_or_else(|| ((horizon / 0.01).ceil() as usize).max(4));
    let grid = TimeGrid::new(0.0, horizon, steps)?;

    let (s_inf, _) = coupling.steady_state(spec, horizon)?;
    let xi = stacked_xi(spec);

    // Iterate 0: xbar frozen at xi, offsets at the decoupled steady state.
    let plain = decoupled(spec);
    let (s0, _) = Coupling::new(&plain, &pis)?.steady_state(&plain, 0.0)?;
    let l0 = coupling.stacked_l(&s0);
    let mut xbar = Trajectory::constant(grid, xi.clone());
    let mut mubar = Trajectory::constant(grid, &coupling.j * &xi + l0);

    let damping = if spec.is_uncoupled() { 1.0 } else { config.damping };
    let picard = |xbar: &Trajectory<DVector<f64>>, mubar: &Trajectory<DVector<f64>>| {
        picard_map(spec, &coupling, &s_inf, &xi, xbar, mubar, config.exec)
    };

    for iteration in 0..=config.max_iters {
        let (s, l, mbar_nodes, xbar_new, mubar_new) = picard(&xbar, &mubar)?;
        let change = sup_diff(&xbar_new, &xbar).max(sup_diff(&mubar_new, &mubar));
        if !change.is_finite() || change > 1e12 {
            return Err(Error::ConsistencyDiverged(format!(
                "update size {change:e} at iteration {iteration}"
            )));
        }
        if change < config.tol {
            let mut sol = MeanFieldSolution {
                grid,
                pi: riccati,
                s,
                j: coupling.j.clone(),
                l,
                abar: coupling.abar.clone(),
                mbar: mbar_nodes,
                xbar: xbar_new,
                mubar: mubar_new,
                residual: 0.0,
                iterations: iteration,
            };
            sol.residual = consistency_residual(&sol, spec);
            return Ok(sol);
        }
        if iteration == config.max_iters {
            break;
        }
        xbar = blend(&xbar_new, &xbar, damping);
        mubar = blend(&mubar_new, &mubar, damping);
    }
    Err(Error::ConsistencyDiverged(format!(
        "no convergence within {} iterations",
        config.max_iters
    )))
}

type MapOutput = (
    Vec<Trajectory<DVector<f64>>>,
    Trajectory<DVector<f64>>,
    Trajectory<DVector<f64>>,
    Trajectory<DVector<f64>>,
    Trajectory<DVector<f64>>,
);

fn picard_map(
    spec: &PopulationSpec,
    c: &Coupling,
    s_inf: &[DVector<f64>],
    xi: &DVector<f64>,
    xbar: &Trajectory<DVector<f64>>,
    mubar: &Trajectory<DVector<f64>>,
    exec: Exec,
) -> Result<MapOutput> {
    let grid = xbar.grid;
    let s: Vec<Trajectory<DVector<f64>>> = exec.try_map(c.types.len(), |k| {
        let forcing = Trajectory {
            grid,
            values: xbar
                .values
                .iter()
                .zip(&mubar.values)
                .map(|(x, mu)| c.offset_forcing(k, x, mu))
                .collect(),
        };
        integrate_ode(
            |t, s: &DVector<f64>| {
                let f = forcing.at_cubic(t).expect("stage time inside grid");
                c.offset_rhs(spec, k, t, s, &f)
            },
            s_inf[k].clone(),
            grid,
            Direction::Backward,
        )
    })?;
    let l = Trajectory {
        grid,
        values: (0..grid.len())
            .map(|i| {
                let si: Vec<DVector<f64>> = s.iter().map(|tr| tr.values[i].clone()).collect();
                c.stacked_l(&si)
            })
            .collect(),
    };
    let m_l = l.map(|li| c.mbar_without_drift(li));
    let xbar_new = integrate_ode(
        |t, x: &DVector<f64>| &c.abar * x + m_l.at_cubic(t).expect("stage time inside grid") + stacked_drift(spec, t),
        xi.clone(),
        grid,
        Direction::Forward,
    )?;
    let mbar = Trajectory {
        grid,
        values: m_l
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + stacked_drift(spec, grid.time(i)))
            .collect(),
    };
    let mubar_new = Trajectory {
        grid,
        values: xbar_new
            .values
            .iter()
            .zip(&l.values)
            .map(|(x, li)| &c.j * x + li)
            .collect(),
    };
    Ok((s, l, mbar, xbar_new, mubar_new))
}

fn sup_diff(a: &Trajectory<DVector<f64>>, b: &Trajectory<DVector<f64>>) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

fn blend(new: &Trajectory<DVector<f64>>, old: &Trajectory<DVector<f64>>, theta: f64) -> Trajectory<DVector<f64>> {
    if theta == 1.0 {
        return new.clone();
    }
    Trajectory {
        grid: new.grid,
        values: new
            .values
            .iter()
            .zip(&old.values)
            .map(|(a, b)| a * theta + b * (1.0 - theta))
            .collect(),
    }
}

/// Independent re-check of a solution: every right-hand side is rebuilt
/// from the raw parameters (not from the solver's cached coefficients) and
/// compared with fourth-order central differences of the stored paths on
/// interior nodes. Returns the largest absolute defect.
pub fn consistency_residual(sol: &MeanFieldSolution, spec: &PopulationSpec) -> f64 {
    residual_parts(sol, spec).unwrap_or(f64::INFINITY)
}

fn residual_parts(sol: &MeanFieldSolution, spec: &PopulationSpec) -> Result<f64> {
    let kk = spec.types();
    let n = spec.n();
    let m = spec.m();
    if sol.pi.len() != kk || sol.s.len() != kk {
        return Err(Error::Dimension("solution does not match spec".into()));
    }
    let grid = sol.grid;
    let h = grid.dt();
    let mut worst: f64 = 0.0;

    let mut j = DMatrix::zeros(m * kk, n * kk);
    let mut r_invs = Vec::with_capacity(kk);
    for (k, p) in spec.subpops.iter().enumerate() {
        let pi = &sol.pi[k].pi;
        worst = worst.max(are_residual(p, spec.rho, pi)?);
        let r_inv = p.r_inv()?;
        let psibar = expand_block(&p.psi, &spec.pi);
        let row = -&r_inv * (p.b.transpose() * pi + p.s.transpose()) * selector_matrix(k, n, kk)?
            + &r_inv * p.s.transpose() * psibar;
        j.view_mut((k * m, 0), (m, n * kk)).copy_from(&row);
        r_invs.push(r_inv);
    }
    worst = worst.max((&j - &sol.j).amax());

    let l_at = |i: usize| -> DVector<f64> {
        let mut l = DVector::zeros(m * kk);
        for (k, p) in spec.subpops.iter().enumerate() {
            let v = -&r_invs[k] * (p.b.transpose() * &sol.s[k].values[i] + &p.nvec);
            l.rows_mut(k * m, m).copy_from(&v);
        }
        l
    };
    for i in 0..grid.len() {
        let expect = &j * &sol.xbar.values[i] + l_at(i);
        worst = worst.max((&sol.mubar.values[i] - expect).amax());
    }
    worst = worst.max((&sol.xbar.values[0] - stacked_xi(spec)).amax());

    let fd = |path: &Trajectory<DVector<f64>>, i: usize| -> DVector<f64> {
        let v = &path.values;
        (-&v[i + 2] + &v[i + 1] * 8.0 - &v[i - 1] * 8.0 + &v[i - 2]) / (12.0 * h)
    };
    if grid.steps < 4 {
        return Ok(worst);
    }
    for i in 2..=grid.steps - 2 {
        let t = grid.time(i);
        let xbar = &sol.xbar.values[i];
        let mubar = &sol.mubar.values[i];
        let dx = fd(&sol.xbar, i);
        for (k, p) in spec.subpops.iter().enumerate() {
            let fbar_x = expand_block(&p.f, &spec.pi) * xbar;
            let hbar_mu = expand_block(&p.h, &spec.pi) * mubar;
            let b = p.drift.eval(t);
            let drift = &p.a * xbar.rows(k * n, n) + &p.b * mubar.rows(k * m, m) + &fbar_x + &hbar_mu + &b;
            worst = worst.max((dx.rows(k * n, n) - drift).amax());

            let s = &sol.s[k].values[i];
            let pi = &sol.pi[k].pi;
            let y = expand_block(&p.psi, &spec.pi) * xbar;
            let g = fbar_x + hbar_mu + b;
            let ds = s * spec.rho - p.a.transpose() * s - pi * g
                + (pi * &p.b + &p.s) * &r_invs[k] * (p.b.transpose() * s - p.s.transpose() * &y + &p.nvec)
                + &p.q * &y
                - &p.eta;
            worst = worst.max((fd(&sol.s[k], i) - ds).amax());
        }
    }
    Ok(worst)
}

#[cfg(test)]
pub(crate) mod tests_support {
    pub use crate::reference::two_type as two_type_coupled;
}
