//! Shared kernels: fixed-step RK4, spectral checks, PSD factorization,
//! Gaussian sampling, log-log rate fitting and per-agent rng streams.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t1 > t0) || steps == 0 || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t1 > t0 and steps > 0 (got [{t0}, {t1}], {steps})"
            )));
        }
        Ok(TimeGrid { t0, t1, steps })
    }

    /// Grid on `[0, horizon]` with step as close to `dt` as divides the horizon.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        let steps = (horizon / dt).round().max(1.0) as usize;
        Self::new(0.0, horizon, steps)
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t1
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    /// Index of the grid node nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let i = ((t - self.t0) / self.dt()).round();
        i.clamp(0.0, self.steps as f64) as usize
    }

    /// Re-checks the constructor invariants (fields are public).
    pub fn validate(&self) -> Result<()> {
        Self::new(self.t0, self.t1, self.steps).map(|_| ())
    }

    fn check(&self, t: f64) -> Result<()> {
        let slack = 1e-9 * self.dt();
        if t < self.t0 - slack || t > self.t1 + slack || t.is_nan() {
            return Err(Error::OutsideGrid {
                t,
                t0: self.t0,
                t1: self.t1,
            });
        }
        Ok(())
    }
}

/// Vector-space operations needed by the integrator.
pub trait OdeState: Clone {
    /// `self + h * other`
    fn add_scaled(&self, h: f64, other: &Self) -> Self;
    fn all_finite(&self) -> bool;
}

impl OdeState for f64 {
    fn add_scaled(&self, h: f64, other: &Self) -> Self {
        self + h * other
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl OdeState for DVector<f64> {
    fn add_scaled(&self, h: f64, other: &Self) -> Self {
        self + other * h
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&self, h: f64, other: &Self) -> Self {
        self + other * h
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub grid: TimeGrid,
    pub values: Vec<S>,
}

impl<S: Clone> Trajectory<S> {
    pub fn constant(grid: TimeGrid, value: S) -> Self {
        Trajectory {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> S) -> Self {
        Trajectory {
            grid,
            values: grid.times().into_iter().map(&mut f).collect(),
        }
    }

    pub fn last(&self) -> &S {
        &self.values[self.values.len() - 1]
    }

    pub fn map<U>(&self, f: impl FnMut(&S) -> U) -> Trajectory<U> {
        Trajectory {
            grid: self.grid,
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl<S: OdeState> Trajectory<S> {
    /// Linear interpolation between grid nodes.
    pub fn at(&self, t: f64) -> Result<S> {
        self.grid.check(t)?;
        let x = ((t - self.grid.t0) / self.grid.dt()).clamp(0.0, self.grid.steps as f64);
        let i = (x.floor() as usize).min(self.grid.steps.saturating_sub(1));
        let w = x - i as f64;
        if w == 0.0 {
            return Ok(self.values[i].clone());
        }
        if w == 1.0 {
            return Ok(self.values[i + 1].clone());
        }
        Ok(self.values[i].add_scaled(1.0, &self.values[i + 1].add_scaled(-1.0, &self.values[i]).scale_by(w)))
    }

    /// Four-point Lagrange interpolation; accurate to `O(dt^4)` for smooth
    /// paths, which keeps RK4 stages fourth order when the forcing is itself
    /// a grid trajectory.
    pub fn at_cubic(&self, t: f64) -> Result<S> {
        self.grid.check(t)?;
        let steps = self.grid.steps;
        if steps < 3 {
            return self.at(t);
        }
        let x = ((t - self.grid.t0) / self.grid.dt()).clamp(0.0, steps as f64);
        let i = (x.floor() as usize).min(steps - 1);
        if x == i as f64 {
            return Ok(self.values[i].clone());
        }
        let base = i.saturating_sub(1).min(steps - 3);
        let u = x - base as f64;
        let nodes = [0.0, 1.0, 2.0, 3.0];
        let mut acc: Option<S> = None;
        for (j, &xj) in nodes.iter().enumerate() {
            let mut w = 1.0;
            for (l, &xl) in nodes.iter().enumerate() {
                if l != j {
                    w *= (u - xl) / (xj - xl);
                }
            }
            let v = &self.values[base + j];
            acc = Some(match acc {
                None => v.scale_by(w),
                Some(a) => a.add_scaled(w, v),
            });
        }
        Ok(acc.expect("four nodes"))
    }
}

trait Scale {
    fn scale_by(&self, w: f64) -> Self;
}

impl<S: OdeState> Scale for S {
    fn scale_by(&self, w: f64) -> Self {
        self.add_scaled(w - 1.0, self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Classical RK4 with fixed step. `y0` is the value at `t0` (forward) or at
/// `t1` (backward); the returned values are always stored in grid order.
pub fn integrate_ode<S, F>(mut rhs: F, y0: S, grid: TimeGrid, direction: Direction) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    if !y0.all_finite() {
        let t = match direction {
            Direction::Forward => grid.t0,
            Direction::Backward => grid.t1,
        };
        return Err(Error::OdeBlowUp { t });
    }
    let n = grid.steps;
    let (h, start) = match direction {
        Direction::Forward => (grid.dt(), 0usize),
        Direction::Backward => (-grid.dt(), n),
    };
    let mut values = Vec::with_capacity(n + 1);
    values.push(y0);
    for step in 0..n {
        let idx = match direction {
            Direction::Forward => start + step,
            Direction::Backward => start - step,
        };
        let t = grid.time(idx);
        let y = values.last().expect("nonempty");
        let k1 = rhs(t, y);
        let k2 = rhs(t + 0.5 * h, &y.add_scaled(0.5 * h, &k1));
        let k3 = rhs(t + 0.5 * h, &y.add_scaled(0.5 * h, &k2));
        let k4 = rhs(t + h, &y.add_scaled(h, &k3));
        let next = y
            .add_scaled(h / 6.0, &k1)
            .add_scaled(h / 3.0, &k2)
            .add_scaled(h / 3.0, &k3)
            .add_scaled(h / 6.0, &k4);
        if !next.all_finite() {
            return Err(Error::OdeBlowUp { t: t + h });
        }
        values.push(next);
    }
    if direction == Direction::Backward {
        values.reverse();
    }
    Ok(Trajectory { grid, values })
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Symmetry within `1e-10 (1 + ||M||)`.
pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= 1e-10 * (1.0 + m.norm())
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// PSD with the eigenvalue floor `-1e-10 (1 + ||M||)`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    m.is_square() && min_sym_eigenvalue(m) >= -1e-10 * (1.0 + m.norm())
}

pub fn is_pd(m: &DMatrix<f64>) -> bool {
    m.is_square() && m.nrows() > 0 && min_sym_eigenvalue(m) > 1e-12 * (1.0 + m.norm())
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Dimension("spectral abscissa of a non-square matrix".into()));
    }
    if m.nrows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Eigen);
    }
    let schur = m.clone().try_schur(1e-14, 10_000).ok_or(Error::Eigen)?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Factor `L` with `L L^T = cov` by diagonally pivoted Cholesky. Pivots at or
/// below `1e-12 * trace` are treated as zero, so singular PSD covariances
/// (including `0`) factor without error.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = cov.nrows();
    if !cov.is_square() {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    if !is_symmetric(cov) {
        return Err(Error::NotPsd);
    }
    let tol = 1e-12 * cov.trace().abs().max(f64::MIN_POSITIVE);
    let mut work = (cov + cov.transpose()) * 0.5;
    let mut perm: Vec<usize> = (0..d).collect();
    let mut l = DMatrix::<f64>::zeros(d, d);
    let mut rank = 0;
    while rank < d {
        let (piv, &best) = (rank..d)
            .map(|i| (i, &work[(i, i)]))
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty range");
        if best <= tol {
            break;
        }
        work.swap_rows(rank, piv);
        work.swap_columns(rank, piv);
        l.swap_rows(rank, piv);
        perm.swap(rank, piv);
        let p = best.sqrt();
        l[(rank, rank)] = p;
        for i in rank + 1..d {
            l[(i, rank)] = work[(i, rank)] / p;
        }
        for i in rank + 1..d {
            for j in rank + 1..d {
                work[(i, j)] -= l[(i, rank)] * l[(j, rank)];
            }
        }
        rank += 1;
    }
    // Whatever is left must be negligible, otherwise the matrix was indefinite.
    let floor = 1e-10 * (1.0 + cov.norm());
    for i in rank..d {
        for j in rank..d {
            if work[(i, j)].abs() > floor.max(tol) {
                return Err(Error::NotPsd);
            }
        }
    }
    let mut out = DMatrix::zeros(d, d);
    for (row, &orig) in perm.iter().enumerate() {
        out.row_mut(orig).copy_from(&l.row(row));
    }
    Ok(out)
}

pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `mean + L z`, with `L` from [`psd_factor`].
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if cov.nrows() != mean.len() {
        return Err(Error::Dimension("mean and covariance disagree".into()));
    }
    let l = psd_factor(cov)?;
    let z = standard_normals(rng, mean.len());
    Ok(mean + l * z)
}

/// OLS slope of `ln ys` on `ln xs`.
pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("fit_rate inputs differ in length".into()));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("fit_rate needs at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("fit_rate needs positive inputs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("fit_rate needs distinct xs".into()));
    }
    Ok(sxy / sxx)
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One stream per agent, seeded `seed ^ agent`.
pub fn agent_rng(seed: u64, agent: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ agent as u64)
}

/// Sample mean and standard error (`std / sqrt(n)`, unbiased variance).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
