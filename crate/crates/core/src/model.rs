//! Game description: sub-population parameter blocks, mixture weights and the
//! checkable standing assumptions.
//!
//! Every type `k` shares the state dimension `n` and control dimension `m`;
//! the mean-field couplings `F_k`, `H_k`, `psi_k` are stored as single base
//! blocks and expanded against the mixture weights into `[pi_1 M, ..., pi_K M]`
//! so that they act on the type-stacked mean `(xbar^1, ..., xbar^K)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{is_psd, is_symmetric, min_sym_eigenvalue};
use crate::serde_mat;

/// Deterministic drift offset `b_k(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DriftTable {
    Constant(#[serde(with = "serde_mat::vector")] DVector<f64>),
    Table {
        times: Vec<f64>,
        #[serde(with = "serde_mat::vector_vec")]
        values: Vec<DVector<f64>>,
        #[serde(default)]
        interp: Interp,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    /// Piecewise constant, right-continuous.
    #[default]
    Constant,
    /// Piecewise affine between knots, flat outside.
    Linear,
}

impl DriftTable {
    pub fn zeros(n: usize) -> Self {
        DriftTable::Constant(DVector::zeros(n))
    }

    pub fn dim(&self) -> usize {
        match self {
            DriftTable::Constant(v) => v.len(),
            DriftTable::Table { values, .. } => values.first().map_or(0, |v| v.len()),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            DriftTable::Constant(_) => true,
            DriftTable::Table { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            DriftTable::Constant(v) => v.clone(),
            DriftTable::Table {
                times,
                values,
                interp,
            } => {
                let idx = times.partition_point(|&s| s <= t);
                if idx == 0 {
                    return values[0].clone();
                }
                if idx >= times.len() {
                    return values[times.len() - 1].clone();
                }
                match interp {
                    Interp::Constant => values[idx - 1].clone(),
                    Interp::Linear => {
                        let (t0, t1) = (times[idx - 1], times[idx]);
                        let w = (t - t0) / (t1 - t0);
                        &values[idx - 1] * (1.0 - w) + &values[idx] * w
                    }
                }
            }
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if let DriftTable::Table { times, values, .. } = self {
            if times.is_empty() || times.len() != values.len() {
                return Err("drift table needs matching, non-empty times and values".into());
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err("drift table times must be strictly increasing".into());
            }
            let n = values[0].len();
            if values.iter().any(|v| v.len() != n) {
                return Err("drift table values have inconsistent length".into());
            }
        }
        Ok(())
    }
}

/// Parameter block of one sub-population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubpopParams {
    #[serde(rename = "A", with = "serde_mat::matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "serde_mat::matrix")]
    pub b: DMatrix<f64>,
    #[serde(rename = "F", with = "serde_mat::matrix")]
    pub f: DMatrix<f64>,
    #[serde(rename = "H", with = "serde_mat::matrix")]
    pub h: DMatrix<f64>,
    #[serde(rename = "D", with = "serde_mat::matrix")]
    pub d: DMatrix<f64>,
    #[serde(rename = "b")]
    pub drift: DriftTable,
    #[serde(rename = "Q", with = "serde_mat::matrix")]
    pub q: DMatrix<f64>,
    #[serde(rename = "R", with = "serde_mat::matrix")]
    pub r: DMatrix<f64>,
    #[serde(rename = "S", with = "serde_mat::matrix")]
    pub s: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub eta: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub nvec: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub psi: DMatrix<f64>,
    pub lambda_explore: f64,
    #[serde(default)]
    pub phi_lagrange: f64,
}

impl SubpopParams {
    /// Scalar block (`n = m = r = 1`) with every coupling and offset zero.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, s: f64) -> Self {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        SubpopParams {
            a: m(a),
            b: m(b),
            f: m(0.0),
            h: m(0.0),
            d: m(0.0),
            drift: DriftTable::zeros(1),
            q: m(q),
            r: m(r),
            s: m(s),
            eta: DVector::zeros(1),
            nvec: DVector::zeros(1),
            psi: m(0.0),
            lambda_explore: 0.0,
            phi_lagrange: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn r_inv(&self) -> Result<DMatrix<f64>> {
        self.r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidSpec("R is singular".into()))
    }

    fn check_dims(&self, n: usize, m: usize) -> Vec<String> {
        let mut bad = Vec::new();
        let mut want = |name: &str, mat: &DMatrix<f64>, rows: usize, cols: usize| {
            if mat.shape() != (rows, cols) {
                bad.push(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    mat.nrows(),
                    mat.ncols()
                ));
            }
        };
        want("A", &self.a, n, n);
        want("B", &self.b, n, m);
        want("F", &self.f, n, n);
        want("H", &self.h, n, m);
        want("Q", &self.q, n, n);
        want("R", &self.r, m, m);
        want("S", &self.s, n, m);
        want("psi", &self.psi, n, n);
        if self.d.nrows() != n {
            bad.push(format!("D has {} rows, expected {n}", self.d.nrows()));
        }
        if self.drift.dim() != n {
            bad.push(format!("b has length {}, expected {n}", self.drift.dim()));
        }
        if self.eta.len() != n {
            bad.push(format!("eta has length {}, expected {n}", self.eta.len()));
        }
        if self.nvec.len() != m {
            bad.push(format!("nvec has length {}, expected {m}", self.nvec.len()));
        }
        if let Err(e) = self.drift.check() {
            bad.push(e);
        }
        bad
    }
}

/// Full game description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub rho: f64,
    pub pi: Vec<f64>,
    #[serde(with = "serde_mat::vector")]
    pub x0_mean: DVector<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub x0_cov: DMatrix<f64>,
    pub subpops: Vec<SubpopParams>,
}

impl PopulationSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Single-type spec with deterministic initial state `x0`.
    pub fn single(params: SubpopParams, rho: f64, x0: DVector<f64>) -> Self {
        let n = x0.len();
        PopulationSpec {
            rho,
            pi: vec![1.0],
            x0_mean: x0,
            x0_cov: DMatrix::zeros(n, n),
            subpops: vec![params],
        }
    }

    pub fn types(&self) -> usize {
        self.subpops.len()
    }

    pub fn n(&self) -> usize {
        self.x0_mean.len()
    }

    pub fn m(&self) -> usize {
        self.subpops.first().map_or(0, SubpopParams::m)
    }

    /// `[pi_1 M, ..., pi_K M]` for a base block `M`.
    pub fn expand(&self, base: &DMatrix<f64>) -> DMatrix<f64> {
        expand_block(base, &self.pi)
    }

    /// `F_k`, `H_k` and `psi_k` all vanish for every type.
    pub fn is_uncoupled(&self) -> bool {
        self.subpops.iter().all(|p| {
            p.f.iter().all(|&x| x == 0.0)
                && p.h.iter().all(|&x| x == 0.0)
                && p.psi.iter().all(|&x| x == 0.0)
        })
    }
}

/// Mixture expansion of a base coupling block.
pub fn expand_block(base: &DMatrix<f64>, pi: &[f64]) -> DMatrix<f64> {
    let (rows, cols) = base.shape();
    let mut out = DMatrix::zeros(rows, cols * pi.len());
    for (j, &w) in pi.iter().enumerate() {
        out.view_mut((0, j * cols), (rows, cols)).copy_from(&(base * w));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub assumption: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        ValidationReport {
            ok: violations.is_empty(),
            violations,
        }
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

/// Checks every statically checkable standing assumption. Existence and
/// stability of the consistency solution are left to the solvers.
pub fn validate_spec(spec: &PopulationSpec) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |id: &str, msg: String| {
        out.push(Violation {
            assumption: id.to_string(),
            message: msg,
        })
    };

    let k = spec.types();
    if k == 0 {
        push("model", "no sub-populations".into());
        return ValidationReport::from_violations(out);
    }
    if spec.pi.len() != k {
        push(
            "A2",
            format!("{} mixture weights for {k} sub-populations", spec.pi.len()),
        );
    }
    if spec.pi.iter().any(|&w| !(w >= 0.0)) {
        push("A2", "mixture weights must be nonnegative".into());
    }
    let total: f64 = spec.pi.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        push("A2", format!("mixture weights sum {total} ≠ 1"));
    }
    if !(spec.rho > 0.0) {
        push("rho", format!("discount rho = {} must be > 0", spec.rho));
    }

    let n = spec.n();
    let m = spec.m();
    if spec.x0_cov.shape() != (n, n) {
        push("A1", "x0_cov shape does not match x0_mean".into());
    } else if !is_symmetric(&spec.x0_cov) || !is_psd(&spec.x0_cov) {
        push("A1", "x0_cov not symmetric positive semidefinite".into());
    }

    for (idx, p) in spec.subpops.iter().enumerate() {
        let dims = p.check_dims(n, m);
        let dims_ok = dims.is_empty();
        for d in dims {
            push("dims", format!("type {idx}: {d}"));
        }
        if !(p.lambda_explore >= 0.0) {
            push("explore", format!("type {idx}: lambda_explore must be ≥ 0"));
        }
        if !dims_ok {
            continue;
        }
        if !is_symmetric(&p.q) {
            push("A3", format!("type {idx}: Q not symmetric"));
        }
        let r_pd = is_symmetric(&p.r) && min_sym_eigenvalue(&p.r) > 0.0;
        if !r_pd {
            push("A3", format!("type {idx}: R not positive definite"));
            continue;
        }
        if let Some(r_inv) = p.r.clone().try_inverse() {
            let schur = &p.q - &p.s * r_inv * p.s.transpose();
            let schur = (&schur + schur.transpose()) * 0.5;
            if !is_psd(&schur) {
                push(
                    "A3",
                    format!("type {idx}: Q - S R^-1 S^T not positive semidefinite"),
                );
            }
        }
    }
    ValidationReport::from_violations(out)
}

/// Empirical mixture `N_k / N`.
pub fn mixture_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyPopulation);
    }
    Ok(counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect())
}

/// Block row `[0 .. I_n .. 0]` of shape `n x nK` with the identity at block `k` (0-based).
pub fn selector_matrix(k: usize, n: usize, types: usize) -> Result<DMatrix<f64>> {
    if k >= types {
        return Err(Error::IndexOutOfRange {
            index: k,
            count: types,
        });
    }
    let mut e = DMatrix::zeros(n, n * types);
    e.view_mut((0, k * n), (n, n)).fill_with_identity();
    Ok(e)
}
