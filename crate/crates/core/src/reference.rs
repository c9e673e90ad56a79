//! Small reference games used by the acceptance suite, the examples in the
//! README and the command-line defaults.

use nalgebra::{DMatrix, DVector};

use crate::model::{DriftTable, PopulationSpec, SubpopParams};

/// Decoupled scalar game with `A = 0`, `B = Q = R = 1`, unit noise,
/// `lambda = 0.2` and `rho = 0.1`; its cost of exploration is `1`.
pub fn scalar_coe() -> PopulationSpec {
    let mut p = SubpopParams::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
    p.d = DMatrix::from_element(1, 1, 0.5);
    p.lambda_explore = 0.2;
    PopulationSpec::single(p, 0.1, DVector::from_element(1, 1.0))
}

/// Two uncoupled scalar subsystems controlled by a 2-d action, otherwise as
/// [`scalar_coe`].
pub fn planar_coe() -> PopulationSpec {
    let n = 2;
    let mut p = SubpopParams::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
    p.a = DMatrix::zeros(n, n);
    p.b = DMatrix::identity(n, n);
    p.f = DMatrix::zeros(n, n);
    p.h = DMatrix::zeros(n, n);
    p.d = DMatrix::identity(n, n) * 0.5;
    p.drift = DriftTable::zeros(n);
    p.q = DMatrix::identity(n, n);
    p.r = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
    p.s = DMatrix::zeros(n, n);
    p.eta = DVector::zeros(n);
    p.nvec = DVector::zeros(n);
    p.psi = DMatrix::zeros(n, n);
    p.lambda_explore = 0.2;
    PopulationSpec::single(p, 0.1, DVector::from_element(n, 1.0))
}

/// Decoupled scalar game with deterministic dynamics for the variational checks.
pub fn decoupled_scalar() -> PopulationSpec {
    let mut p = SubpopParams::scalar(0.0, 1.0, 1.0, 1.0, 0.0);
    p.lambda_explore = 0.4;
    PopulationSpec::single(p, 0.5, DVector::from_element(1, 1.0))
}

/// Single-type game coupled through the mean state and mean control, used
/// for the finite-population convergence experiments.
pub fn coupled_single_type() -> PopulationSpec {
    let mut p = SubpopParams::scalar(-0.5, 1.0, 1.0, 1.0, 0.0);
    p.f = DMatrix::from_element(1, 1, 0.8);
    p.h = DMatrix::from_element(1, 1, 0.3);
    p.psi = DMatrix::from_element(1, 1, 0.5);
    p.d = DMatrix::from_element(1, 1, 0.4);
    p.drift = DriftTable::Constant(DVector::from_element(1, 0.5));
    p.lambda_explore = 0.1;
    let mut spec = PopulationSpec::single(p, 1.0, DVector::from_element(1, 1.0));
    spec.x0_cov[(0, 0)] = 0.25;
    spec
}

/// [`coupled_single_type`] with little noise, so that the Nash gap of a
/// small deviation family is not drowned by sampling error.
pub fn coupled_quiet() -> PopulationSpec {
    let mut spec = coupled_single_type();
    spec.subpops[0].d[(0, 0)] = 0.05;
    spec.x0_cov[(0, 0)] = 0.0025;
    spec
}

/// Two scalar types with every coupling channel active and different costs.
pub fn two_type() -> PopulationSpec {
    let mut p1 = SubpopParams::scalar(0.1, 1.0, 1.0, 1.0, 0.0);
    p1.f[(0, 0)] = 0.2;
    p1.h[(0, 0)] = 0.1;
    p1.psi[(0, 0)] = 0.5;
    p1.d[(0, 0)] = 0.3;
    p1.drift = DriftTable::Constant(DVector::from_element(1, 0.3));
    p1.eta[0] = 0.2;
    p1.lambda_explore = 0.2;
    let mut p2 = SubpopParams::scalar(-0.2, 0.8, 2.0, 0.5, 0.3);
    p2.f[(0, 0)] = -0.1;
    p2.psi[(0, 0)] = 0.3;
    p2.d[(0, 0)] = 0.2;
    p2.nvec[0] = 0.1;
    p2.lambda_explore = 0.1;
    PopulationSpec {
        rho: 0.5,
        pi: vec![0.6, 0.4],
        x0_mean: DVector::from_element(1, 1.0),
        x0_cov: DMatrix::from_element(1, 1, 0.1),
        subpops: vec![p1, p2],
    }
}
