//! Stacked estimating equations and the cluster-robust sandwich.
//!
//! An estimator is described by per-cluster moment contributions `ψ_c(θ)`;
//! its estimate solves `Σ_c ψ_c(θ) = 0` and its covariance is
//! `A⁻¹ B A⁻ᵀ / m` with `A = −(1/m) Σ ∂ψ_c/∂θ` and `B = (1/m) Σ ψ_c ψ_cᵀ`.
//! Nuisance-model scores stacked alongside the target moment propagate their
//! estimation error into the target's variance.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::math::norm_quantile;

const ROOT_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 50;
const SYSTEM_TOL: f64 = 1e-6;

/// Moment contributions of independent clusters.
pub trait EstimatingEquations {
    fn dim(&self) -> usize;

    fn n_clusters(&self) -> usize;

    /// Writes the `n_clusters × dim` row-major matrix of cluster contributions at `theta`.
    fn contributions(&self, theta: &[f64], out: &mut [f64]);

    /// Analytic `(1/m) Σ_c ∂ψ_c/∂θ`, row-major, when available.
    /// The default defers to central finite differences.
    fn mean_jacobian(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Equations given by a closure over per-cluster data.
pub struct UnitEquations<'a, D, F> {
    pub units: &'a [D],
    pub dim: usize,
    pub psi: F,
}

impl<D, F> EstimatingEquations for UnitEquations<'_, D, F>
where
    F: Fn(&D, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_clusters(&self) -> usize {
        self.units.len()
    }

    fn contributions(&self, theta: &[f64], out: &mut [f64]) {
        for (u, row) in self.units.iter().zip(out.chunks_exact_mut(self.dim)) {
            row.fill(0.0);
            (self.psi)(u, theta, row);
        }
    }
}

fn contributions<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; eq.n_clusters() * eq.dim()];
    eq.contributions(theta, &mut out);
    out
}

/// `(1/m) Σ_c ψ_c(θ)`.
pub fn mean_psi<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> Vec<f64> {
    let d = eq.dim();
    let m = eq.n_clusters() as f64;
    let mut total = vec![0.0; d];
    for row in contributions(eq, theta).chunks_exact(d) {
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    total.iter_mut().for_each(|t| *t /= m);
    total
}

fn fd_step(theta_k: f64) -> f64 {
    f64::max(1e-6, 1e-6 * theta_k.abs())
}

/// `(1/m) Σ_c ∂ψ_c/∂θ`: analytic when the equations supply it, otherwise
/// by central differences.
pub fn mean_jacobian<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> DMatrix<f64> {
    match eq.mean_jacobian(theta) {
        Some(j) => DMatrix::from_row_slice(eq.dim(), eq.dim(), &j),
        None => fd_jacobian(eq, theta),
    }
}

/// `(1/m) Σ_c ∂ψ_c/∂θ` by central differences with step `max(1e-6, 1e-6 |θ_k|)`.
pub fn fd_jacobian<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> DMatrix<f64> {
    let d = eq.dim();
    let mut jac = DMatrix::zeros(d, d);
    let mut th = theta.to_vec();
    for k in 0..d {
        let h = fd_step(theta[k]);
        th[k] = theta[k] + h;
        let plus = mean_psi(eq, &th);
        th[k] = theta[k] - h;
        let minus = mean_psi(eq, &th);
        th[k] = theta[k];
        for j in 0..d {
            jac[(j, k)] = (plus[j] - minus[j]) / (2.0 * h);
        }
    }
    jac
}

/// Newton root of the mean estimating equation.
pub fn solve_stacked<E: EstimatingEquations + ?Sized>(eq: &E, init: &[f64]) -> Result<Vec<f64>> {
    if init.len() != eq.dim() {
        return Err(invalid("initial value has wrong dimension"));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(invalid("initial value not finite"));
    }
    let mut theta = init.to_vec();
    let mut f = mean_psi(eq, &theta);
    for _ in 0..MAX_NEWTON {
        let size = max_abs(&f);
        let converged = size <= ROOT_TOL;
        let jac = mean_jacobian(eq, &theta);
        let rhs = nalgebra::DVector::from_column_slice(&f);
        let step = jac.lu().solve(&rhs).ok_or(Error::Singular("estimating-equation Jacobian"))?;
        let mut scale = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - scale * s).collect();
            let fc = mean_psi(eq, &cand);
            if max_abs(&fc) < size || (!converged && scale < 1e-4) {
                theta = cand;
                f = fc;
                break;
            }
            if converged && scale < 1e-4 {
                break;
            }
            scale *= 0.5;
        }
        // One extra step past the tolerance polishes the root to rounding level.
        if converged {
            return Ok(theta);
        }
    }
    if max_abs(&f) <= ROOT_TOL {
        return Ok(theta);
    }
    Err(Error::NonConvergence { iterations: MAX_NEWTON })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Cluster-robust sandwich covariance `A⁻¹ B A⁻ᵀ / m` at `theta`.
pub fn sandwich_variance<E: EstimatingEquations + ?Sized>(eq: &E, theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = eq.dim();
    let m = eq.n_clusters();
    if m < d + 1 {
        return Err(invalid("sandwich needs more clusters than parameters"));
    }
    let mf = m as f64;
    let a = -mean_jacobian(eq, theta);
    let psi = contributions(eq, theta);
    let mut b = DMatrix::<f64>::zeros(d, d);
    for row in psi.chunks_exact(d) {
        for i in 0..d {
            for j in 0..=i {
                b[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            b[(j, i)] = b[(i, j)];
        }
    }
    b /= mf;
    let a_inv = a.try_inverse().ok_or(Error::Singular("bread matrix"))?;
    let v = &a_inv * b * a_inv.transpose() / mf;
    let sym = (&v + v.transpose()) * 0.5;
    if sym.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite sandwich covariance".into()));
    }
    Ok(sym)
}

/// A solved system: equations plus their root.
pub struct EstimatingSystem<E> {
    pub equations: E,
    pub theta_hat: Vec<f64>,
}

impl<E: EstimatingEquations> EstimatingSystem<E> {
    /// Wraps a supplied root, checking that the mean moment vanishes there.
    pub fn new(equations: E, theta_hat: Vec<f64>) -> Result<Self> {
        if theta_hat.len() != equations.dim() {
            return Err(invalid("parameter vector has wrong dimension"));
        }
        let f = mean_psi(&equations, &theta_hat);
        if !(max_abs(&f) <= SYSTEM_TOL) {
            return Err(Error::Numerical(alloc::format!(
                "mean estimating function {:e} at supplied root",
                max_abs(&f)
            )));
        }
        Ok(EstimatingSystem { equations, theta_hat })
    }

    pub fn solve(equations: E, init: &[f64]) -> Result<Self> {
        let theta_hat = solve_stacked(&equations, init)?;
        Ok(EstimatingSystem { equations, theta_hat })
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        sandwich_variance(&self.equations, &self.theta_hat)
    }
}

/// Two-sided Wald interval `point ± z · se`.
pub fn wald_ci(point: f64, se: f64, level: f64) -> (f64, f64) {
    let z = norm_quantile(0.5 * (1.0 + level));
    (point - z * se, point + z * se)
}

/// `sqrt(gᵀ V g)`.
pub fn delta_method(gradient: &[f64], vcov: &DMatrix<f64>) -> Result<f64> {
    let d = gradient.len();
    if vcov.nrows() != d || vcov.ncols() != d {
        return Err(invalid("gradient and covariance dimensions differ"));
    }
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += gradient[i] * vcov[(i, j)] * gradient[j];
        }
    }
    if q < -1e-12 {
        return Err(Error::Numerical(alloc::format!("negative variance {q:e} in delta method")));
    }
    Ok(libm::sqrt(q.max(0.0)))
}
