//! Steady-state Kalman filtering at each sensor.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{symmetrize, LtiSystem};

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 10_000;
/// Trace beyond which the Riccati iteration is declared divergent.
pub const DIVERGENCE_TRACE: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("Riccati iteration diverged after {iterations} iterations (trace {trace:.3e})")]
    Diverged { iterations: usize, trace: f64 },
    #[error(
        "Riccati iteration did not converge in {iterations} iterations (last change {change:.3e})"
    )]
    NotConverged { iterations: usize, change: f64 },
    #[error("innovation covariance C M Cᵀ + R is singular")]
    SingularInnovation,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Steady-state filter quantities of one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyStateFilter {
    /// Posterior error covariance `P̄`.
    pub p_bar: DMatrix<f64>,
    /// Prior covariance `M̄ = A P̄ Aᵀ + Q`.
    pub m_bar: DMatrix<f64>,
    /// Gain `K̄ = M̄ Cᵀ (C M̄ Cᵀ + R)⁻¹`.
    pub k_bar: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub iterations: usize,
}

impl SteadyStateFilter {
    /// Frobenius norm of `riccati(P̄) - P̄`.
    pub fn residual(&self, sys: &LtiSystem) -> f64 {
        match riccati_step(sys, &self.p_bar) {
            Ok(next) => (next - &self.p_bar).norm(),
            Err(_) => f64::INFINITY,
        }
    }
}

/// One posterior-to-posterior Riccati step.
fn riccati_step(sys: &LtiSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let m = sys.a() * p * sys.a().transpose() + sys.q();
    let s = sys.c() * &m * sys.c().transpose() + sys.r();
    let s_inv = s.try_inverse().ok_or(FilterError::SingularInnovation)?;
    let cm = sys.c() * &m;
    Ok(symmetrize(&(&m - cm.transpose() * s_inv * cm)))
}

/// Fixed-point iteration of the Riccati map, started from `Pi0` (or `Q` when
/// `Pi0` is zero).
pub fn solve_dare(sys: &LtiSystem) -> Result<SteadyStateFilter, FilterError> {
    let mut p = if sys.pi0().norm() > 0.0 {
        sys.pi0().clone()
    } else {
        sys.q().clone()
    };
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < DARE_MAX_ITER {
        let next = riccati_step(sys, &p)?;
        iterations += 1;
        let tr = next.trace();
        if !tr.is_finite() || tr > DIVERGENCE_TRACE {
            return Err(FilterError::Diverged {
                iterations,
                trace: tr,
            });
        }
        change = (&next - &p).norm();
        p = next;
        if change < DARE_TOL {
            break;
        }
    }
    if change >= DARE_TOL {
        return Err(FilterError::NotConverged { iterations, change });
    }
    let m_bar = symmetrize(&(sys.a() * &p * sys.a().transpose() + sys.q()));
    let s = sys.c() * &m_bar * sys.c().transpose() + sys.r();
    let s_inv = s.try_inverse().ok_or(FilterError::SingularInnovation)?;
    let k_bar = &m_bar * sys.c().transpose() * s_inv;
    Ok(SteadyStateFilter {
        p_bar: p,
        m_bar,
        k_bar,
        a: sys.a().clone(),
        c: sys.c().clone(),
        iterations,
    })
}

/// Local MMSE estimate held by a sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub x_hat: DVector<f64>,
    pub k: u64,
}

impl LocalEstimate {
    pub fn zero(dim: usize) -> Self {
        Self {
            x_hat: DVector::zeros(dim),
            k: 0,
        }
    }
}

/// `x̂ ← A x̂ + K̄ (y − C A x̂)` with the steady-state gain.
pub fn local_filter_step(
    filter: &SteadyStateFilter,
    prev: &LocalEstimate,
    y: &DVector<f64>,
) -> Result<LocalEstimate, FilterError> {
    let nx = filter.a.nrows();
    if prev.x_hat.len() != nx {
        return Err(FilterError::Dimension {
            expected: nx,
            got: prev.x_hat.len(),
        });
    }
    if y.len() != filter.c.nrows() {
        return Err(FilterError::Dimension {
            expected: filter.c.nrows(),
            got: y.len(),
        });
    }
    let pred = &filter.a * &prev.x_hat;
    let innov = y - &filter.c * &pred;
    Ok(LocalEstimate {
        x_hat: pred + &filter.k_bar * innov,
        k: prev.k + 1,
    })
}
