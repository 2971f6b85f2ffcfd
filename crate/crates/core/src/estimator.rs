//! Remote MMSE estimator and the covariance maps it is built on.
//!
//! For one process with steady local covariance `P̄`:
//!
//! ```text
//! h(X)    = A X Aᵀ + Q
//! t(X, α) = P̄ / (1 + α) + α / (1 + α) · h(X)
//! g(X, α) = α / (1 + α) · (A X Aᵀ + h(P̄) − P̄)
//! Σ(k)    = h(P(k−1)) − P̄
//! ```

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::filtering::SteadyStateFilter;
use crate::model::{symmetric_eigenvalues, symmetrize, LtiSystem};
use crate::trigger::alpha_hat;

/// Relative tolerance on negative eigenvalues before a covariance is
/// declared indefinite.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("γ = 1 with μ = 0 cannot happen: a sensor only transmits on a free channel")]
    TransmitWithoutChannel,
    #[error("payload must be present exactly when γ = 1")]
    PayloadMismatch,
    #[error("predicted innovation covariance is indefinite (min eigenvalue {min_eig:.3e})")]
    Indefinite { min_eig: f64 },
}

/// `h`, `g`, `t` and `P̄` bound to one system.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMaps {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    p_bar: DMatrix<f64>,
    h_p_bar: DMatrix<f64>,
}

impl CovMaps {
    pub fn new(sys: &LtiSystem, filter: &SteadyStateFilter) -> Self {
        Self::from_parts(sys.a().clone(), sys.q().clone(), filter.p_bar.clone())
    }

    pub fn from_parts(a: DMatrix<f64>, q: DMatrix<f64>, p_bar: DMatrix<f64>) -> Self {
        let h_p_bar = symmetrize(&(&a * &p_bar * a.transpose() + &q));
        Self {
            a,
            q,
            p_bar,
            h_p_bar,
        }
    }

    pub fn p_bar(&self) -> &DMatrix<f64> {
        &self.p_bar
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn h(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.a * x * self.a.transpose() + &self.q))
    }

    /// `h^j(P̄)`.
    pub fn h_iter_p_bar(&self, j: usize) -> DMatrix<f64> {
        (0..j).fold(self.p_bar.clone(), |x, _| self.h(&x))
    }

    pub fn t(&self, x: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        self.t_hat(x, alpha_hat(alpha))
    }

    /// `t` parametrized by `α̂ = α / (1 + α)`.
    pub fn t_hat(&self, x: &DMatrix<f64>, alpha_hat: f64) -> DMatrix<f64> {
        if alpha_hat >= 1.0 {
            return self.h(x);
        }
        if alpha_hat <= 0.0 {
            return self.p_bar.clone();
        }
        &self.p_bar * (1.0 - alpha_hat) + self.h(x) * alpha_hat
    }

    pub fn g(&self, x: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        let w = alpha_hat(alpha);
        let ax = &self.a * x * self.a.transpose();
        symmetrize(&((ax + &self.h_p_bar - &self.p_bar) * w))
    }

    /// `Σ = h(P_prev) − P̄`, the covariance of `x̂_local(k) − A x̂(k−1)`.
    pub fn sigma_pred(&self, p_prev: &DMatrix<f64>) -> Result<DMatrix<f64>, EstimatorError> {
        let s = symmetrize(&(self.h(p_prev) - &self.p_bar));
        let ev = symmetric_eigenvalues(&s);
        let scale = ev
            .iter()
            .map(|v| v.abs())
            .fold(self.p_bar.norm().max(1.0), f64::max);
        if let Some(&lo) = ev.first() {
            if lo < -PSD_TOL * scale {
                return Err(EstimatorError::Indefinite { min_eig: lo });
            }
        }
        Ok(s)
    }

    /// `Tr[h(X) − P̄]`, the greedy ordering key.
    pub fn innovation_trace(&self, x: &DMatrix<f64>) -> f64 {
        self.h(x).trace() - self.p_bar.trace()
    }
}

/// Estimate of one process held by the fusion center.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEstimate {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// Slots since the last reception.
    pub tau: u64,
    pub k: u64,
}

impl RemoteEstimate {
    /// Estimate right after a reception of `x_local`.
    pub fn fresh(maps: &CovMaps, x_local: DVector<f64>, k: u64) -> Self {
        Self {
            x_hat: x_local,
            p: maps.p_bar.clone(),
            tau: 0,
            k,
        }
    }
}

/// One step of the MMSE estimator.
///
/// - `γ = 1`: take the local estimate, covariance `P̄`.
/// - `μ = 0`: channel taken by an earlier sensor, pure prediction with `h`.
/// - `μ = 1, γ = 0`: the sensor chose to hold, which is informative; the
///   covariance shrinks to `t(P, α)`.
pub fn remote_update(
    maps: &CovMaps,
    prev: &RemoteEstimate,
    gamma: bool,
    mu: bool,
    alpha: f64,
    payload: Option<&DVector<f64>>,
) -> Result<RemoteEstimate, EstimatorError> {
    if gamma && !mu {
        return Err(EstimatorError::TransmitWithoutChannel);
    }
    if gamma != payload.is_some() {
        return Err(EstimatorError::PayloadMismatch);
    }
    let k = prev.k + 1;
    if let Some(x_local) = payload {
        return Ok(RemoteEstimate {
            x_hat: x_local.clone(),
            p: maps.p_bar.clone(),
            tau: 0,
            k,
        });
    }
    let x_hat = &maps.a * &prev.x_hat;
    let p = if mu {
        maps.t(&prev.p, alpha)
    } else {
        maps.h(&prev.p)
    };
    Ok(RemoteEstimate {
        x_hat,
        p,
        tau: prev.tau + 1,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::solve_dare;
    use crate::model::{psd_leq, two_process_example};
    use approx::assert_abs_diff_eq;

    fn scalar_maps() -> CovMaps {
        let s = |v| DMatrix::from_element(1, 1, v);
        let sys = LtiSystem::without_prior(s(2.0), s(1.0), s(1.0), s(1.0)).unwrap();
        CovMaps::new(&sys, &solve_dare(&sys).unwrap())
    }

    fn p_oracle() -> f64 {
        (1.0 + 5f64.sqrt()) / 4.0
    }

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn h_examples() {
        let m = scalar_maps();
        assert_abs_diff_eq!(m.h(&s(1.0))[(0, 0)], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            m.h(m.p_bar())[(0, 0)],
            4.0 * p_oracle() + 1.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(m.h(m.p_bar())[(0, 0)], 4.236_07, epsilon = 1e-5);
        let zero_a = CovMaps::from_parts(s(0.0), s(1.3), s(0.4));
        assert_eq!(zero_a.h(&s(17.0))[(0, 0)], 1.3);
    }

    #[test]
    fn t_examples() {
        let m = scalar_maps();
        let pb = m.p_bar().clone();
        assert_eq!(m.t(&s(3.0), 0.0), pb);
        assert_eq!(m.t(&s(3.0), f64::INFINITY), m.h(&s(3.0)));
        let expect = (p_oracle() + 4.0 * p_oracle() + 1.0) / 2.0;
        assert_abs_diff_eq!(m.t(&pb, 1.0)[(0, 0)], expect, epsilon = 1e-9);
        assert_abs_diff_eq!(m.t(&pb, 1.0)[(0, 0)], 2.522_54, epsilon = 1e-5);
    }

    #[test]
    fn g_examples() {
        let m = scalar_maps();
        assert_eq!(m.g(&s(2.0), 0.0)[(0, 0)], 0.0);
        let hp = m.h(m.p_bar());
        assert_abs_diff_eq!(
            m.g(&s(0.0), f64::INFINITY)[(0, 0)],
            (&hp - m.p_bar())[(0, 0)],
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            m.g(&s(0.0), 1.0)[(0, 0)],
            (3.0 * p_oracle() + 1.0) / 2.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(m.g(&s(0.0), 1.0)[(0, 0)], 1.713_53, epsilon = 1e-5);
    }

    #[test]
    fn sigma_examples() {
        let m = scalar_maps();
        let sig = m.sigma_pred(m.p_bar()).unwrap();
        assert_abs_diff_eq!(sig[(0, 0)], 3.0 * p_oracle() + 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sig[(0, 0)], 3.427_05, epsilon = 1e-5);

        let ex = two_process_example();
        let sys = &ex.systems()[0];
        let maps = CovMaps::new(sys, &solve_dare(sys).unwrap());
        let sig = maps.sigma_pred(maps.p_bar()).unwrap();
        assert!(psd_leq(&DMatrix::zeros(2, 2), &sig, 1e-10));
        // h(P̄) − P̄ = K̄ C M̄ has the rank of C
        assert_eq!(crate::trigger::numerical_rank(&sig), 1);
        let sig2 = maps.sigma_pred(&maps.h(maps.p_bar())).unwrap();
        assert_eq!(crate::trigger::numerical_rank(&sig2), 2);
    }

    #[test]
    fn sigma_rejects_unreachable_state() {
        let m = scalar_maps();
        // A covariance far below P̄ is not reachable and gives an indefinite Σ.
        assert!(matches!(
            m.sigma_pred(&s(-1.0)),
            Err(EstimatorError::Indefinite { .. })
        ));
    }

    #[test]
    fn update_branches() {
        let m = scalar_maps();
        let prev = RemoteEstimate {
            x_hat: DVector::from_element(1, 1.5),
            p: m.p_bar().clone(),
            tau: 2,
            k: 10,
        };
        let v = DVector::from_element(1, -0.25);
        let got = remote_update(&m, &prev, true, true, 1.0, Some(&v)).unwrap();
        assert_eq!(got.x_hat, v);
        assert_eq!(&got.p, m.p_bar());
        assert_eq!(got.tau, 0);
        assert_eq!(got.k, 11);

        let got = remote_update(&m, &prev, false, false, 1.0, None).unwrap();
        assert_abs_diff_eq!(got.p[(0, 0)], 4.236_068, epsilon = 1e-6);
        assert_eq!(got.x_hat[0], 3.0);
        assert_eq!(got.tau, 3);

        let got = remote_update(&m, &prev, false, true, 0.0, None).unwrap();
        assert_eq!(&got.p, m.p_bar());
        assert_eq!(got.x_hat[0], 3.0);
    }

    #[test]
    fn update_contract_violations() {
        let m = scalar_maps();
        let prev = RemoteEstimate::fresh(&m, DVector::zeros(1), 0);
        let v = DVector::zeros(1);
        assert_eq!(
            remote_update(&m, &prev, true, false, 1.0, Some(&v)),
            Err(EstimatorError::TransmitWithoutChannel)
        );
        assert_eq!(
            remote_update(&m, &prev, true, true, 1.0, None),
            Err(EstimatorError::PayloadMismatch)
        );
        assert_eq!(
            remote_update(&m, &prev, false, true, 1.0, Some(&v)),
            Err(EstimatorError::PayloadMismatch)
        );
    }
}
