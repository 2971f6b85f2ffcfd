//! Stochastic event trigger.
//!
//! A sensor whose channel is free flags its data as important (`η = 1`) when
//! a uniform draw exceeds `φ(ε, αΣ) = exp(−½ εᵀ(αΣ)⁺ε)`. The trigger keeps the
//! remote error Gaussian, which is what makes the closed-form probabilities
//! below exact.
//!
//! Trigger intensities `α` live in `[0, ∞]` and are plain `f64`s with
//! `f64::INFINITY` meaning "never important". Most of the crate works with the
//! normalized form `α̂ = α / (1 + α) ∈ [0, 1]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::symmetrize;

/// Relative cut-off for singular values when forming the pseudo-inverse.
pub const PINV_TOL: f64 = 1e-10;
/// Relative cut-off used by [`numerical_rank`].
pub const RANK_TOL: f64 = 1e-9;

/// `α / (1 + α)`, with `∞ ↦ 1`.
pub fn alpha_hat(alpha: f64) -> f64 {
    debug_assert!(alpha >= 0.0, "alpha must be nonnegative");
    if alpha.is_infinite() {
        1.0
    } else {
        alpha / (1.0 + alpha)
    }
}

/// Inverse of [`alpha_hat`], with `1 ↦ ∞`.
pub fn alpha_from_hat(alpha_hat: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha_hat));
    if alpha_hat >= 1.0 {
        f64::INFINITY
    } else {
        alpha_hat / (1.0 - alpha_hat)
    }
}

/// Probability that a sensor with free channel holds its data:
/// `β = α̂^{r/2}`.
pub fn beta_from_hat(alpha_hat: f64, rank: usize) -> f64 {
    if rank == 0 {
        1.0
    } else {
        alpha_hat.powf(rank as f64 / 2.0)
    }
}

/// Trigger parameters of one sensor in one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerParams {
    pub alpha: f64,
    pub alpha_hat: f64,
    pub beta: f64,
    pub rank: usize,
}

impl TriggerParams {
    pub fn new(alpha: f64, rank: usize) -> Self {
        let ah = alpha_hat(alpha);
        Self {
            alpha,
            alpha_hat: ah,
            beta: beta_from_hat(ah, rank),
            rank,
        }
    }

    pub fn from_alpha_hat(alpha_hat: f64, rank: usize) -> Self {
        Self {
            alpha: alpha_from_hat(alpha_hat),
            alpha_hat,
            beta: beta_from_hat(alpha_hat, rank),
            rank,
        }
    }
}

/// `P(η = 1) = 1 − β`.
pub fn eta_probability(params: &TriggerParams) -> f64 {
    1.0 - params.beta
}

/// Result of one trigger draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerDecision {
    pub eta: bool,
    pub xi: f64,
    pub phi_value: f64,
}

/// `exp(−½ zᵀ Π⁺ z)`.
///
/// When `Π` is singular and `z` has a component outside its range the event
/// has probability zero under the Gaussian model; `0` is returned.
pub fn phi(z: &DVector<f64>, pi: &DMatrix<f64>) -> f64 {
    assert_eq!(z.len(), pi.nrows(), "phi: dimension mismatch");
    let eig = symmetrize(pi).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let znorm = z.norm();
    if lmax <= 0.0 {
        return if znorm == 0.0 { 1.0 } else { 0.0 };
    }
    let cut = PINV_TOL * lmax;
    let mut quad = 0.0;
    let mut off_range_sq = 0.0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let proj = eig.eigenvectors.column(k).dot(z);
        if lam > cut {
            quad += proj * proj / lam;
        } else {
            off_range_sq += proj * proj;
        }
    }
    // measured against the scale of Π: residual eigenvalues at rounding
    // level leave a tiny orthogonal component in genuine in-range samples
    if off_range_sq > RANK_TOL * lmax {
        return 0.0;
    }
    (-0.5 * quad).exp()
}

/// `φ(ε, αΣ)` with the exact conventions for `α ∈ {0, ∞}`.
pub fn phi_scaled(epsilon: &DVector<f64>, alpha: f64, sigma: &DMatrix<f64>) -> f64 {
    if alpha.is_infinite() {
        1.0
    } else if alpha == 0.0 {
        if epsilon.iter().all(|v| *v == 0.0) {
            1.0
        } else {
            0.0
        }
    } else {
        phi(epsilon, &(sigma * alpha))
    }
}

/// Draws `ξ ∈ (0, 1]` and sets `η = [ξ > φ(ε, αΣ)]`.
pub fn draw_eta<R: Rng + ?Sized>(
    rng: &mut R,
    epsilon: &DVector<f64>,
    alpha: f64,
    sigma: &DMatrix<f64>,
) -> TriggerDecision {
    // (0, 1] so that φ = 0 fires surely and φ = 1 never does.
    let xi = 1.0 - rng.random::<f64>();
    let phi_value = phi_scaled(epsilon, alpha, sigma);
    TriggerDecision {
        eta: xi > phi_value,
        xi,
        phi_value,
    }
}

/// Number of singular values above `1e-9 · max(σ_max, 1)`.
pub fn numerical_rank(sigma: &DMatrix<f64>) -> usize {
    if sigma.is_empty() {
        return 0;
    }
    let sv = sigma.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cut = RANK_TOL * smax.max(1.0);
    sv.iter().filter(|s| **s > cut).count()
}
