//! Multi-sensor LTI system set and the matrix predicates shared by every
//! other module.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::{self, FilterError};

/// Relative asymmetry above which a supposedly symmetric input is rejected.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Eigenvalue tolerance for definiteness checks.
pub const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{name} is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { name: &'static str, asymmetry: f64 },
    #[error("system set must contain at least one system")]
    EmptySet,
}

/// One process/sensor pair: `x(k+1) = A x(k) + w(k)`, `y(k) = C x(k) + v(k)`
/// with `w ~ N(0, Q)`, `v ~ N(0, R)` and `x(0) ~ N(0, Pi0)`.
///
/// Symmetric inputs are symmetrized on construction. Definiteness is not
/// enforced here; [`validate_system`] reports it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    pi0: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        pi0: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        if !a.is_square() {
            return Err(ModelError::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let nx = a.nrows();
        if nx == 0 {
            return Err(ModelError::Dimension(
                "state dimension must be positive".into(),
            ));
        }
        if c.ncols() != nx || c.nrows() == 0 {
            return Err(ModelError::Dimension(format!(
                "C is {}x{}, expected m x {nx} with m >= 1",
                c.nrows(),
                c.ncols()
            )));
        }
        let ny = c.nrows();
        for (name, m, dim) in [("Q", &q, nx), ("R", &r, ny), ("Pi0", &pi0, nx)] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(ModelError::Dimension(format!(
                    "{name} is {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        Ok(Self {
            q: ingest_symmetric("Q", q)?,
            r: ingest_symmetric("R", r)?,
            pi0: ingest_symmetric("Pi0", pi0)?,
            a,
            c,
        })
    }

    /// Same as [`LtiSystem::new`] with a zero initial covariance.
    pub fn without_prior(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        Self::new(a, c, q, r, DMatrix::zeros(n, n))
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn pi0(&self) -> &DMatrix<f64> {
        &self.pi0
    }
    pub fn dim_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn dim_y(&self) -> usize {
        self.c.nrows()
    }
}

/// Ordered, non-empty collection of mutually independent systems.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSet {
    systems: Vec<LtiSystem>,
}

impl SystemSet {
    pub fn new(systems: Vec<LtiSystem>) -> Result<Self, ModelError> {
        if systems.is_empty() {
            return Err(ModelError::EmptySet);
        }
        Ok(Self { systems })
    }

    pub fn systems(&self) -> &[LtiSystem] {
        &self.systems
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LtiSystem> {
        self.systems.iter()
    }
}

/// The two-process benchmark pair used throughout the tests and shipped
/// configs.
pub fn two_process_example() -> SystemSet {
    let s1 = LtiSystem::without_prior(
        DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
        DMatrix::identity(2, 2),
        DMatrix::from_element(1, 1, 1.0),
    )
    .expect("valid system");
    let s2 = LtiSystem::without_prior(
        DMatrix::from_row_slice(2, 2, &[1.1, 1.0, 0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DMatrix::identity(2, 2) * 3.0,
        DMatrix::from_element(1, 1, 1.0),
    )
    .expect("valid system");
    SystemSet::new(vec![s1, s2]).expect("non-empty")
}

fn ingest_symmetric(name: &'static str, m: DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let norm = m.norm();
    let asym = (&m - m.transpose()).norm();
    if norm > 0.0 && asym > SYMMETRY_TOL * norm {
        return Err(ModelError::NotSymmetric {
            name,
            asymmetry: asym / norm,
        });
    }
    Ok(symmetrize(&m))
}

/// `(X + Xᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64, ModelError> {
    if !a.is_square() {
        return Err(ModelError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = a.complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn scale_of(ev: &[f64]) -> f64 {
    ev.iter().map(|v| v.abs()).fold(1.0, f64::max)
}

/// Positive definite up to `EIGEN_TOL` relative to the largest eigenvalue.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let ev = symmetric_eigenvalues(m);
    ev.first().is_some_and(|&lo| lo > EIGEN_TOL * scale_of(&ev))
}

/// Positive semidefinite up to `tol` relative to the largest eigenvalue.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let ev = symmetric_eigenvalues(m);
    ev.first().is_none_or(|&lo| lo >= -tol * scale_of(&ev))
}

/// Loewner order `a ⪯ b`, i.e. `b - a` is PSD within `tol`.
pub fn psd_leq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let diff = b - a;
    let ev = symmetric_eigenvalues(&diff);
    let scale = a.norm().max(b.norm()).max(1.0);
    ev.first().is_none_or(|&lo| lo >= -tol * scale)
}

/// Outcome of [`validate_system`]. Errors make the system unusable;
/// warnings are informational.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub spectral_radius: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks the standing assumptions on one system. Detectability is checked
/// operationally: the Riccati iteration has to converge.
pub fn validate_system(sys: &LtiSystem) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !is_positive_definite(sys.q()) {
        report.errors.push("Q not PD".into());
    }
    if !is_positive_definite(sys.r()) {
        report.errors.push("R not PD".into());
    }
    if !is_psd(sys.pi0(), EIGEN_TOL) {
        report.errors.push("Pi0 not PSD".into());
    }
    let rho = spectral_radius(sys.a()).expect("A is square by construction");
    report.spectral_radius = rho;
    if rho <= 1.0 {
        report
            .warnings
            .push(format!("A is not unstable (spectral radius {rho:.6})"));
    }
    // R must be invertible for the Riccati map to make sense at all.
    if report.errors.iter().all(|e| e != "R not PD") {
        match filtering::solve_dare(sys) {
            Ok(_) => {}
            Err(e @ FilterError::Diverged { .. }) => {
                report.errors.push(format!("not detectable: {e}"))
            }
            Err(e) => report.errors.push(e.to_string()),
        }
    }
    report
}
