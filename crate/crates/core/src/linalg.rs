//! Ensemble statistics and the small dense linear algebra kernel shared by
//! all samplers.
//!
//! Conventions used throughout the crate:
//!
//! * An ensemble of `n` particles in dimension `d` is stored column-wise as
//!   a `d x n` matrix.
//! * Ensemble means and covariances use the **biased** `1/n` normalization.
//!   The samplers' update formulas are derived for that normalization, so
//!   it is part of the contract, not a style choice.
//! * Matrix square roots of covariances go through a symmetric
//!   eigendecomposition rather than a Cholesky factorization, because
//!   ensemble covariances are rank-deficient whenever `n <= d` and must
//!   still admit a square root.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::ForwardMap;

/// Tolerance for symmetry checks on matrices that enter eigendecompositions
/// or Cholesky factorizations.
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues of a nominally PSD matrix in `[-PSD_CLAMP_TOL, 0)` are
/// treated as rounding noise and clamped to zero; anything below is an
/// error.
const PSD_CLAMP_TOL: f64 = 1e-10;

/// A cloud of `n` particles in `R^d`, stored as the columns of a `d x n`
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    positions: DMatrix<f64>,
}

impl Ensemble {
    /// Wrap a `d x n` matrix of particle columns. Requires at least one
    /// particle and a positive dimension.
    pub fn new(positions: DMatrix<f64>) -> Result<Self> {
        if positions.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "ensemble dimension must be positive".into(),
            ));
        }
        if positions.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "ensemble must contain at least one particle".into(),
            ));
        }
        Ok(Self { positions })
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    /// Number of particles `n`.
    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one particle
    }

    /// The underlying `d x n` matrix.
    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.positions
    }

    /// Particle `i` as an owned vector.
    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.positions.column(i).into_owned()
    }

    /// True if every coordinate is finite and within the trust region
    /// `|x| <= bound`.
    pub fn within_bounds(&self, bound: f64) -> bool {
        self.positions.iter().all(|v| v.is_finite() && v.abs() <= bound)
    }
}

/// First and second moments of an ensemble under a forward map, with the
/// biased `1/n` normalization.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    /// Ensemble mean of the particles, `d`-vector.
    pub mean_x: DVector<f64>,
    /// Ensemble mean of the forward values, `d'`-vector.
    pub mean_g: DVector<f64>,
    /// `d x d` particle covariance `(1/n) sum (x_i - mean)(x_i - mean)^T`.
    pub cov_xx: DMatrix<f64>,
    /// `d x d'` cross covariance `(1/n) sum (x_i - mean)(G(x_i) - mean_g)^T`.
    pub cov_xg: DMatrix<f64>,
}

/// Evaluate the forward map on every particle, returned column-wise as a
/// `d' x n` matrix.
pub fn forward_values(ens: &Ensemble, map: &ForwardMap) -> Result<DMatrix<f64>> {
    let n = ens.len();
    let mut g = DMatrix::zeros(map.dim_out(), n);
    for i in 0..n {
        let gi = map.eval(&ens.particle(i))?;
        g.set_column(i, &gi);
    }
    Ok(g)
}

/// Ensemble statistics of `ens` under `map`, evaluating the forward map on
/// every particle. Use [`ensemble_stats_with`] if the forward values are
/// already available.
pub fn ensemble_stats(ens: &Ensemble, map: &ForwardMap) -> Result<EnsembleStats> {
    if ens.dim() != map.dim_in() {
        return Err(Error::DimensionMismatch {
            context: "ensemble_stats: ensemble dimension vs forward map input",
            expected: map.dim_in(),
            found: ens.dim(),
        });
    }
    let g = forward_values(ens, map)?;
    Ok(ensemble_stats_with(ens, &g))
}

/// Ensemble statistics when the forward values `g` (`d' x n`, one column
/// per particle) have already been computed.
///
/// # Panics
/// If `g` does not have one column per particle.
pub fn ensemble_stats_with(ens: &Ensemble, g: &DMatrix<f64>) -> EnsembleStats {
    let n = ens.len();
    assert_eq!(g.ncols(), n, "one forward value column per particle");
    let inv_n = 1.0 / n as f64;

    let x = ens.positions();
    let mean_x = x.column_sum() * inv_n;
    let mean_g = g.column_sum() * inv_n;

    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        col -= &mean_x;
    }
    let mut gc = g.clone();
    for mut col in gc.column_iter_mut() {
        col -= &mean_g;
    }

    let cov_xx = &xc * xc.transpose() * inv_n;
    let cov_xg = &xc * gc.transpose() * inv_n;

    EnsembleStats { mean_x, mean_g, cov_xx, cov_xg }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn check_symmetric(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            context,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    let scale = 1.0 + max_abs(m);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric { context });
            }
        }
    }
    Ok(())
}

/// Apply a scalar function to the spectrum of a symmetric matrix:
/// `f_spec(C) = U diag(f(lambda)) U^T`. The mapping function also receives
/// the clamp threshold `tol * max(1, |lambda|_max)`, so callers can treat
/// eigenvalues as zero relative to the spectral scale. The input is
/// symmetrized before the decomposition and the result after, so rounding
/// noise never produces an asymmetric output.
fn symmetric_spectral_map(
    c: &DMatrix<f64>,
    context: &'static str,
    mut f: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<DMatrix<f64>> {
    check_symmetric(c, context)?;
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let threshold = PSD_CLAMP_TOL * scale;
    let mut mapped = DVector::zeros(eig.eigenvalues.len());
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        mapped[k] = f(lambda, threshold)?;
    }
    let u = &eig.eigenvectors;
    let out = u * DMatrix::from_diagonal(&mapped) * u.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Symmetric square root of a positive semidefinite matrix.
///
/// Eigenvalues within `1e-10 * max(1, |lambda|_max)` of zero — on either
/// side — are treated as exact zeros: they are rounding noise from
/// rank-deficient ensemble covariances, and taking their literal square
/// root would inject spurious `~1e-8` components outside the matrix's
/// range. Eigenvalues below the negative threshold are rejected as
/// genuinely indefinite. The result `S` is symmetric PSD with `S S = C` up
/// to rounding.
pub fn psd_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetric_spectral_map(c, "psd_sqrt", |lambda, threshold| {
        if lambda < -threshold {
            Err(Error::NotPositiveSemidefinite {
                context: "psd_sqrt",
                eigenvalue: lambda,
            })
        } else if lambda <= threshold {
            Ok(0.0)
        } else {
            Ok(lambda.sqrt())
        }
    })
}

/// Inverse of the symmetric square root of a strictly positive definite
/// matrix: `C^{-1/2}`.
pub fn psd_inv_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetric_spectral_map(c, "psd_inv_sqrt", |lambda, threshold| {
        if lambda <= threshold {
            Err(Error::NotPositiveSemidefinite {
                context: "psd_inv_sqrt",
                eigenvalue: lambda,
            })
        } else {
            Ok(1.0 / lambda.sqrt())
        }
    })
}

/// A reusable Cholesky factorization of a symmetric positive definite
/// matrix. Factor once, then solve against many right-hand sides.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    dim: usize,
}

impl SpdFactor {
    /// Factor `m`, verifying symmetry first. Fails with
    /// [`Error::SolveFailed`] if `m` is singular or indefinite.
    pub fn new(m: &DMatrix<f64>, context: &'static str) -> Result<Self> {
        check_symmetric(m, context)?;
        let chol = Cholesky::new(m.clone()).ok_or(Error::SolveFailed { context })?;
        Ok(Self { chol, dim: m.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solve `M x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solve `M X = B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// The inverse matrix `M^{-1}`, symmetrized.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }
}

/// Solve the symmetric positive definite system `M x = b`.
///
/// Verifies symmetry, factors `M` once and back-substitutes. Singular or
/// indefinite matrices are reported as [`Error::SolveFailed`].
pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if m.nrows() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "spd_solve: matrix rows vs rhs length",
            expected: m.nrows(),
            found: b.len(),
        });
    }
    Ok(SpdFactor::new(m, "spd_solve")?.solve(b))
}
