//! Problem definitions: confining potentials, forward maps, Gaussian
//! specifications and Bayesian inverse problems.
//!
//! A [`Potential`] `f` defines the target `exp(-f(x))` of the kinetic
//! samplers (up to normalization) and the force `-grad f` of the transport
//! step. Gradients are analytic — there is no automatic differentiation —
//! and every catalog potential's gradient is verified against central
//! differences in the tests.
//!
//! A [`BayesProblem`] bundles a forward map `G`, a Gaussian prior, Gaussian
//! observation noise and an observation `y`; [`bayes_potential`] is the
//! induced regularized least-squares objective, whose Gibbs density
//! `exp(-Phi)` is the posterior targeted by the Kalman samplers.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{psd_inv_sqrt, psd_sqrt, SpdFactor};

type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A smooth confining potential `f: R^d -> R` with an analytic gradient.
#[derive(Clone)]
pub struct Potential {
    name: String,
    dim: usize,
    eval: ScalarFn,
    grad: VectorFn,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

impl Potential {
    /// Build a potential from closures. The gradient must be the exact
    /// analytic gradient of `eval`.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        eval: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            eval: Arc::new(eval),
            grad: Arc::new(grad),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Potential value at `x`.
    pub fn eval(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok((self.eval)(x))
    }

    /// Gradient at `x`.
    pub fn grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x.len())?;
        Ok((self.grad)(x))
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim {
            return Err(Error::DimensionMismatch {
                context: "potential argument",
                expected: self.dim,
                found,
            });
        }
        Ok(())
    }
}

/// `f(x) = x^2 / 2` on the line.
pub fn quadratic_1d() -> Potential {
    Potential::new(
        "quadratic_1d",
        1,
        |x| 0.5 * x[0] * x[0],
        |x| DVector::from_vec(vec![x[0]]),
    )
}

/// Symmetric double well `f(x) = (x - 1)^2 (x + 1)^2` with minima at `±1`.
pub fn doublewell_1d() -> Potential {
    Potential::new(
        "doublewell_1d",
        1,
        |x| {
            let s = x[0] * x[0] - 1.0;
            s * s
        },
        |x| DVector::from_vec(vec![4.0 * x[0] * (x[0] * x[0] - 1.0)]),
    )
}

/// Isotropic quadratic bowl `f(x, y) = (x^2 + y^2) / 2`.
pub fn quadratic_2d() -> Potential {
    Potential::new(
        "quadratic_2d",
        2,
        |x| 0.5 * (x[0] * x[0] + x[1] * x[1]),
        |x| DVector::from_vec(vec![x[0], x[1]]),
    )
}

/// Planar double well
/// `f(x, y) = 0.1 ((x-1)^2 + (y-1)^2) ((x+1)^2 + (y+1)^2)`
/// with minima at `(1, 1)` and `(-1, -1)`.
pub fn doublewell_2d() -> Potential {
    Potential::new(
        "doublewell_2d",
        2,
        |x| {
            let u = (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2);
            let w = (x[0] + 1.0).powi(2) + (x[1] + 1.0).powi(2);
            0.1 * u * w
        },
        |x| {
            let u = (x[0] - 1.0).powi(2) + (x[1] - 1.0).powi(2);
            let w = (x[0] + 1.0).powi(2) + (x[1] + 1.0).powi(2);
            DVector::from_vec(vec![
                0.1 * (2.0 * (x[0] - 1.0) * w + u * 2.0 * (x[0] + 1.0)),
                0.1 * (2.0 * (x[1] - 1.0) * w + u * 2.0 * (x[1] + 1.0)),
            ])
        },
    )
}

/// The built-in potential catalog.
pub fn builtin_potentials() -> Vec<Potential> {
    vec![quadratic_1d(), doublewell_1d(), quadratic_2d(), doublewell_2d()]
}

/// Look up a catalog potential by name.
pub fn potential_by_name(name: &str) -> Option<Potential> {
    builtin_potentials().into_iter().find(|p| p.name() == name)
}

/// A forward map `G: R^d -> R^{d'}`, optionally carrying its linear part
/// when `G(x) = A x` exactly.
#[derive(Clone)]
pub struct ForwardMap {
    dim_in: usize,
    dim_out: usize,
    eval: VectorFn,
    linear_part: Option<DMatrix<f64>>,
}

impl fmt::Debug for ForwardMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardMap")
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .field("linear", &self.linear_part.is_some())
            .finish()
    }
}

impl ForwardMap {
    /// The linear map `G(x) = A x`.
    pub fn linear(a: DMatrix<f64>) -> Self {
        let (dim_out, dim_in) = a.shape();
        let a_eval = a.clone();
        Self {
            dim_in,
            dim_out,
            eval: Arc::new(move |x| &a_eval * x),
            linear_part: Some(a),
        }
    }

    /// A general (possibly nonlinear) forward map.
    pub fn nonlinear(
        dim_in: usize,
        dim_out: usize,
        eval: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_in,
            dim_out,
            eval: Arc::new(eval),
            linear_part: None,
        }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    /// The matrix `A` when the map is linear.
    pub fn linear_part(&self) -> Option<&DMatrix<f64>> {
        self.linear_part.as_ref()
    }

    /// Evaluate `G(x)`, checking both dimensions.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim_in {
            return Err(Error::DimensionMismatch {
                context: "forward map argument",
                expected: self.dim_in,
                found: x.len(),
            });
        }
        let out = (self.eval)(x);
        if out.len() != self.dim_out {
            return Err(Error::DimensionMismatch {
                context: "forward map output",
                expected: self.dim_out,
                found: out.len(),
            });
        }
        Ok(out)
    }
}

/// A Gaussian `N(mean, covariance)` with a strictly positive definite
/// covariance, carrying cached factorizations used in the samplers:
/// the symmetric square root, its inverse, and a Cholesky factor for
/// precision solves.
#[derive(Clone, Debug)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    factor: SpdFactor,
}

impl GaussianSpec {
    /// Validate and cache. The covariance must be symmetric and strictly
    /// positive definite.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "gaussian covariance vs mean",
                expected: mean.len(),
                found: covariance.nrows(),
            });
        }
        let sqrt = psd_sqrt(&covariance)?;
        let inv_sqrt = psd_inv_sqrt(&covariance)?;
        let factor = SpdFactor::new(&covariance, "gaussian covariance")?;
        Ok(Self { mean, covariance, sqrt, inv_sqrt, factor })
    }

    /// Standard normal in dimension `d`.
    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Symmetric square root `C^{1/2}`.
    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    /// Inverse symmetric square root `C^{-1/2}`.
    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    /// Precision application: solve `C z = v`.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    /// Column-wise precision application: solve `C Z = V`.
    pub fn precision_apply_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve_mat(v)
    }

    /// The precision matrix `C^{-1}`, symmetrized.
    pub fn precision(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

/// A Bayesian inverse problem: recover `x` from
/// `y = G(x) + eta`, `eta ~ N(0, noise)`, under a Gaussian prior.
#[derive(Clone, Debug)]
pub struct BayesProblem {
    pub forward: ForwardMap,
    pub prior: GaussianSpec,
    pub noise: GaussianSpec,
    pub data: DVector<f64>,
}

impl BayesProblem {
    /// Validate all dimension couplings.
    pub fn new(
        forward: ForwardMap,
        prior: GaussianSpec,
        noise: GaussianSpec,
        data: DVector<f64>,
    ) -> Result<Self> {
        if prior.dim() != forward.dim_in() {
            return Err(Error::DimensionMismatch {
                context: "prior dimension vs forward map input",
                expected: forward.dim_in(),
                found: prior.dim(),
            });
        }
        if noise.dim() != forward.dim_out() {
            return Err(Error::DimensionMismatch {
                context: "noise dimension vs forward map output",
                expected: forward.dim_out(),
                found: noise.dim(),
            });
        }
        if data.len() != forward.dim_out() {
            return Err(Error::DimensionMismatch {
                context: "data length vs forward map output",
                expected: forward.dim_out(),
                found: data.len(),
            });
        }
        Ok(Self { forward, prior, noise, data })
    }

    pub fn dim(&self) -> usize {
        self.forward.dim_in()
    }

    pub fn dim_obs(&self) -> usize {
        self.forward.dim_out()
    }
}

/// What a particle system is asked to target: either a Gibbs density
/// `exp(-f)` given directly by a potential, or the posterior of a Bayesian
/// inverse problem.
#[derive(Clone, Debug)]
pub enum ProblemSpec {
    Gibbs(Potential),
    Inversion(BayesProblem),
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProblemSpec::Gibbs(p) => p.dim(),
            ProblemSpec::Inversion(p) => p.dim(),
        }
    }
}

/// The regularized least-squares objective of a Bayesian inverse problem:
///
/// ```text
/// Phi(x; y) = (1/2) (y - G(x))^T noise^{-1} (y - G(x))
///           + (1/2) (x - x0)^T prior_cov^{-1} (x - x0)
/// ```
///
/// The posterior density is proportional to `exp(-Phi)`. Both quadratic
/// forms are evaluated through the cached covariance factorizations.
pub fn bayes_potential(problem: &BayesProblem, x: &DVector<f64>) -> Result<f64> {
    if x.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            context: "bayes_potential argument",
            expected: problem.dim(),
            found: x.len(),
        });
    }
    let residual = &problem.data - problem.forward.eval(x)?;
    let weighted = problem.noise.precision_apply(&residual);
    let centered = x - problem.prior.mean();
    let reg = problem.prior.precision_apply(&centered);
    Ok(0.5 * residual.dot(&weighted) + 0.5 * centered.dot(&reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn scalar_problem(a: f64, gamma: f64, y: f64) -> BayesProblem {
        BayesProblem::new(
            ForwardMap::linear(DMatrix::from_row_slice(1, 1, &[a])),
            GaussianSpec::standard(1),
            GaussianSpec::new(
                DVector::zeros(1),
                DMatrix::from_row_slice(1, 1, &[gamma]),
            )
            .unwrap(),
            DVector::from_vec(vec![y]),
        )
        .unwrap()
    }

    #[test]
    fn objective_pure_data_term() {
        // G = id, noise = prior = N(0, 1), y = 1, x = 0:
        // data term (1/2)(1 - 0)^2 = 1/2, prior term 0.
        let p = scalar_problem(1.0, 1.0, 1.0);
        let phi = bayes_potential(&p, &DVector::zeros(1)).unwrap();
        assert_relative_eq!(phi, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn objective_pure_prior_term() {
        // Same problem at x = 1: data term 0, prior term (1/2) * 1 = 1/2.
        let p = scalar_problem(1.0, 1.0, 1.0);
        let phi = bayes_potential(&p, &DVector::from_vec(vec![1.0])).unwrap();
        assert_relative_eq!(phi, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn objective_diagonal_two_dimensional() {
        // A = I, noise = 2I, prior = N(0, I), y = (0,0), x = (2,0):
        // data term (1/2)(4/2) = 1, prior term (1/2)(4) = 2, total 3.
        let p = BayesProblem::new(
            ForwardMap::linear(DMatrix::identity(2, 2)),
            GaussianSpec::standard(2),
            GaussianSpec::new(
                DVector::zeros(2),
                DMatrix::identity(2, 2) * 2.0,
            )
            .unwrap(),
            DVector::zeros(2),
        )
        .unwrap();
        let phi = bayes_potential(&p, &DVector::from_vec(vec![2.0, 0.0])).unwrap();
        assert_relative_eq!(phi, 3.0, max_relative = 1e-14);
    }

    #[test]
    fn objective_matches_independent_dense_inverse_path() {
        // Random small problem; compare the factored solve against an
        // explicitly inverted noise covariance.
        let mut rng = crate::rng::RngStream::new(21, 0).rng();
        let a = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>() - 0.5);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>() - 0.5);
        let gamma = &m * m.transpose() + DMatrix::identity(3, 3) * 0.3;
        let y = DVector::from_fn(3, |_, _| rng.gen::<f64>());
        let p = BayesProblem::new(
            ForwardMap::linear(a.clone()),
            GaussianSpec::standard(2),
            GaussianSpec::new(DVector::zeros(3), gamma.clone()).unwrap(),
            y.clone(),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let phi = bayes_potential(&p, &x).unwrap();
        let r = &y - &a * &x;
        let dense =
            0.5 * r.dot(&(gamma.try_inverse().unwrap() * &r)) + 0.5 * x.dot(&x);
        assert_relative_eq!(phi, dense, max_relative = 1e-10);
    }

    #[test]
    fn catalog_values_and_gradients_at_reference_points() {
        let q1 = quadratic_1d();
        let x = DVector::from_vec(vec![2.0]);
        assert_relative_eq!(q1.eval(&x).unwrap(), 2.0);
        assert_relative_eq!(q1.grad(&x).unwrap()[0], 2.0);

        let d1 = doublewell_1d();
        assert_relative_eq!(d1.eval(&DVector::from_vec(vec![1.0])).unwrap(), 0.0);
        assert_relative_eq!(d1.eval(&DVector::from_vec(vec![0.0])).unwrap(), 1.0);
        assert_relative_eq!(d1.grad(&DVector::from_vec(vec![1.0])).unwrap()[0], 0.0);

        let q2 = quadratic_2d();
        let x2 = DVector::from_vec(vec![1.0, -2.0]);
        assert_relative_eq!(q2.eval(&x2).unwrap(), 2.5);
        assert_relative_eq!(q2.grad(&x2).unwrap(), x2);

        let d2 = doublewell_2d();
        assert_relative_eq!(d2.eval(&DVector::from_vec(vec![1.0, 1.0])).unwrap(), 0.0);
        assert_relative_eq!(d2.eval(&DVector::from_vec(vec![-1.0, -1.0])).unwrap(), 0.0);
        // Value at the saddle region: f(0,0) = 0.1 * 2 * 2 = 0.4.
        assert_relative_eq!(d2.eval(&DVector::zeros(2)).unwrap(), 0.4);
    }

    #[test]
    fn catalog_gradients_match_central_differences() {
        let mut rng = crate::rng::RngStream::new(33, 0).rng();
        for pot in builtin_potentials() {
            for _ in 0..25 {
                let x = DVector::from_fn(pot.dim(), |_, _| 6.0 * rng.gen::<f64>() - 3.0);
                let g = pot.grad(&x).unwrap();
                for k in 0..pot.dim() {
                    let h = 1e-5 * (1.0 + x[k].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (pot.eval(&xp).unwrap() - pot.eval(&xm).unwrap()) / (2.0 * h);
                    let denom = 1.0 + fd.abs();
                    assert!(
                        (g[k] - fd).abs() / denom <= 1e-5,
                        "{}: grad[{k}] = {} vs fd {}",
                        pot.name(),
                        g[k],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn forward_map_linear_part_is_consistent() {
        let mut rng = crate::rng::RngStream::new(8, 4).rng();
        let a = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let map = ForwardMap::linear(a.clone());
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let direct = map.eval(&x).unwrap();
            let via_matrix = &a * &x;
            assert_relative_eq!(direct, via_matrix, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let q = quadratic_1d();
        assert!(q.eval(&DVector::zeros(2)).is_err());
        let map = ForwardMap::linear(DMatrix::identity(2, 2));
        assert!(map.eval(&DVector::zeros(3)).is_err());
        // Bad output arity from a nonlinear map is caught at evaluation.
        let bad = ForwardMap::nonlinear(1, 2, |x| x.clone());
        assert!(bad.eval(&DVector::zeros(1)).is_err());
        // Problem-level coupling checks.
        let p = BayesProblem::new(
            ForwardMap::linear(DMatrix::identity(2, 2)),
            GaussianSpec::standard(1),
            GaussianSpec::standard(2),
            DVector::zeros(2),
        );
        assert!(matches!(p, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gaussian_spec_validates_covariance() {
        assert!(GaussianSpec::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]),
        )
        .is_err());
        assert!(GaussianSpec::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
        )
        .is_err());
        let g = GaussianSpec::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0])),
        )
        .unwrap();
        assert_relative_eq!(
            g.sqrt(),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            g.inv_sqrt(),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0 / 3.0])),
            epsilon = 1e-12
        );
        let v = DVector::from_vec(vec![8.0, 18.0]);
        assert_relative_eq!(
            g.precision_apply(&v),
            DVector::from_vec(vec![2.0, 2.0]),
            epsilon = 1e-12
        );
    }
}
