//! Closed-form and quadrature-based reference solutions used to validate
//! the particle methods.
//!
//! For a linear forward map the Bayesian posterior is Gaussian and known
//! in closed form, as is the whole family of partially-tempered measures
//! connecting prior and posterior ([`GaussianPath`]). For Gibbs densities
//! `exp(-f)` with `f` in one or two dimensions, high-resolution
//! inverse-transform samplers and deterministic quadratures provide
//! independent draws and moments against which the interacting-particle
//! systems are checked.
//!
//! Everything here is deliberately implemented with different machinery
//! than the samplers under test: direct matrix inversions, dense grids and
//! inverse-CDF lookup, not ensembles or stochastic dynamics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::boltzmann::PhaseEnsemble;
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{BayesProblem, Potential};
use crate::rng::RngStream;

/// Half-width of the quadrature and sampling domain `[-W, W]^d`.
pub const DOMAIN_HALF_WIDTH: f64 = 8.0;
/// Grid nodes per axis for one-dimensional quadratures and samplers.
const GRID_1D: usize = 8193;
/// Grid nodes per axis for two-dimensional quadratures and samplers.
const GRID_2D: usize = 1025;
/// Minimum fraction of probability mass the sampling domain must carry,
/// measured against a domain of twice the half-width.
const REQUIRED_MASS_FRACTION: f64 = 1.0 - 1e-8;

/// Mean and covariance of a Gaussian measure produced by an oracle.
#[derive(Clone, Debug)]
pub struct GaussianInterpolant {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// The family of Gaussian measures obtained by tempering the likelihood
/// of a linear-Gaussian inverse problem with exponent `t`:
///
/// ```text
/// precision(t)  = C0^{-1} + t A^T Gamma^{-1} A
/// mean(t)       = cov(t) (t A^T Gamma^{-1} y + C0^{-1} x0)
/// ```
///
/// `t = 0` is the prior, `t = 1` the posterior. The preconditioned
/// ensemble flows follow this path in expectation, so it doubles as a
/// time-resolved reference for them.
pub struct GaussianPath {
    prior_precision: DMatrix<f64>,
    prior_precision_mean: DVector<f64>,
    /// `A^T Gamma^{-1} A`.
    data_precision: DMatrix<f64>,
    /// `A^T Gamma^{-1} y`.
    data_term: DVector<f64>,
}

impl GaussianPath {
    /// Requires a linear forward map; nonlinear problems have no
    /// closed-form path.
    pub fn new(problem: &BayesProblem) -> Result<Self> {
        let a = problem.forward.linear_part().ok_or_else(|| {
            Error::InvalidArgument(
                "closed-form Gaussian reference requires a linear forward map".into(),
            )
        })?;
        let gamma_inv_a = problem.noise.precision_apply_mat(a);
        let data_precision = a.transpose() * &gamma_inv_a;
        let data_term = a.transpose() * problem.noise.precision_apply(&problem.data);
        let prior_precision = problem.prior.precision();
        let prior_precision_mean = problem.prior.precision_apply(problem.prior.mean());
        Ok(Self {
            prior_precision,
            prior_precision_mean,
            data_precision,
            data_term,
        })
    }

    /// The Gaussian measure at tempering exponent `t` in `[0, 1]`.
    pub fn at(&self, t: f64) -> Result<GaussianInterpolant> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "tempering exponent must lie in [0, 1], got {t}"
            )));
        }
        let precision = &self.prior_precision + t * &self.data_precision;
        let factor = SpdFactor::new(&precision, "tempered posterior precision")?;
        let covariance = factor.inverse();
        let mean = factor.solve(&(t * &self.data_term + &self.prior_precision_mean));
        Ok(GaussianInterpolant { mean, covariance })
    }
}

/// Closed-form Gaussian measure at tempering exponent `t` of a
/// linear-Gaussian problem. See [`GaussianPath`].
pub fn gaussian_interpolant(problem: &BayesProblem, t: f64) -> Result<GaussianInterpolant> {
    GaussianPath::new(problem)?.at(t)
}

/// Closed-form posterior of a linear-Gaussian inverse problem
/// (the tempering path at `t = 1`).
pub fn gaussian_posterior(problem: &BayesProblem) -> Result<GaussianInterpolant> {
    gaussian_interpolant(problem, 1.0)
}

/// Composite Simpson quadrature over uniformly spaced nodal values.
/// Requires an odd number of nodes (an even number of intervals).
fn simpson(values: &[f64], h: f64) -> f64 {
    assert!(values.len() >= 3 && values.len() % 2 == 1, "Simpson needs an odd node count");
    let mut sum = values[0] + values[values.len() - 1];
    for (k, v) in values.iter().enumerate().take(values.len() - 1).skip(1) {
        sum += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    sum * h / 3.0
}

/// Uniform grid of `n` nodes over `[lo, hi]`, endpoints included.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Evaluate a one-dimensional potential on a grid without re-allocating
/// the argument vector.
fn eval_grid_1d(pot: &Potential, nodes: &[f64]) -> Result<Vec<f64>> {
    let mut arg = DVector::zeros(1);
    nodes
        .iter()
        .map(|&x| {
            arg[0] = x;
            pot.eval(&arg)
        })
        .collect()
}

/// Inverse-transform sampler for the density proportional to `exp(-f)` on
/// the line, built from a trapezoid cumulative of `exp(-f)` on a dense
/// grid over `[-W, W]`. Construction verifies that the domain carries at
/// least the required fraction of the mass found on `[-2W, 2W]`.
pub struct InverseTransform1d {
    nodes: Vec<f64>,
    /// Normalized cumulative distribution at the nodes, `cdf[0] = 0`,
    /// `cdf[last] = 1`.
    cdf: Vec<f64>,
}

impl InverseTransform1d {
    pub fn new(pot: &Potential) -> Result<Self> {
        if pot.dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "one-dimensional inverse-transform sampler",
                expected: 1,
                found: pot.dim(),
            });
        }
        let w = DOMAIN_HALF_WIDTH;
        // Evaluate once on an extended grid of the same spacing; the inner
        // grid is the middle half of it.
        let n_ext = 2 * (GRID_1D - 1) + 1;
        let ext_nodes = linspace(-2.0 * w, 2.0 * w, n_ext);
        let f_ext = eval_grid_1d(pot, &ext_nodes)?;
        let f_min = f_ext.iter().cloned().fold(f64::INFINITY, f64::min);
        if !f_min.is_finite() {
            return Err(Error::InvalidArgument(
                "potential is not finite on the sampling domain".into(),
            ));
        }
        let rho_ext: Vec<f64> = f_ext.iter().map(|f| (-(f - f_min)).exp()).collect();
        let h = ext_nodes[1] - ext_nodes[0];

        let lo = (GRID_1D - 1) / 2;
        let hi = lo + GRID_1D - 1;
        let mass_ext = trapezoid(&rho_ext, h);
        let mass_inner = trapezoid(&rho_ext[lo..=hi], h);
        let fraction = mass_inner / mass_ext;
        if !(fraction >= REQUIRED_MASS_FRACTION) {
            return Err(Error::GridTooSmall { fraction, required: REQUIRED_MASS_FRACTION });
        }

        let nodes = ext_nodes[lo..=hi].to_vec();
        let rho = &rho_ext[lo..=hi];
        let mut cdf = Vec::with_capacity(GRID_1D);
        cdf.push(0.0);
        for k in 1..GRID_1D {
            cdf.push(cdf[k - 1] + 0.5 * h * (rho[k - 1] + rho[k]));
        }
        let total = cdf[GRID_1D - 1];
        for c in cdf.iter_mut() {
            *c /= total;
        }
        Ok(Self { nodes, cdf })
    }

    /// Map a uniform variate through the inverse CDF.
    pub fn sample_from_uniform(&self, u: f64) -> f64 {
        invert_piecewise_cdf(&self.nodes, &self.cdf, u.clamp(0.0, 1.0))
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        self.sample_from_uniform(rng.gen())
    }

    /// Piecewise-linear CDF value at `x` (0 left of the domain, 1 right
    /// of it); used by goodness-of-fit checks.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return 0.0;
        }
        if x >= self.nodes[n - 1] {
            return 1.0;
        }
        let h = self.nodes[1] - self.nodes[0];
        let k = (((x - self.nodes[0]) / h) as usize).min(n - 2);
        let frac = (x - self.nodes[k]) / h;
        self.cdf[k] + frac * (self.cdf[k + 1] - self.cdf[k])
    }
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (0.5 * (values[0] + values[values.len() - 1]) + inner)
}

/// Invert a nondecreasing nodal CDF with linear interpolation between
/// nodes. Flat stretches (zero density) resolve to their right node.
fn invert_piecewise_cdf(nodes: &[f64], cdf: &[f64], u: f64) -> f64 {
    let k = cdf.partition_point(|&c| c < u);
    if k == 0 {
        return nodes[0];
    }
    if k >= cdf.len() {
        return nodes[nodes.len() - 1];
    }
    let span = cdf[k] - cdf[k - 1];
    if span <= 0.0 {
        return nodes[k];
    }
    let frac = (u - cdf[k - 1]) / span;
    nodes[k - 1] + frac * (nodes[k] - nodes[k - 1])
}

/// Inverse-transform sampler for the density proportional to `exp(-f)` on
/// the plane, built on a tensor grid over `[-W, W]^2`. The first
/// coordinate is drawn from the grid marginal, the second from the
/// conditional obtained by linear mixing of the two adjacent column
/// cumulatives (exact for the bilinear interpolant of the density).
pub struct InverseTransform2d {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Row-major `[i * n + j]`: unnormalized cumulative of column `i`
    /// (fixed first coordinate `xs[i]`) up to `ys[j]`.
    col_cum: Vec<f64>,
    /// Normalized CDF of the first-coordinate marginal at the `xs` nodes.
    marginal_cdf: Vec<f64>,
}

impl InverseTransform2d {
    pub fn new(pot: &Potential) -> Result<Self> {
        if pot.dim() != 2 {
            return Err(Error::DimensionMismatch {
                context: "two-dimensional inverse-transform sampler",
                expected: 2,
                found: pot.dim(),
            });
        }
        let w = DOMAIN_HALF_WIDTH;
        let n = GRID_2D;
        let n_ext = 2 * (n - 1) + 1;
        let ext = linspace(-2.0 * w, 2.0 * w, n_ext);
        let h = ext[1] - ext[0];

        // One pass over the extended tensor grid: track the global minimum
        // of f first so the exponentials cannot underflow to all zeros.
        let mut f_grid = vec![0.0f64; n_ext * n_ext];
        let mut arg = DVector::zeros(2);
        let mut f_min = f64::INFINITY;
        for i in 0..n_ext {
            arg[0] = ext[i];
            for j in 0..n_ext {
                arg[1] = ext[j];
                let f = pot.eval(&arg)?;
                f_grid[i * n_ext + j] = f;
                f_min = f_min.min(f);
            }
        }
        if !f_min.is_finite() {
            return Err(Error::InvalidArgument(
                "potential is not finite on the sampling domain".into(),
            ));
        }

        // Mass check: column masses by trapezoid in y, then trapezoid in x,
        // on the extended grid and on its inner quarter.
        let lo = (n - 1) / 2;
        let hi = lo + n - 1;
        let mut col_mass_ext = vec![0.0f64; n_ext];
        let mut col_mass_inner = vec![0.0f64; n_ext];
        let mut rho_col = vec![0.0f64; n_ext];
        for i in 0..n_ext {
            for j in 0..n_ext {
                rho_col[j] = (-(f_grid[i * n_ext + j] - f_min)).exp();
            }
            col_mass_ext[i] = trapezoid(&rho_col, h);
            col_mass_inner[i] = trapezoid(&rho_col[lo..=hi], h);
        }
        let mass_ext = trapezoid(&col_mass_ext, h);
        let mass_inner = trapezoid(&col_mass_inner[lo..=hi], h);
        let fraction = mass_inner / mass_ext;
        if !(fraction >= REQUIRED_MASS_FRACTION) {
            return Err(Error::GridTooSmall { fraction, required: REQUIRED_MASS_FRACTION });
        }

        // Inner-grid cumulatives.
        let xs: Vec<f64> = ext[lo..=hi].to_vec();
        let ys = xs.clone();
        let mut col_cum = vec![0.0f64; n * n];
        let mut marginal = vec![0.0f64; n];
        for (ii, i) in (lo..=hi).enumerate() {
            let mut cum = 0.0;
            let mut prev = (-(f_grid[i * n_ext + lo] - f_min)).exp();
            col_cum[ii * n] = 0.0;
            for (jj, j) in (lo + 1..=hi).enumerate() {
                let rho = (-(f_grid[i * n_ext + j] - f_min)).exp();
                cum += 0.5 * h * (prev + rho);
                col_cum[ii * n + jj + 1] = cum;
                prev = rho;
            }
            marginal[ii] = cum;
        }
        let mut marginal_cdf = Vec::with_capacity(n);
        marginal_cdf.push(0.0);
        for k in 1..n {
            marginal_cdf.push(marginal_cdf[k - 1] + 0.5 * h * (marginal[k - 1] + marginal[k]));
        }
        let total = marginal_cdf[n - 1];
        for c in marginal_cdf.iter_mut() {
            *c /= total;
        }
        Ok(Self { xs, ys, col_cum, marginal_cdf })
    }

    /// Map a pair of uniform variates through the two-stage inverse CDF.
    pub fn sample_from_uniforms(&self, u1: f64, u2: f64) -> (f64, f64) {
        let n = self.xs.len();
        let x = invert_piecewise_cdf(&self.xs, &self.marginal_cdf, u1.clamp(0.0, 1.0));
        let h = self.xs[1] - self.xs[0];
        let i = (((x - self.xs[0]) / h) as usize).min(n - 2);
        let alpha = ((x - self.xs[i]) / h).clamp(0.0, 1.0);

        // Conditional cumulative along y: the alpha-mixture of the two
        // adjacent column cumulatives.
        let left = &self.col_cum[i * n..(i + 1) * n];
        let right = &self.col_cum[(i + 1) * n..(i + 2) * n];
        let mix = |j: usize| (1.0 - alpha) * left[j] + alpha * right[j];
        let target = u2.clamp(0.0, 1.0) * mix(n - 1);

        // Binary search the first node with cumulative >= target.
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if mix(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c_lo = mix(lo);
        let c_hi = mix(hi);
        let y = if c_hi - c_lo <= 0.0 {
            self.ys[hi]
        } else {
            self.ys[lo] + (target - c_lo) / (c_hi - c_lo) * (self.ys[hi] - self.ys[lo])
        };
        (x, y)
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> (f64, f64) {
        let u1 = rng.gen();
        let u2 = rng.gen();
        self.sample_from_uniforms(u1, u2)
    }
}

/// Position sampler for the Gibbs density `exp(-f)` of a one- or
/// two-dimensional potential.
pub enum PositionSampler {
    One(InverseTransform1d),
    Two(InverseTransform2d),
}

impl PositionSampler {
    pub fn new(pot: &Potential) -> Result<Self> {
        match pot.dim() {
            1 => Ok(Self::One(InverseTransform1d::new(pot)?)),
            2 => Ok(Self::Two(InverseTransform2d::new(pot)?)),
            d => Err(Error::InvalidArgument(format!(
                "equilibrium sampling supports dimensions 1-2, got {d}"
            ))),
        }
    }

    /// Draw one position. Consumes `dim` uniform variates from `rng`.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> DVector<f64> {
        match self {
            Self::One(s) => DVector::from_vec(vec![s.sample(rng)]),
            Self::Two(s) => {
                let (x, y) = s.sample(rng);
                DVector::from_vec(vec![x, y])
            }
        }
    }
}

/// Draw `n` independent phase-space points from the kinetic equilibrium:
/// positions with density proportional to `exp(-f)`, velocities standard
/// normal. Per particle, the position uniforms are consumed before the
/// velocity normals.
pub fn equilibrium_sample(pot: &Potential, n: usize, stream: &RngStream) -> Result<PhaseEnsemble> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "equilibrium sample needs at least one particle".into(),
        ));
    }
    let sampler = PositionSampler::new(pot)?;
    let dim = pot.dim();
    let mut rng = stream.rng();
    let mut positions = DMatrix::zeros(dim, n);
    let mut velocities = DMatrix::zeros(dim, n);
    for i in 0..n {
        let x = sampler.sample(&mut rng);
        positions.set_column(i, &x);
        for r in 0..dim {
            velocities[(r, i)] = rng.sample(rand_distr::StandardNormal);
        }
    }
    PhaseEnsemble::new(positions, velocities)
}

/// Average of `f` under the Gibbs density `exp(-f)`, by Simpson quadrature
/// over `[-W, W]^d`.
pub fn gibbs_average(pot: &Potential) -> Result<f64> {
    let w = DOMAIN_HALF_WIDTH;
    match pot.dim() {
        1 => {
            let nodes = linspace(-w, w, GRID_1D);
            let f = eval_grid_1d(pot, &nodes)?;
            let f_min = f.iter().cloned().fold(f64::INFINITY, f64::min);
            let h = nodes[1] - nodes[0];
            let den: Vec<f64> = f.iter().map(|v| (-(v - f_min)).exp()).collect();
            let num: Vec<f64> = f.iter().zip(&den).map(|(v, d)| v * d).collect();
            Ok(simpson(&num, h) / simpson(&den, h))
        }
        2 => {
            let n = GRID_2D;
            let nodes = linspace(-w, w, n);
            let h = nodes[1] - nodes[0];
            let mut arg = DVector::zeros(2);
            let mut f_grid = vec![0.0f64; n * n];
            let mut f_min = f64::INFINITY;
            for i in 0..n {
                arg[0] = nodes[i];
                for j in 0..n {
                    arg[1] = nodes[j];
                    let f = pot.eval(&arg)?;
                    f_grid[i * n + j] = f;
                    f_min = f_min.min(f);
                }
            }
            let mut num_rows = vec![0.0f64; n];
            let mut den_rows = vec![0.0f64; n];
            let mut num_col = vec![0.0f64; n];
            let mut den_col = vec![0.0f64; n];
            for i in 0..n {
                for j in 0..n {
                    let f = f_grid[i * n + j];
                    let d = (-(f - f_min)).exp();
                    den_col[j] = d;
                    num_col[j] = f * d;
                }
                num_rows[i] = simpson(&num_col, h);
                den_rows[i] = simpson(&den_col, h);
            }
            Ok(simpson(&num_rows, h) / simpson(&den_rows, h))
        }
        d => Err(Error::InvalidArgument(format!(
            "Gibbs average supports dimensions 1-2, got {d}"
        ))),
    }
}

/// Average of `f` over the box `[-half_width, half_width]^d`, by Simpson
/// quadrature.
pub fn box_average(pot: &Potential, half_width: f64) -> Result<f64> {
    if !(half_width > 0.0) || !half_width.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "box half width must be positive, got {half_width}"
        )));
    }
    match pot.dim() {
        1 => {
            let n = 4097;
            let nodes = linspace(-half_width, half_width, n);
            let f = eval_grid_1d(pot, &nodes)?;
            let h = nodes[1] - nodes[0];
            Ok(simpson(&f, h) / (2.0 * half_width))
        }
        2 => {
            let n = 513;
            let nodes = linspace(-half_width, half_width, n);
            let h = nodes[1] - nodes[0];
            let mut arg = DVector::zeros(2);
            let mut rows = vec![0.0f64; n];
            let mut col = vec![0.0f64; n];
            for i in 0..n {
                arg[0] = nodes[i];
                for j in 0..n {
                    arg[1] = nodes[j];
                    col[j] = pot.eval(&arg)?;
                }
                rows[i] = simpson(&col, h);
            }
            Ok(simpson(&rows, h) / (2.0 * half_width).powi(2))
        }
        d => Err(Error::InvalidArgument(format!(
            "box average supports dimensions 1-2, got {d}"
        ))),
    }
}

/// Velocity variance for a box-uniform initial condition that matches the
/// expected total energy of the kinetic equilibrium:
///
/// ```text
/// sigma^2 = 1 + (2/d) (<f>_Gibbs - <f>_box)
/// ```
///
/// If the box average of the potential exceeds the Gibbs average by more
/// than `d/2`, no nonnegative variance can match the energy and the
/// configuration is rejected.
pub fn initial_sigma2(pot: &Potential, half_width: f64) -> Result<f64> {
    let d = pot.dim() as f64;
    let gibbs = gibbs_average(pot)?;
    let boxavg = box_average(pot, half_width)?;
    let sigma2 = 1.0 + (2.0 / d) * (gibbs - boxavg);
    if sigma2 <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "energy condition violated for potential '{}' on the box of half width \
             {half_width}: matching the equilibrium energy would need velocity variance \
             {sigma2:.6} <= 0; the box potential average {boxavg:.6} exceeds the Gibbs \
             average {gibbs:.6} by more than {}",
            pot.name(),
            d / 2.0
        )));
    }
    Ok(sigma2)
}
