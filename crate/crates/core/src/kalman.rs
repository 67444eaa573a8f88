//! Interacting-ensemble methods for Bayesian inversion: a preconditioned
//! inversion flow on the unit time horizon and a Langevin-type sampler
//! with a semi-implicit prior relaxation.
//!
//! Both methods evolve `N` particles whose empirical covariances
//! precondition every update, so no derivatives of the forward map are
//! ever taken.
//!
//! **Inversion flow** (one unit of algorithmic time, `M h = 1`):
//!
//! ```text
//! x_i' = x_i + h Cov_xG Gamma^{-1} (y - G(x_i))
//!            + sqrt(h) Cov_xG Gamma^{-1/2} xi_i,   xi_i ~ N(0, I_{d'})
//! ```
//!
//! In the linear-Gaussian large-ensemble limit the marginal at time
//! `t = k h` is the tempered posterior with exponent `t` (see
//! [`crate::oracles::GaussianPath`]).
//!
//! **Sampler.** Each step drifts toward the data and relaxes toward the
//! prior with a semi-implicit solve, then adds preconditioned noise:
//!
//! ```text
//! b_i  = x_i - h Cov_xG Gamma^{-1} (G(x_i) - y) + h Cov_xx C0^{-1} x0
//! x*_i : (I + h Cov_xx C0^{-1}) x*_i = b_i
//! x_i' = x*_i + sqrt(2 h Cov_xx) xi_i,            xi_i ~ N(0, I_d)
//! ```
//!
//! The solve is performed in the algebraically identical symmetric form
//! `x* = C0 (C0 + h Cov_xx)^{-1} b`, one Cholesky factorization per step
//! shared by all particles. Its invariant measure (linear case, mean-field
//! limit) is the Bayesian posterior, so trajectories can run to any
//! horizon.
//!
//! Updates live in the affine span of the current ensemble (all applied
//! matrices have ranges inside the span of centered particles), which the
//! subspace tests pin down.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::{ensemble_stats_with, forward_values, psd_sqrt, Ensemble, EnsembleStats, SpdFactor};
use crate::model::BayesProblem;
use crate::rng::{gaussian_draw_with, RngStream, StreamPurpose};

/// Magnitude bound beyond which a particle ensemble counts as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Which ensemble method to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KalmanMethod {
    /// Ensemble Kalman inversion: the flow on the unit horizon
    /// (`n_steps * step_size = 1`).
    Eki,
    /// Ensemble Kalman sampler: stationary, any horizon.
    Eks,
}

/// Configuration of an ensemble run.
#[derive(Clone, Debug)]
pub struct KalmanConfig {
    pub method: KalmanMethod,
    pub n_particles: usize,
    pub step_size: f64,
    pub n_steps: usize,
    /// Keep a full ensemble snapshot every this many steps (the initial
    /// and final ensembles are always kept).
    pub record_every: usize,
}

impl KalmanConfig {
    pub fn new(method: KalmanMethod, n_particles: usize, step_size: f64, n_steps: usize) -> Self {
        Self { method, n_particles, step_size, n_steps, record_every: usize::MAX }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("at least one particle required".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("at least one step required".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be positive".into()));
        }
        if self.method == KalmanMethod::Eki {
            let horizon = self.n_steps as f64 * self.step_size;
            if (horizon - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "the inversion flow runs on the unit horizon: n_steps * step_size \
                     must equal 1 to within 1e-12, got {horizon}"
                )));
            }
        }
        Ok(())
    }
}

/// Draw the initial ensemble from the prior: `x_i = x0 + C0^{1/2} z_i`,
/// one indexed noise stream per particle.
pub fn initial_ensemble(problem: &BayesProblem, n: usize, seed: u64) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one particle".into()));
    }
    let d = problem.dim();
    let mut positions = DMatrix::zeros(d, n);
    for i in 0..n {
        let stream = RngStream::indexed(seed, StreamPurpose::Init, i as u64);
        let z = gaussian_draw_with(&mut stream.rng(), d, 1);
        let x = problem.prior.mean() + problem.prior.sqrt() * z.column(0);
        positions.set_column(i, &x);
    }
    Ensemble::new(positions)
}

/// Per-step coefficients of the inversion flow derived from ensemble
/// statistics: the drift gain `K = Cov_xG Gamma^{-1}` and the noise gain
/// `B = Cov_xG Gamma^{-1/2}` (both `d x d'`).
#[derive(Clone, Debug)]
pub struct InversionCoefficients {
    pub drift_gain: DMatrix<f64>,
    pub noise_gain: DMatrix<f64>,
}

/// Build the inversion-flow coefficients from ensemble statistics.
pub fn inversion_coefficients(
    stats: &EnsembleStats,
    problem: &BayesProblem,
) -> Result<InversionCoefficients> {
    check_affine_consistency(stats, problem);
    // K = Cov_xG Gamma^{-1}: solve Gamma K^T = Cov_xG^T.
    let drift_gain = problem
        .noise
        .precision_apply_mat(&stats.cov_xg.transpose())
        .transpose();
    let noise_gain = &stats.cov_xg * problem.noise.inv_sqrt();
    Ok(InversionCoefficients { drift_gain, noise_gain })
}

/// One particle's inversion-flow update from its forward value, the step
/// coefficients, and a standard-normal draw `xi` of the observation
/// dimension.
pub fn inversion_update(
    x: &DVector<f64>,
    g: &DVector<f64>,
    coeffs: &InversionCoefficients,
    problem: &BayesProblem,
    h: f64,
    xi: &DVector<f64>,
) -> DVector<f64> {
    let misfit = &problem.data - g;
    x + h * (&coeffs.drift_gain * misfit) + h.sqrt() * (&coeffs.noise_gain * xi)
}

/// Per-step state of the sampler: the factored semi-implicit system, the
/// data drift gain, the constant prior-relaxation shift, and the noise
/// square root `sqrt(2 h Cov_xx)`.
pub struct SamplerStep {
    /// Cholesky factor of `C0 + h Cov_xx`.
    solver: SpdFactor,
    /// `Cov_xG Gamma^{-1}` (`d x d'`).
    pub drift_gain: DMatrix<f64>,
    /// `h Cov_xx C0^{-1} x0` (`d`-vector).
    pub prior_shift: DVector<f64>,
    /// `sqrt(2 h Cov_xx)` (`d x d`).
    pub noise_sqrt: DMatrix<f64>,
}

/// Build the sampler's per-step operators from ensemble statistics.
pub fn sampler_step(stats: &EnsembleStats, problem: &BayesProblem, h: f64) -> Result<SamplerStep> {
    check_affine_consistency(stats, problem);
    let drift_gain = problem
        .noise
        .precision_apply_mat(&stats.cov_xg.transpose())
        .transpose();
    let prior_shift = h * (&stats.cov_xx * problem.prior.precision_apply(problem.prior.mean()));
    let system = problem.prior.covariance() + h * &stats.cov_xx;
    let solver = SpdFactor::new(&system, "sampler semi-implicit system")?;
    let noise_sqrt = psd_sqrt(&(2.0 * h * &stats.cov_xx))?;
    Ok(SamplerStep { solver, drift_gain, prior_shift, noise_sqrt })
}

impl SamplerStep {
    /// One particle's sampler update from its forward value and a
    /// standard-normal draw `xi` of the state dimension.
    pub fn update(
        &self,
        x: &DVector<f64>,
        g: &DVector<f64>,
        problem: &BayesProblem,
        h: f64,
        xi: &DVector<f64>,
    ) -> DVector<f64> {
        let residual = g - &problem.data;
        let b = x - h * (&self.drift_gain * residual) + &self.prior_shift;
        // (I + h Cov C0^{-1}) x* = b  <=>  x* = C0 (C0 + h Cov)^{-1} b.
        let x_star = problem.prior.covariance() * self.solver.solve(&b);
        x_star + &self.noise_sqrt * xi
    }
}

/// In the linear case `Cov_xG = Cov_xx A^T` must hold to rounding; catch
/// statistics bugs early in debug builds.
fn check_affine_consistency(stats: &EnsembleStats, problem: &BayesProblem) {
    #[cfg(debug_assertions)]
    if let Some(a) = problem.forward.linear_part() {
        let expected = &stats.cov_xx * a.transpose();
        let scale = 1.0 + expected.norm() + stats.cov_xg.norm();
        debug_assert!(
            (&stats.cov_xg - expected).norm() <= 1e-12 * scale,
            "cross covariance inconsistent with the linear forward map"
        );
    }
    #[cfg(not(debug_assertions))]
    let _ = (stats, problem);
}

/// Mean and covariance-trace record of one step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub mean: DVector<f64>,
    pub cov_trace: f64,
}

/// Result of an ensemble run.
pub struct KalmanRun {
    /// One record per step, including the initial state (`n_steps + 1`).
    pub records: Vec<StepRecord>,
    /// Full ensembles kept every `record_every` steps; the initial and
    /// final ensembles are always present.
    pub snapshots: Vec<(usize, Ensemble)>,
    pub final_ensemble: Ensemble,
}

/// Run an ensemble method on a Bayesian problem. The run is a pure
/// function of `(problem, config, seed)`: the initial draw uses indexed
/// per-particle streams and each particle consumes its own noise stream
/// step by step.
pub fn run_kalman(problem: &BayesProblem, config: &KalmanConfig, seed: u64) -> Result<KalmanRun> {
    config.validate()?;
    let ensemble = initial_ensemble(problem, config.n_particles, seed)?;
    run_kalman_from(problem, config, seed, ensemble)
}

/// As [`run_kalman`] but starting from an explicit ensemble (the seed
/// still controls the per-step noise).
pub fn run_kalman_from(
    problem: &BayesProblem,
    config: &KalmanConfig,
    seed: u64,
    ensemble: Ensemble,
) -> Result<KalmanRun> {
    config.validate()?;
    if ensemble.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            context: "initial ensemble vs problem dimension",
            expected: problem.dim(),
            found: ensemble.dim(),
        });
    }
    if ensemble.len() != config.n_particles {
        return Err(Error::DimensionMismatch {
            context: "initial ensemble vs configured particle count",
            expected: config.n_particles,
            found: ensemble.len(),
        });
    }
    let mut ensemble = ensemble;
    let n = config.n_particles;
    let h = config.step_size;
    let noise_dim = match config.method {
        KalmanMethod::Eki => problem.dim_obs(),
        KalmanMethod::Eks => problem.dim(),
    };
    let mut noise_rngs: Vec<ChaCha12Rng> = (0..n)
        .map(|i| RngStream::indexed(seed, StreamPurpose::ParticleNoise, i as u64).rng())
        .collect();

    let mut records = Vec::with_capacity(config.n_steps + 1);
    let mut snapshots = Vec::new();

    let record = |ens: &Ensemble, step: usize| -> StepRecord {
        let x = ens.positions();
        let mean = x.column_sum() / n as f64;
        let mut trace = 0.0;
        for r in 0..ens.dim() {
            let row_mean = mean[r];
            let mut s = 0.0;
            for j in 0..n {
                let d = x[(r, j)] - row_mean;
                s += d * d;
            }
            trace += s / n as f64;
        }
        StepRecord { step, time: step as f64 * h, mean, cov_trace: trace }
    };

    check_divergence(&ensemble, 0)?;
    records.push(record(&ensemble, 0));
    snapshots.push((0, ensemble.clone()));

    for step in 1..=config.n_steps {
        let g = forward_values(&ensemble, &problem.forward)?;
        let stats = ensemble_stats_with(&ensemble, &g);
        let mut next = DMatrix::zeros(ensemble.dim(), n);
        match config.method {
            KalmanMethod::Eki => {
                let coeffs = inversion_coefficients(&stats, problem)?;
                for i in 0..n {
                    let xi = gaussian_draw_with(&mut noise_rngs[i], noise_dim, 1);
                    let x = inversion_update(
                        &ensemble.particle(i),
                        &g.column(i).into_owned(),
                        &coeffs,
                        problem,
                        h,
                        &xi.column(0).into_owned(),
                    );
                    next.set_column(i, &x);
                }
            }
            KalmanMethod::Eks => {
                let prep = sampler_step(&stats, problem, h)?;
                for i in 0..n {
                    let xi = gaussian_draw_with(&mut noise_rngs[i], noise_dim, 1);
                    let x = prep.update(
                        &ensemble.particle(i),
                        &g.column(i).into_owned(),
                        problem,
                        h,
                        &xi.column(0).into_owned(),
                    );
                    next.set_column(i, &x);
                }
            }
        }
        ensemble = Ensemble::new(next)?;
        check_divergence(&ensemble, step)?;
        records.push(record(&ensemble, step));
        if step % config.record_every == 0 && step != config.n_steps {
            snapshots.push((step, ensemble.clone()));
        }
    }
    snapshots.push((config.n_steps, ensemble.clone()));
    Ok(KalmanRun { records, snapshots, final_ensemble: ensemble })
}

fn check_divergence(ensemble: &Ensemble, step: usize) -> Result<()> {
    if !ensemble.within_bounds(DIVERGENCE_BOUND) {
        return Err(Error::Diverged {
            step,
            detail: format!(
                "a particle left the bound {DIVERGENCE_BOUND:e} or became non-finite"
            ),
        });
    }
    Ok(())
}
