//! Experiment orchestration: particle-count convergence studies for the
//! ensemble methods, the shared-noise coupling study against the
//! closed-form mean-field flow, and divergence/energy figure runs for the
//! two collision engines.
//!
//! Every experiment is a pure function of `(problem/config, seed)`.
//! Work fans out over `(particle count, replication)` cells with an
//! order-preserving parallel map, and each cell derives its own seed as
//! `seed + replication index`, so results are bitwise independent of the
//! thread count. Cells at the same replication index share random
//! streams across particle counts (common random numbers), which
//! stabilizes fitted slopes and monotonicity checks.
//!
//! Bundle writers turn reports into a directory of CSV tables and SVG
//! plots next to a manifest; the CSV bytes are reproducible from
//! `(config, seed)` alone.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::boltzmann::{
    run_boltzmann, BirdScheduler, BoltzmannConfig, BoltzmannInit, CollisionMethod,
    PartnerSelection,
};
use crate::error::{Error, Result};
use crate::kalman::{
    initial_ensemble, inversion_update, run_kalman, InversionCoefficients, KalmanConfig,
    KalmanMethod,
};
use crate::linalg::{psd_sqrt, Ensemble};
use crate::metrics::{
    fit_rate, mollified_kl_phase, mollified_kl_positions, spearman, wasserstein2, RateFit,
    ASSIGNMENT_CAP,
};
use crate::model::{potential_by_name, BayesProblem};
use crate::oracles::{equilibrium_sample, gaussian_posterior, initial_sigma2, GaussianPath};
use crate::output::{LinePlot, Manifest, Series, Table};
use crate::rng::{gaussian_draw, gaussian_draw_with, RngStream, StreamPurpose};

// ---------------------------------------------------------------------------
// Particle-count convergence study
// ---------------------------------------------------------------------------

/// Configuration of a weak-convergence rate study.
#[derive(Clone, Debug)]
pub struct RateStudyConfig {
    pub method: KalmanMethod,
    /// Ensemble sizes, strictly increasing, at least two entries.
    pub n_list: Vec<usize>,
    pub step_size: f64,
    /// Time horizon. The inversion flow requires `1.0`; the sampler
    /// accepts any positive multiple of the step size.
    pub t_final: f64,
    /// Independent replications per ensemble size.
    pub n_seeds: usize,
}

impl RateStudyConfig {
    pub fn new(method: KalmanMethod, n_list: Vec<usize>, step_size: f64, t_final: f64) -> Self {
        Self { method, n_list, step_size, t_final, n_seeds: 200 }
    }

    fn n_steps(&self) -> Result<usize> {
        if !(self.step_size > 0.0) || !(self.t_final > 0.0) {
            return Err(Error::InvalidConfig(
                "step size and horizon must be positive".into(),
            ));
        }
        let steps = (self.t_final / self.step_size).round();
        if (steps * self.step_size - self.t_final).abs() > 1e-9 * self.t_final.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} is not an integer multiple of step size {}",
                self.t_final, self.step_size
            )));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.len() < 2 {
            return Err(Error::InvalidConfig(
                "a rate study needs at least two ensemble sizes".into(),
            ));
        }
        if !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "ensemble sizes must be strictly increasing".into(),
            ));
        }
        if self.n_list[0] < 2 {
            return Err(Error::InvalidConfig(
                "rate-study ensembles need at least two particles".into(),
            ));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidConfig("at least one replication required".into()));
        }
        if self.method == KalmanMethod::Eki && (self.t_final - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(
                "the inversion flow runs on the unit horizon; set t_final = 1".into(),
            ));
        }
        self.n_steps().map(|_| ())
    }
}

/// Aggregate outcome at one ensemble size.
#[derive(Clone, Debug)]
pub struct RateCell {
    pub n_particles: usize,
    /// RMS over replications of the weak error of `g(x) = x_0`.
    pub weak_first_rms: f64,
    /// RMS over replications of the weak error of `g(x) = x_0^2`.
    pub weak_second_rms: f64,
    /// Mean over replications of `W_2(ensemble, equal-size reference
    /// draws)`; absent when the exact assignment would exceed its size cap.
    pub w2_mean: Option<f64>,
}

/// Two-window drift diagnostic over the tail of the sampler trajectory.
#[derive(Clone, Copy, Debug)]
pub struct StationarityCheck {
    /// Mean over replications of (second-half window mean minus
    /// first-half window mean) of the ensemble mean's first coordinate,
    /// windows taken from the last 20% of steps.
    pub drift: f64,
    /// Standard error of that mean across replications.
    pub standard_error: f64,
    /// `|drift| <= 3 * standard_error`.
    pub stationary: bool,
}

/// Result of a rate study.
#[derive(Clone, Debug)]
pub struct RateReport {
    pub method: KalmanMethod,
    pub cells: Vec<RateCell>,
    /// Log-log fit of the first-moment weak error against ensemble size.
    pub fit_first: RateFit,
    /// Log-log fit of the second-moment weak error.
    pub fit_second: RateFit,
    /// Log-log fit of the transport distance, when available at all sizes.
    pub fit_w2: Option<RateFit>,
    /// Sampler-only tail diagnostic at the largest ensemble size
    /// (requires at least two replications).
    pub stationarity: Option<StationarityCheck>,
}

struct RateCellOutcome {
    weak_first: f64,
    weak_second: f64,
    w2: Option<f64>,
    drift: Option<f64>,
}

/// Run a weak-convergence study: for every `(ensemble size, replication)`
/// cell, run the method to its horizon and measure the weak error of
/// `g(x) = x_0` and `g(x) = x_0^2` against the closed-form posterior,
/// plus the transport distance to fresh reference draws; aggregate by
/// root mean square over replications and fit log-log rates.
///
/// Requires a linear forward map (the reference law must be available in
/// closed form).
pub fn experiment_kalman_rate(
    problem: &BayesProblem,
    cfg: &RateStudyConfig,
    seed: u64,
) -> Result<RateReport> {
    cfg.validate()?;
    let n_steps = cfg.n_steps()?;
    let target = gaussian_posterior(problem)?;
    let target_sqrt = psd_sqrt(&target.covariance)?;
    let ref_mean = target.mean[0];
    let ref_second = target.covariance[(0, 0)] + ref_mean * ref_mean;
    let d = problem.dim();
    let max_n = *cfg.n_list.last().expect("validated non-empty");
    let want_stationarity = cfg.method == KalmanMethod::Eks && cfg.n_seeds >= 2;

    let cells: Vec<(usize, u64)> = cfg
        .n_list
        .iter()
        .flat_map(|&n| (0..cfg.n_seeds as u64).map(move |s| (n, s)))
        .collect();
    let outcomes: Vec<Result<RateCellOutcomeKeyed>> = cells
        .par_iter()
        .map(|&(n, rep)| {
            let cell_seed = seed.wrapping_add(rep);
            let run_cfg = KalmanConfig::new(cfg.method, n, cfg.step_size, n_steps);
            let run = run_kalman(problem, &run_cfg, cell_seed)?;
            let x = run.final_ensemble.positions();
            let inv_n = 1.0 / n as f64;
            let mean1 = x.row(0).sum() * inv_n;
            let mean2 = x.row(0).iter().map(|v| v * v).sum::<f64>() * inv_n;

            let w2 = if d == 1 || n <= ASSIGNMENT_CAP {
                let z = gaussian_draw(&RngStream::indexed(cell_seed, StreamPurpose::Oracle, 0), n, d)?;
                let mut reference = &target_sqrt * z;
                for mut col in reference.column_iter_mut() {
                    col += &target.mean;
                }
                Some(wasserstein2(x, &reference)?)
            } else {
                None
            };

            let drift = if want_stationarity && n == max_n {
                Some(tail_window_drift(&run.records))
            } else {
                None
            };

            Ok(RateCellOutcomeKeyed {
                n,
                outcome: RateCellOutcome {
                    weak_first: mean1 - ref_mean,
                    weak_second: mean2 - ref_second,
                    w2,
                    drift,
                },
            })
        })
        .collect();

    let mut by_n: Vec<(usize, Vec<RateCellOutcome>)> =
        cfg.n_list.iter().map(|&n| (n, Vec::new())).collect();
    let mut drifts = Vec::new();
    for keyed in outcomes {
        let keyed = keyed?;
        if let Some(d) = keyed.outcome.drift {
            drifts.push(d);
        }
        by_n
            .iter_mut()
            .find(|(n, _)| *n == keyed.n)
            .expect("cell size from the configured list")
            .1
            .push(keyed.outcome);
    }

    let mut report_cells = Vec::with_capacity(by_n.len());
    for (n, outs) in &by_n {
        let m = outs.len() as f64;
        let rms = |f: &dyn Fn(&RateCellOutcome) -> f64| {
            (outs.iter().map(|o| f(o).powi(2)).sum::<f64>() / m).sqrt()
        };
        let w2_mean = if outs.iter().all(|o| o.w2.is_some()) {
            Some(outs.iter().map(|o| o.w2.unwrap()).sum::<f64>() / m)
        } else {
            None
        };
        report_cells.push(RateCell {
            n_particles: *n,
            weak_first_rms: rms(&|o| o.weak_first),
            weak_second_rms: rms(&|o| o.weak_second),
            w2_mean,
        });
    }

    let sizes: Vec<f64> = report_cells.iter().map(|c| c.n_particles as f64).collect();
    let first: Vec<f64> = report_cells.iter().map(|c| c.weak_first_rms).collect();
    let second: Vec<f64> = report_cells.iter().map(|c| c.weak_second_rms).collect();
    let fit_first = fit_rate(&sizes, &first)?;
    let fit_second = fit_rate(&sizes, &second)?;
    let fit_w2 = if report_cells.iter().all(|c| c.w2_mean.is_some()) {
        let w2s: Vec<f64> = report_cells.iter().map(|c| c.w2_mean.unwrap()).collect();
        Some(fit_rate(&sizes, &w2s)?)
    } else {
        None
    };

    let stationarity = if want_stationarity {
        let m = drifts.len() as f64;
        let mean = drifts.iter().sum::<f64>() / m;
        let var = drifts.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        let standard_error = (var / m).sqrt();
        Some(StationarityCheck {
            drift: mean,
            standard_error,
            stationary: mean.abs() <= 3.0 * standard_error,
        })
    } else {
        None
    };

    Ok(RateReport { method: cfg.method, cells: report_cells, fit_first, fit_second, fit_w2, stationarity })
}

struct RateCellOutcomeKeyed {
    n: usize,
    outcome: RateCellOutcome,
}

/// Difference of the two half-window means of the ensemble mean's first
/// coordinate over the last 20% of steps.
fn tail_window_drift(records: &[crate::kalman::StepRecord]) -> f64 {
    let m = records.len();
    let start = ((m as f64) * 0.8).floor() as usize;
    let window = &records[start.min(m - 2)..];
    let half = window.len() / 2;
    let avg = |slice: &[crate::kalman::StepRecord]| {
        slice.iter().map(|r| r.mean[0]).sum::<f64>() / slice.len() as f64
    };
    avg(&window[half..]) - avg(&window[..half])
}

/// Write the rate-study bundle: `rate.csv` with one row per ensemble
/// size, a log-log plot with the fitted power law, and fit/stationarity
/// notes on the manifest.
pub fn write_rate_bundle(report: &RateReport, out_dir: &Path, manifest: &mut Manifest) -> Result<()> {
    let mut table = Table::new(["n", "weak_first_rms", "weak_second_rms", "w2_mean"]);
    for c in &report.cells {
        table.row([
            c.n_particles.into(),
            c.weak_first_rms.into(),
            c.weak_second_rms.into(),
            match c.w2_mean {
                Some(v) => v.into(),
                None => "".into(),
            },
        ]);
    }
    table.write(&out_dir.join("rate.csv"))?;

    let sizes: Vec<f64> = report.cells.iter().map(|c| c.n_particles as f64).collect();
    let mut plot = LinePlot {
        title: format!("weak error vs ensemble size ({:?})", report.method),
        x_label: "ensemble size n".into(),
        y_label: "error".into(),
        log_x: true,
        log_y: true,
        ..Default::default()
    };
    plot.series.push(Series::new(
        "g(x)=x, RMS",
        sizes.clone(),
        report.cells.iter().map(|c| c.weak_first_rms).collect(),
    ));
    plot.series.push(Series::new(
        "g(x)=x^2, RMS",
        sizes.clone(),
        report.cells.iter().map(|c| c.weak_second_rms).collect(),
    ));
    if report.cells.iter().all(|c| c.w2_mean.is_some()) {
        plot.series.push(Series::new(
            "W2 to reference draws",
            sizes.clone(),
            report.cells.iter().map(|c| c.w2_mean.unwrap()).collect(),
        ));
    }
    let f = &report.fit_first;
    let fit_xs = vec![sizes[0], *sizes.last().unwrap()];
    let fit_ys: Vec<f64> = fit_xs.iter().map(|&n| f.intercept.exp() * n.powf(f.slope)).collect();
    plot.series.push(Series::dashed(format!("fit: slope {:.3}", f.slope), fit_xs, fit_ys));
    plot.write(&out_dir.join("rate.svg"))?;

    manifest.note("fit_first_slope", report.fit_first.slope);
    manifest.note("fit_first_r_squared", report.fit_first.r_squared);
    manifest.note("fit_second_slope", report.fit_second.slope);
    if let Some(fit) = &report.fit_w2 {
        manifest.note("fit_w2_slope", fit.slope);
    }
    if let Some(s) = &report.stationarity {
        manifest.note("stationarity_drift", s.drift);
        manifest.note("stationarity_standard_error", s.standard_error);
        manifest.note("stationary", s.stationary);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared-noise coupling study
// ---------------------------------------------------------------------------

/// Configuration of the coupling study. The method is the inversion flow
/// by construction (the mean-field coefficients come from the tempered
/// Gaussian path on the unit horizon).
#[derive(Clone, Debug)]
pub struct CouplingConfig {
    /// Ensemble sizes, strictly increasing. A size of 1 is allowed and
    /// reported, but flagged degenerate and excluded from the fit (a
    /// single particle has zero empirical covariance and stays frozen).
    pub n_list: Vec<usize>,
    pub step_size: f64,
    pub n_seeds: usize,
}

impl CouplingConfig {
    pub fn new(n_list: Vec<usize>, step_size: f64) -> Self {
        Self { n_list, step_size, n_seeds: 100 }
    }

    fn n_steps(&self) -> Result<usize> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("step size must be positive".into()));
        }
        let steps = (1.0 / self.step_size).round();
        if (steps * self.step_size - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(
                "coupling runs on the unit horizon: 1/step_size must be an integer".into(),
            ));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::InvalidConfig("empty ensemble-size list".into()));
        }
        if !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "ensemble sizes must be strictly increasing".into(),
            ));
        }
        if self.n_list.iter().filter(|&&n| n > 1).count() < 2 {
            return Err(Error::InvalidConfig(
                "the coupling fit needs at least two non-degenerate ensemble sizes".into(),
            ));
        }
        if self.n_seeds == 0 {
            return Err(Error::InvalidConfig("at least one replication required".into()));
        }
        self.n_steps().map(|_| ())
    }
}

/// Aggregate coupling error at one ensemble size.
#[derive(Clone, Debug)]
pub struct CouplingCell {
    pub n_particles: usize,
    /// Mean over replications of `(1/n) sum_i |x~_i - x_i|^2` at the
    /// final time.
    pub mean_square_error: f64,
    /// Sample standard deviation over replications.
    pub seed_std: f64,
    /// Single-particle cell: frozen self-driven system, excluded from the
    /// fit.
    pub degenerate: bool,
}

/// Result of the coupling study.
#[derive(Clone, Debug)]
pub struct CouplingReport {
    pub cells: Vec<CouplingCell>,
    /// Log-log fit over the non-degenerate cells.
    pub fit: RateFit,
    /// Rank correlation of mean-square error with ensemble size over the
    /// non-degenerate cells (−1 is perfectly decreasing).
    pub spearman: f64,
}

/// Evolve particles driven by the closed-form mean-field coefficients:
/// the same update rule as the inversion flow, but with the empirical
/// covariances replaced by the tempered Gaussian path's `C(t)` (so
/// `Cov_xG = C(t) A^T`), evaluated at the left endpoint of each step.
///
/// The initial draw and the per-particle noise use exactly the stream
/// layout of [`run_kalman`], so a run of this flow and a run of the
/// ensemble method under the same seed consume identical randomness —
/// that is the coupling construction.
pub fn mean_field_ensemble(
    problem: &BayesProblem,
    n: usize,
    step_size: f64,
    n_steps: usize,
    seed: u64,
) -> Result<Ensemble> {
    let path = GaussianPath::new(problem)?;
    let a = problem
        .forward
        .linear_part()
        .expect("the Gaussian path already required a linear map")
        .clone();
    let dim_obs = problem.dim_obs();
    let mut ensemble = initial_ensemble(problem, n, seed)?;
    let mut rngs: Vec<_> = (0..n)
        .map(|i| RngStream::indexed(seed, StreamPurpose::ParticleNoise, i as u64).rng())
        .collect();
    for step in 0..n_steps {
        let t = step as f64 * step_size;
        let c_t = path.at(t.min(1.0))?.covariance;
        let cov_xg = &c_t * a.transpose();
        let coeffs = InversionCoefficients {
            drift_gain: problem.noise.precision_apply_mat(&cov_xg.transpose()).transpose(),
            noise_gain: &cov_xg * problem.noise.inv_sqrt(),
        };
        let mut next = DMatrix::zeros(ensemble.dim(), n);
        for i in 0..n {
            let x = ensemble.particle(i);
            let g = &a * &x;
            let xi = gaussian_draw_with(&mut rngs[i], dim_obs, 1);
            let updated =
                inversion_update(&x, &g, &coeffs, problem, step_size, &xi.column(0).into_owned());
            next.set_column(i, &updated);
        }
        ensemble = Ensemble::new(next)?;
    }
    Ok(ensemble)
}

/// Run the coupling study: for each `(size, replication)` cell, evolve
/// the self-driven ensemble method and the mean-field-driven flow under
/// identical initial draws and identical per-particle noise, and report
/// the mean-square terminal difference per size with a log-log fit and a
/// rank-correlation trend.
///
/// Requires a linear forward map.
pub fn experiment_coupling(
    problem: &BayesProblem,
    cfg: &CouplingConfig,
    seed: u64,
) -> Result<CouplingReport> {
    cfg.validate()?;
    GaussianPath::new(problem)?; // reject nonlinear maps up front
    let n_steps = cfg.n_steps()?;

    let cells: Vec<(usize, u64)> = cfg
        .n_list
        .iter()
        .flat_map(|&n| (0..cfg.n_seeds as u64).map(move |s| (n, s)))
        .collect();
    let errors: Vec<Result<(usize, f64)>> = cells
        .par_iter()
        .map(|&(n, rep)| {
            let cell_seed = seed.wrapping_add(rep);
            let run_cfg = KalmanConfig::new(KalmanMethod::Eki, n, cfg.step_size, n_steps);
            let self_driven = run_kalman(problem, &run_cfg, cell_seed)?.final_ensemble;
            let mean_field =
                mean_field_ensemble(problem, n, cfg.step_size, n_steps, cell_seed)?;
            let diff = mean_field.positions() - self_driven.positions();
            Ok((n, diff.iter().map(|v| v * v).sum::<f64>() / n as f64))
        })
        .collect();

    let mut by_n: Vec<(usize, Vec<f64>)> = cfg.n_list.iter().map(|&n| (n, Vec::new())).collect();
    for e in errors {
        let (n, v) = e?;
        by_n.iter_mut().find(|(m, _)| *m == n).expect("configured size").1.push(v);
    }

    let mut cells_out = Vec::with_capacity(by_n.len());
    for (n, vals) in &by_n {
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let seed_std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        cells_out.push(CouplingCell {
            n_particles: *n,
            mean_square_error: mean,
            seed_std,
            degenerate: *n == 1,
        });
    }

    let active: Vec<&CouplingCell> = cells_out.iter().filter(|c| !c.degenerate).collect();
    let sizes: Vec<f64> = active.iter().map(|c| c.n_particles as f64).collect();
    let mses: Vec<f64> = active.iter().map(|c| c.mean_square_error).collect();
    let fit = fit_rate(&sizes, &mses)?;
    let rank = spearman(&sizes, &mses)?;

    Ok(CouplingReport { cells: cells_out, fit, spearman: rank })
}

/// Write the coupling bundle: `coupling.csv`, a log-log plot with the
/// fitted power law, and slope/rank notes on the manifest.
pub fn write_coupling_bundle(
    report: &CouplingReport,
    out_dir: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    let mut table = Table::new(["n", "mean_square_error", "seed_std", "degenerate"]);
    for c in &report.cells {
        table.row([
            c.n_particles.into(),
            c.mean_square_error.into(),
            c.seed_std.into(),
            u64::from(c.degenerate).into(),
        ]);
    }
    table.write(&out_dir.join("coupling.csv"))?;

    let active: Vec<&CouplingCell> = report.cells.iter().filter(|c| !c.degenerate).collect();
    let sizes: Vec<f64> = active.iter().map(|c| c.n_particles as f64).collect();
    let mut plot = LinePlot {
        title: "shared-noise coupling error vs ensemble size".into(),
        x_label: "ensemble size n".into(),
        y_label: "mean-square coupling error".into(),
        log_x: true,
        log_y: true,
        ..Default::default()
    };
    plot.series.push(Series::new(
        "(1/n) sum |x~ - x|^2",
        sizes.clone(),
        active.iter().map(|c| c.mean_square_error).collect(),
    ));
    let f = &report.fit;
    let fit_xs = vec![sizes[0], *sizes.last().unwrap()];
    let fit_ys: Vec<f64> = fit_xs.iter().map(|&n| f.intercept.exp() * n.powf(f.slope)).collect();
    plot.series.push(Series::dashed(format!("fit: slope {:.3}", f.slope), fit_xs, fit_ys));
    plot.write(&out_dir.join("coupling.svg"))?;

    manifest.note("fit_slope", report.fit.slope);
    manifest.note("fit_r_squared", report.fit.r_squared);
    manifest.note("spearman", report.spearman);
    if report.cells.iter().any(|c| c.degenerate) {
        manifest.note("degenerate_sizes_excluded_from_fit", true);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Kinetic figure runs
// ---------------------------------------------------------------------------

/// Configuration of a two-engine kinetic figure run.
#[derive(Clone, Debug)]
pub struct FiguresConfig {
    /// Catalog potential name.
    pub potential: String,
    pub n_particles: usize,
    /// Half-width of the initial position box.
    pub half_width: f64,
    /// Initial velocity variance; `None` chooses the energy-matched value
    /// from the oracle, substituting `1.0` (flagged in the report) when
    /// the matching condition is infeasible.
    pub sigma2: Option<f64>,
    /// Mollifier width of the divergence diagnostics.
    pub delta: f64,
    /// Collision-kernel width; `None` defaults to `1` in one dimension
    /// and `4` in two.
    pub epsilon: Option<f64>,
    pub t_final: f64,
    pub n_snapshots: usize,
    pub verlet_dt: f64,
    /// Reference-sample count for the baseline divergence values.
    pub baseline_n: usize,
    /// Start from the equilibrium law instead of the box draw.
    pub equilibrium_start: bool,
    pub scheduler: BirdScheduler,
    pub partner_selection: PartnerSelection,
    pub max_events: u64,
}

impl FiguresConfig {
    pub fn new(potential: impl Into<String>) -> Self {
        Self {
            potential: potential.into(),
            n_particles: 1000,
            half_width: 2.0,
            sigma2: None,
            delta: 0.3,
            epsilon: None,
            t_final: 10.0,
            n_snapshots: 101,
            verlet_dt: 0.01,
            baseline_n: 1000,
            equilibrium_start: false,
            scheduler: BirdScheduler::default(),
            partner_selection: PartnerSelection::default(),
            max_events: 1_000_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_snapshots < 2 {
            return Err(Error::InvalidConfig(
                "figure runs need at least two snapshot times".into(),
            ));
        }
        if self.baseline_n < 2 {
            return Err(Error::InvalidConfig(
                "the baseline needs at least two reference samples".into(),
            ));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig("mollifier width must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostic time series of one collision engine.
#[derive(Clone, Debug)]
pub struct EngineSeries {
    pub method: CollisionMethod,
    pub times: Vec<f64>,
    /// Mollified position-marginal divergence per snapshot.
    pub kl_x: Vec<f64>,
    /// Mollified phase-space divergence per snapshot.
    pub kl_phase: Vec<f64>,
    /// Total energy per snapshot.
    pub energy: Vec<f64>,
    /// Fraction of final positions with positive first coordinate.
    pub positive_fraction: f64,
    pub collisions: u64,
    pub rings: u64,
}

/// Result of a figure run: both engines on the same configuration and
/// seed, plus reference divergence values from oracle draws.
#[derive(Clone, Debug)]
pub struct FiguresReport {
    pub potential: String,
    /// Resolved collision-kernel width.
    pub epsilon: f64,
    pub delta: f64,
    /// Resolved initial velocity variance.
    pub sigma2: f64,
    /// The energy-matched variance was infeasible and `1.0` was used.
    pub sigma2_fallback: bool,
    /// Divergence of `baseline_n` fresh equilibrium position samples.
    pub baseline_kl_x: f64,
    /// Divergence of `baseline_n` fresh equilibrium phase samples.
    pub baseline_kl_phase: f64,
    pub nanbu: EngineSeries,
    pub bird: EngineSeries,
}

/// Run both collision engines on one potential and record divergence and
/// energy time series against an oracle baseline.
pub fn experiment_boltzmann_figures(cfg: &FiguresConfig, seed: u64) -> Result<FiguresReport> {
    cfg.validate()?;
    let pot = potential_by_name(&cfg.potential).ok_or_else(|| {
        Error::InvalidConfig(format!("unknown potential '{}'", cfg.potential))
    })?;
    let epsilon = cfg.epsilon.unwrap_or(if pot.dim() == 1 { 1.0 } else { 4.0 });

    let (sigma2, sigma2_fallback) = match cfg.sigma2 {
        Some(v) => (v, false),
        None => match initial_sigma2(&pot, cfg.half_width) {
            Ok(v) => (v, false),
            // Infeasible energy matching: run with unit variance, flagged.
            Err(Error::InvalidConfig(_)) => (1.0, true),
            Err(e) => return Err(e),
        },
    };

    let init = if cfg.equilibrium_start {
        BoltzmannInit::Equilibrium
    } else {
        BoltzmannInit::Box { half_width: cfg.half_width, sigma2 }
    };

    // Baseline divergences from fresh oracle draws (stream index 1; the
    // equilibrium initializer owns index 0).
    let baseline = equilibrium_sample(
        &pot,
        cfg.baseline_n,
        &RngStream::indexed(seed, StreamPurpose::Oracle, 1),
    )?;
    let baseline_kl_x = mollified_kl_positions(&baseline.positions, &pot, cfg.delta)?;
    let baseline_kl_phase = mollified_kl_phase(&baseline, &pot, cfg.delta)?;

    let series = |method: CollisionMethod| -> Result<EngineSeries> {
        let mut run_cfg =
            BoltzmannConfig::new(method, cfg.n_particles, cfg.t_final, epsilon, cfg.n_snapshots);
        run_cfg.verlet_dt = cfg.verlet_dt;
        run_cfg.scheduler = cfg.scheduler;
        run_cfg.partner_selection = cfg.partner_selection;
        run_cfg.max_events = cfg.max_events;
        let run = run_boltzmann(&pot, &init, &run_cfg, seed)?;
        let mut times = Vec::with_capacity(run.snapshots.len());
        let mut kl_x = Vec::with_capacity(run.snapshots.len());
        let mut kl_phase = Vec::with_capacity(run.snapshots.len());
        let mut energy = Vec::with_capacity(run.snapshots.len());
        for snap in &run.snapshots {
            times.push(snap.time);
            kl_x.push(mollified_kl_positions(&snap.positions, &pot, cfg.delta)?);
            kl_phase.push(mollified_kl_phase(snap, &pot, cfg.delta)?);
            energy.push(snap.total_energy(&pot)?);
        }
        let final_x = &run.final_state.positions;
        let positive = final_x.row(0).iter().filter(|&&v| v > 0.0).count();
        Ok(EngineSeries {
            method,
            times,
            kl_x,
            kl_phase,
            energy,
            positive_fraction: positive as f64 / final_x.ncols() as f64,
            collisions: run.collisions,
            rings: run.rings,
        })
    };

    let nanbu = series(CollisionMethod::Nanbu)?;
    let bird = series(CollisionMethod::Bird)?;

    Ok(FiguresReport {
        potential: pot.name().to_string(),
        epsilon,
        delta: cfg.delta,
        sigma2,
        sigma2_fallback,
        baseline_kl_x,
        baseline_kl_phase,
        nanbu,
        bird,
    })
}

/// Write the figure bundle: per-snapshot series CSV, per-engine summary
/// CSV, and overlay plots of both engines with the baseline as a
/// horizontal reference.
pub fn write_figures_bundle(
    report: &FiguresReport,
    out_dir: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    let mut table = Table::new(["method", "time", "kl_x", "kl_phase", "energy"]);
    for s in [&report.nanbu, &report.bird] {
        let name = format!("{:?}", s.method).to_lowercase();
        for k in 0..s.times.len() {
            table.row([
                name.as_str().into(),
                s.times[k].into(),
                s.kl_x[k].into(),
                s.kl_phase[k].into(),
                s.energy[k].into(),
            ]);
        }
    }
    table.write(&out_dir.join("series.csv"))?;

    let mut summary = Table::new(["method", "positive_fraction", "collisions", "rings"]);
    for s in [&report.nanbu, &report.bird] {
        summary.row([
            format!("{:?}", s.method).to_lowercase().into(),
            s.positive_fraction.into(),
            s.collisions.into(),
            s.rings.into(),
        ]);
    }
    summary.write(&out_dir.join("summary.csv"))?;

    let overlay = |title: &str,
                   y_label: &str,
                   pick: &dyn Fn(&EngineSeries) -> Vec<f64>,
                   baseline: Option<f64>|
     -> LinePlot {
        let mut plot = LinePlot {
            title: format!("{title} — {}", report.potential),
            x_label: "time".into(),
            y_label: y_label.into(),
            ..Default::default()
        };
        for s in [&report.nanbu, &report.bird] {
            plot.series.push(Series::new(
                format!("{:?}", s.method).to_lowercase(),
                s.times.clone(),
                pick(s),
            ));
        }
        if let Some(b) = baseline {
            plot.hlines.push((b, "baseline".into()));
        }
        plot
    };
    overlay("position divergence", "KL (positions)", &|s| s.kl_x.clone(), Some(report.baseline_kl_x))
        .write(&out_dir.join("kl_x.svg"))?;
    overlay("phase divergence", "KL (phase)", &|s| s.kl_phase.clone(), Some(report.baseline_kl_phase))
        .write(&out_dir.join("kl_phase.svg"))?;
    overlay("total energy", "energy", &|s| s.energy.clone(), None)
        .write(&out_dir.join("energy.svg"))?;

    manifest.note("potential", report.potential.clone());
    manifest.note("epsilon", report.epsilon);
    manifest.note("sigma2", report.sigma2);
    manifest.note("sigma2_fallback", report.sigma2_fallback);
    manifest.note("baseline_kl_x", report.baseline_kl_x);
    manifest.note("baseline_kl_phase", report.baseline_kl_phase);
    manifest.note("nanbu_positive_fraction", report.nanbu.positive_fraction);
    manifest.note("bird_positive_fraction", report.bird.positive_fraction);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardMap, GaussianSpec};
    use nalgebra::DVector;

    fn scalar_problem() -> BayesProblem {
        BayesProblem::new(
            ForwardMap::linear(DMatrix::identity(1, 1)),
            GaussianSpec::standard(1),
            GaussianSpec::standard(1),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap()
    }

    fn nonlinear_problem() -> BayesProblem {
        BayesProblem::new(
            ForwardMap::nonlinear(1, 1, |x: &DVector<f64>| x.map(|v| v * v * v)),
            GaussianSpec::standard(1),
            GaussianSpec::standard(1),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap()
    }

    #[test]
    fn rate_study_small_scale_shows_decay() {
        let problem = scalar_problem();
        let mut cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![8, 64, 512], 0.05, 1.0);
        cfg.n_seeds = 30;
        let report = experiment_kalman_rate(&problem, &cfg, 7).unwrap();
        assert_eq!(report.cells.len(), 3);
        assert_eq!(report.cells[0].n_particles, 8);
        for c in &report.cells {
            assert!(c.weak_first_rms > 0.0 && c.weak_first_rms.is_finite());
            assert!(c.weak_second_rms > 0.0);
            let w2 = c.w2_mean.expect("one-dimensional problems always report W2");
            assert!(w2 > 0.0 && w2.is_finite());
        }
        // 64x size spread at 30 replications: decay must be visible.
        assert!(
            report.cells[2].weak_first_rms < report.cells[0].weak_first_rms,
            "no decay: {:?}",
            report.cells
        );
        assert!(
            report.fit_first.slope < -0.1 && report.fit_first.slope > -1.0,
            "slope {}",
            report.fit_first.slope
        );
        assert!(report.stationarity.is_none(), "flow runs carry no tail diagnostic");
    }

    #[test]
    fn rate_study_is_deterministic_across_thread_counts() {
        // The fan-out is an order-preserving parallel map; the report must
        // be a pure function of (problem, config, seed) regardless of the
        // number of worker threads actually used.
        let problem = scalar_problem();
        let mut cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![8, 32], 0.1, 1.0);
        cfg.n_seeds = 6;
        let a = experiment_kalman_rate(&problem, &cfg, 3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| experiment_kalman_rate(&problem, &cfg, 3)).unwrap();
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.weak_first_rms.to_bits(), cb.weak_first_rms.to_bits());
            assert_eq!(ca.weak_second_rms.to_bits(), cb.weak_second_rms.to_bits());
            assert_eq!(ca.w2_mean.unwrap().to_bits(), cb.w2_mean.unwrap().to_bits());
        }
        assert_eq!(a.fit_first.slope.to_bits(), b.fit_first.slope.to_bits());
    }

    #[test]
    fn sampler_rate_study_reports_stationarity() {
        let problem = scalar_problem();
        let mut cfg = RateStudyConfig::new(KalmanMethod::Eks, vec![16, 64], 0.05, 2.0);
        cfg.n_seeds = 10;
        let report = experiment_kalman_rate(&problem, &cfg, 5).unwrap();
        let s = report.stationarity.expect("sampler studies carry the tail diagnostic");
        assert!(s.drift.is_finite());
        assert!(s.standard_error > 0.0);
    }

    #[test]
    fn rate_study_rejects_bad_configurations() {
        let problem = scalar_problem();
        let cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![16], 0.05, 1.0);
        assert!(experiment_kalman_rate(&problem, &cfg, 0).is_err(), "single size");
        let cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![32, 16], 0.05, 1.0);
        assert!(experiment_kalman_rate(&problem, &cfg, 0).is_err(), "not increasing");
        let cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![16, 32], 0.05, 2.0);
        assert!(experiment_kalman_rate(&problem, &cfg, 0).is_err(), "flow horizon != 1");
        let mut cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![16, 32], 0.1, 1.0);
        cfg.n_seeds = 4;
        assert!(experiment_kalman_rate(&nonlinear_problem(), &cfg, 0).is_err(), "nonlinear");
    }

    #[test]
    fn coupling_error_decays_with_ensemble_size() {
        let problem = scalar_problem();
        let mut cfg = CouplingConfig::new(vec![1, 4, 16, 64], 0.02);
        cfg.n_seeds = 20;
        let report = experiment_coupling(&problem, &cfg, 11).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert!(report.cells[0].degenerate);
        assert!(!report.cells[1].degenerate);
        let active: Vec<f64> =
            report.cells.iter().filter(|c| !c.degenerate).map(|c| c.mean_square_error).collect();
        assert!(
            active.last().unwrap() < active.first().unwrap(),
            "no decay: {active:?}"
        );
        assert!(report.fit.slope < -0.3, "slope {}", report.fit.slope);
        assert!(report.spearman < -0.5, "spearman {}", report.spearman);
    }

    #[test]
    fn self_coupling_is_exactly_zero() {
        // Two evolutions of the mean-field flow under the same seed are
        // bitwise identical: the coupling construction shares noise by
        // stream layout, not by passing arrays around.
        let problem = scalar_problem();
        let a = mean_field_ensemble(&problem, 12, 0.1, 10, 9).unwrap();
        let b = mean_field_ensemble(&problem, 12, 0.1, 10, 9).unwrap();
        assert_eq!(a.positions(), b.positions());
        let diff = (a.positions() - b.positions()).iter().map(|v| v * v).sum::<f64>();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn coupling_rejects_nonlinear_maps_and_bad_lists() {
        let cfg = CouplingConfig::new(vec![4, 16], 0.1);
        assert!(matches!(
            experiment_coupling(&nonlinear_problem(), &cfg, 0),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = CouplingConfig::new(vec![1, 4], 0.1);
        assert!(
            experiment_coupling(&scalar_problem(), &cfg, 0).is_err(),
            "one non-degenerate size cannot be fitted"
        );
    }

    #[test]
    fn figures_smoke_run_populates_all_series() {
        let mut cfg = FiguresConfig::new("quadratic_1d");
        cfg.n_particles = 60;
        cfg.t_final = 0.5;
        cfg.n_snapshots = 6;
        cfg.baseline_n = 100;
        let report = experiment_boltzmann_figures(&cfg, 4).unwrap();
        assert_eq!(report.epsilon, 1.0);
        assert!(!report.sigma2_fallback);
        assert!((report.sigma2 - 2.0 / 3.0).abs() < 1e-6);
        assert!(report.baseline_kl_x.is_finite());
        assert!(report.baseline_kl_phase.is_finite());
        for s in [&report.nanbu, &report.bird] {
            assert_eq!(s.times.len(), 6);
            assert_eq!(s.times[0], 0.0);
            assert_eq!(*s.times.last().unwrap(), 0.5);
            assert!(s.kl_x.iter().all(|v| v.is_finite()));
            assert!(s.kl_phase.iter().all(|v| v.is_finite()));
            assert!(s.energy.iter().all(|v| v.is_finite() && *v > 0.0));
            assert!((0.0..=1.0).contains(&s.positive_fraction));
            assert!(s.collisions >= 1, "{:?} made no collisions", s.method);
            assert!(s.rings >= s.collisions);
        }
        // Same seed, same config: the two engines see identical initial
        // states, so their t=0 diagnostics coincide.
        assert_eq!(report.nanbu.kl_x[0].to_bits(), report.bird.kl_x[0].to_bits());
        assert_eq!(report.nanbu.energy[0].to_bits(), report.bird.energy[0].to_bits());
    }

    #[test]
    fn figures_fall_back_to_unit_variance_when_matching_is_infeasible() {
        let mut cfg = FiguresConfig::new("doublewell_1d");
        cfg.n_particles = 30;
        cfg.t_final = 0.2;
        cfg.n_snapshots = 2;
        cfg.baseline_n = 50;
        let report = experiment_boltzmann_figures(&cfg, 1).unwrap();
        assert!(report.sigma2_fallback);
        assert_eq!(report.sigma2, 1.0);
    }

    #[test]
    fn figures_resolve_planar_defaults() {
        let mut cfg = FiguresConfig::new("quadratic_2d");
        cfg.n_particles = 30;
        cfg.t_final = 0.2;
        cfg.n_snapshots = 3;
        cfg.baseline_n = 50;
        let report = experiment_boltzmann_figures(&cfg, 2).unwrap();
        assert_eq!(report.epsilon, 4.0);
        assert!(!report.sigma2_fallback);
        assert!((report.sigma2 - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(report.nanbu.times.len(), 3);
    }

    #[test]
    fn figures_reject_unknown_potentials() {
        let cfg = FiguresConfig::new("sextic_well");
        assert!(matches!(
            experiment_boltzmann_figures(&cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn bundles_write_reproducible_files() {
        let problem = scalar_problem();
        let mut cfg = RateStudyConfig::new(KalmanMethod::Eki, vec![8, 32], 0.1, 1.0);
        cfg.n_seeds = 5;
        let report = experiment_kalman_rate(&problem, &cfg, 2).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let mut manifest = Manifest::new(serde_json::json!({"demo": true}), 2);
        write_rate_bundle(&report, out, &mut manifest).unwrap();
        manifest.write(&out.join("manifest.json")).unwrap();

        let csv = std::fs::read_to_string(out.join("rate.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3, "header plus one row per size");
        assert!(csv.starts_with("n,weak_first_rms,weak_second_rms,w2_mean\n"));
        let svg = std::fs::read_to_string(out.join("rate.svg")).unwrap();
        assert!(crate::output::embedded_series_data(&svg).unwrap().contains("fit: slope"));
        let manifest_text = std::fs::read_to_string(out.join("manifest.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&manifest_text).unwrap();
        assert!(parsed["notes"]["fit_first_slope"].is_f64());

        // Byte-identical on rerun: the CSV is a pure function of
        // (problem, config, seed).
        let report2 = experiment_kalman_rate(&problem, &cfg, 2).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut manifest2 = Manifest::new(serde_json::json!({"demo": true}), 2);
        write_rate_bundle(&report2, dir2.path(), &mut manifest2).unwrap();
        let csv2 = std::fs::read_to_string(dir2.path().join("rate.csv")).unwrap();
        assert_eq!(csv, csv2);
    }

    #[test]
    fn coupling_and_figure_bundles_have_expected_shapes() {
        let problem = scalar_problem();
        let mut ccfg = CouplingConfig::new(vec![4, 16], 0.1);
        ccfg.n_seeds = 6;
        let creport = experiment_coupling(&problem, &ccfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new(serde_json::json!({}), 3);
        write_coupling_bundle(&creport, dir.path(), &mut manifest).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("coupling.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(manifest.notes.contains_key("spearman"));

        let mut fcfg = FiguresConfig::new("quadratic_1d");
        fcfg.n_particles = 40;
        fcfg.t_final = 0.3;
        fcfg.n_snapshots = 4;
        fcfg.baseline_n = 60;
        let freport = experiment_boltzmann_figures(&fcfg, 8).unwrap();
        let fdir = tempfile::tempdir().unwrap();
        let mut fmanifest = Manifest::new(serde_json::json!({}), 8);
        write_figures_bundle(&freport, fdir.path(), &mut fmanifest).unwrap();
        let series = std::fs::read_to_string(fdir.path().join("series.csv")).unwrap();
        assert_eq!(series.lines().count(), 1 + 2 * 4, "header plus both engines");
        for f in ["summary.csv", "kl_x.svg", "kl_phase.svg", "energy.svg"] {
            assert!(fdir.path().join(f).exists(), "{f} missing");
        }
        let svg = std::fs::read_to_string(fdir.path().join("kl_x.svg")).unwrap();
        let data = crate::output::embedded_series_data(&svg).unwrap();
        assert!(data.contains("nanbu,"));
        assert!(data.contains("bird,"));
        assert!(data.contains("baseline,,"));
    }
}
