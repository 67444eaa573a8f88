//! JSON run configuration: a versioned document holding exactly one job
//! (a single sampler run or one experiment), parsed strictly and built
//! into the typed configurations of the library modules.
//!
//! Top-level shape:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 42,
//!   "kalman": { ... } | "boltzmann": { ... } | "experiment": { ... }
//! }
//! ```
//!
//! Unknown fields are rejected everywhere, so typos fail at parse time
//! with a line/column message. The `seed` field is optional; the CLI
//! resolves the effective seed from its own flag, this field, and an
//! environment variable, in that order of precedence.

use serde::Deserialize;

use crate::boltzmann::{
    BirdScheduler, BoltzmannConfig, BoltzmannInit, CollisionMethod, PartnerSelection,
};
use crate::error::{Error, Result};
use crate::harness::{CouplingConfig, FiguresConfig, RateStudyConfig};
use crate::kalman::{KalmanConfig, KalmanMethod};
use crate::model::{potential_by_name, BayesProblem, ForwardMap, GaussianSpec, Potential};
use crate::oracles::initial_sigma2;
use nalgebra::{DMatrix, DVector};

/// Schema version this build reads.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Top-level configuration document.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub kalman: Option<KalmanJob>,
    #[serde(default)]
    pub boltzmann: Option<BoltzmannJob>,
    #[serde(default)]
    pub experiment: Option<ExperimentJob>,
}

/// A Gaussian law as JSON: explicit mean and covariance.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussJson {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

/// A linear-Gaussian Bayesian problem as JSON. Only linear forward maps
/// are representable as data; nonlinear maps are constructed in code.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemJson {
    /// Rows of the forward matrix `A` (`d' x d`).
    pub forward_matrix: Vec<Vec<f64>>,
    pub prior: GaussJson,
    pub noise: GaussJson,
    pub data: Vec<f64>,
}

/// One ensemble-method run.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanJob {
    /// `"eki"` or `"eks"`.
    pub method: String,
    pub n_particles: usize,
    pub step_size: f64,
    pub n_steps: usize,
    /// Snapshot cadence in steps (initial and final ensembles are always
    /// kept).
    #[serde(default)]
    pub record_every: Option<usize>,
    pub problem: ProblemJson,
}

/// Initial condition of a kinetic run.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitJson {
    /// Uniform positions on the box, Gaussian velocities. A missing
    /// `sigma2` requests the energy-matched value from the oracle, which
    /// must be feasible here (the figures experiment is the only place
    /// with a fallback).
    Box {
        half_width: f64,
        #[serde(default)]
        sigma2: Option<f64>,
    },
    /// Equilibrium positions by inverse-transform sampling, standard
    /// normal velocities.
    Equilibrium,
}

/// One kinetic-simulator run.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoltzmannJob {
    /// `"nanbu"` or `"bird"`.
    pub method: String,
    /// Catalog potential name.
    pub potential: String,
    pub n_particles: usize,
    pub t_final: f64,
    /// Collision-kernel width; defaults to 1 (one dimension) or 4 (two).
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Mollifier width of the divergence metrics in the output.
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub init: InitJson,
    #[serde(default)]
    pub verlet_dt: Option<f64>,
    #[serde(default)]
    pub n_snapshots: Option<usize>,
    /// `"pair_clocks"` or `"superposition"` (pair engine only).
    #[serde(default)]
    pub scheduler: Option<String>,
    /// `"uniform"` or `"proportional"` (per-particle engine only).
    #[serde(default)]
    pub partner_selection: Option<String>,
    #[serde(default)]
    pub lambda_override: Option<f64>,
    #[serde(default)]
    pub max_events: Option<u64>,
    #[serde(default)]
    pub log_events: bool,
}

fn default_delta() -> f64 {
    0.3
}

/// One harness experiment, tagged by the CLI experiment name.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "name", deny_unknown_fields)]
pub enum ExperimentJob {
    #[serde(rename = "kalman-rate")]
    KalmanRate {
        /// `"eki"` or `"eks"`.
        method: String,
        n_list: Vec<usize>,
        step_size: f64,
        t_final: f64,
        #[serde(default)]
        n_seeds: Option<usize>,
        problem: ProblemJson,
    },
    #[serde(rename = "coupling")]
    Coupling {
        n_list: Vec<usize>,
        step_size: f64,
        #[serde(default)]
        n_seeds: Option<usize>,
        problem: ProblemJson,
    },
    #[serde(rename = "boltzmann-figures")]
    BoltzmannFigures {
        potential: String,
        #[serde(default)]
        n_particles: Option<usize>,
        #[serde(default)]
        half_width: Option<f64>,
        #[serde(default)]
        sigma2: Option<f64>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        epsilon: Option<f64>,
        #[serde(default)]
        t_final: Option<f64>,
        #[serde(default)]
        n_snapshots: Option<usize>,
        #[serde(default)]
        verlet_dt: Option<f64>,
        #[serde(default)]
        baseline_n: Option<usize>,
        #[serde(default)]
        equilibrium_start: Option<bool>,
        #[serde(default)]
        scheduler: Option<String>,
        #[serde(default)]
        partner_selection: Option<String>,
        #[serde(default)]
        max_events: Option<u64>,
    },
}

impl ExperimentJob {
    /// The CLI-facing experiment name.
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentJob::KalmanRate { .. } => "kalman-rate",
            ExperimentJob::Coupling { .. } => "coupling",
            ExperimentJob::BoltzmannFigures { .. } => "boltzmann-figures",
        }
    }
}

/// A fully built, validated job ready to run.
pub enum BuiltJob {
    Kalman {
        method_name: &'static str,
        problem: BayesProblem,
        config: KalmanConfig,
    },
    Boltzmann {
        method_name: &'static str,
        potential: Potential,
        init: BoltzmannInit,
        config: BoltzmannConfig,
        /// Mollifier width for the output divergence metrics.
        delta: f64,
    },
    RateStudy {
        problem: BayesProblem,
        config: RateStudyConfig,
    },
    Coupling {
        problem: BayesProblem,
        config: CouplingConfig,
    },
    Figures {
        config: FiguresConfig,
    },
}

impl BuiltJob {
    /// The `--method` name for sampler jobs, the `--name` for experiments.
    pub fn dispatch_name(&self) -> &'static str {
        match self {
            BuiltJob::Kalman { method_name, .. } => method_name,
            BuiltJob::Boltzmann { method_name, .. } => method_name,
            BuiltJob::RateStudy { .. } => "kalman-rate",
            BuiltJob::Coupling { .. } => "coupling",
            BuiltJob::Figures { .. } => "boltzmann-figures",
        }
    }

    pub fn is_experiment(&self) -> bool {
        matches!(
            self,
            BuiltJob::RateStudy { .. } | BuiltJob::Coupling { .. } | BuiltJob::Figures { .. }
        )
    }
}

pub fn parse_kalman_method(s: &str) -> Result<(KalmanMethod, &'static str)> {
    match s {
        "eki" => Ok((KalmanMethod::Eki, "eki")),
        "eks" => Ok((KalmanMethod::Eks, "eks")),
        other => Err(Error::InvalidConfig(format!(
            "unknown ensemble method '{other}' (expected 'eki' or 'eks')"
        ))),
    }
}

pub fn parse_collision_method(s: &str) -> Result<(CollisionMethod, &'static str)> {
    match s {
        "nanbu" => Ok((CollisionMethod::Nanbu, "nanbu")),
        "bird" => Ok((CollisionMethod::Bird, "bird")),
        other => Err(Error::InvalidConfig(format!(
            "unknown collision method '{other}' (expected 'nanbu' or 'bird')"
        ))),
    }
}

fn parse_scheduler(s: &str) -> Result<BirdScheduler> {
    match s {
        "pair_clocks" => Ok(BirdScheduler::PairClocks),
        "superposition" => Ok(BirdScheduler::Superposition),
        other => Err(Error::InvalidConfig(format!(
            "unknown scheduler '{other}' (expected 'pair_clocks' or 'superposition')"
        ))),
    }
}

fn parse_partner_selection(s: &str) -> Result<PartnerSelection> {
    match s {
        "uniform" => Ok(PartnerSelection::Uniform),
        "proportional" => Ok(PartnerSelection::Proportional),
        other => Err(Error::InvalidConfig(format!(
            "unknown partner selection '{other}' (expected 'uniform' or 'proportional')"
        ))),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], context: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::InvalidConfig(format!("{context}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidConfig(format!("{context}: ragged matrix rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl GaussJson {
    fn build(&self, context: &str) -> Result<GaussianSpec> {
        let cov = matrix_from_rows(&self.covariance, context)?;
        GaussianSpec::new(DVector::from_vec(self.mean.clone()), cov)
    }
}

impl ProblemJson {
    pub fn build(&self) -> Result<BayesProblem> {
        let a = matrix_from_rows(&self.forward_matrix, "forward matrix")?;
        BayesProblem::new(
            ForwardMap::linear(a),
            self.build_prior()?,
            self.build_noise()?,
            DVector::from_vec(self.data.clone()),
        )
    }

    fn build_prior(&self) -> Result<GaussianSpec> {
        self.prior.build("prior covariance")
    }

    fn build_noise(&self) -> Result<GaussianSpec> {
        self.noise.build("noise covariance")
    }
}

fn resolve_potential(name: &str) -> Result<Potential> {
    potential_by_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown potential '{name}'")))
}

impl RunSpec {
    /// Parse a configuration document. Syntax errors surface with
    /// line/column positions.
    pub fn parse(text: &str) -> Result<Self> {
        let spec: RunSpec = serde_json::from_str(text)?;
        if spec.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (this build reads {CONFIG_SCHEMA_VERSION})",
                spec.schema_version
            )));
        }
        let jobs = usize::from(spec.kalman.is_some())
            + usize::from(spec.boltzmann.is_some())
            + usize::from(spec.experiment.is_some());
        if jobs != 1 {
            return Err(Error::InvalidConfig(format!(
                "exactly one of 'kalman', 'boltzmann', 'experiment' must be present, found {jobs}"
            )));
        }
        Ok(spec)
    }

    /// Build and validate the typed job.
    pub fn build(&self) -> Result<BuiltJob> {
        if let Some(job) = &self.kalman {
            return job.build();
        }
        if let Some(job) = &self.boltzmann {
            return job.build();
        }
        if let Some(job) = &self.experiment {
            return job.build();
        }
        unreachable!("parse enforced exactly one job");
    }
}

impl KalmanJob {
    fn build(&self) -> Result<BuiltJob> {
        let (method, method_name) = parse_kalman_method(&self.method)?;
        let problem = self.problem.build()?;
        let mut config = KalmanConfig::new(method, self.n_particles, self.step_size, self.n_steps);
        if let Some(every) = self.record_every {
            config.record_every = every;
        }
        config.validate()?;
        Ok(BuiltJob::Kalman { method_name, problem, config })
    }
}

impl BoltzmannJob {
    fn build(&self) -> Result<BuiltJob> {
        let (method, method_name) = parse_collision_method(&self.method)?;
        let potential = resolve_potential(&self.potential)?;
        let epsilon = self.epsilon.unwrap_or(if potential.dim() == 1 { 1.0 } else { 4.0 });
        if !(self.delta > 0.0) {
            return Err(Error::InvalidConfig(
                "divergence mollifier width must be positive".into(),
            ));
        }
        let init = match &self.init {
            InitJson::Box { half_width, sigma2 } => {
                let sigma2 = match sigma2 {
                    Some(v) => {
                        if !(*v >= 0.0) || !v.is_finite() {
                            return Err(Error::InvalidConfig(format!(
                                "initial velocity variance must be non-negative, got {v}"
                            )));
                        }
                        *v
                    }
                    // No fallback here: sampler runs demand a feasible
                    // energy-matched variance.
                    None => initial_sigma2(&potential, *half_width)?,
                };
                BoltzmannInit::Box { half_width: *half_width, sigma2 }
            }
            InitJson::Equilibrium => BoltzmannInit::Equilibrium,
        };
        let mut config = BoltzmannConfig::new(
            method,
            self.n_particles,
            self.t_final,
            epsilon,
            self.n_snapshots.unwrap_or(11),
        );
        if let Some(dt) = self.verlet_dt {
            config.verlet_dt = dt;
        }
        if let Some(s) = &self.scheduler {
            config.scheduler = parse_scheduler(s)?;
        }
        if let Some(p) = &self.partner_selection {
            config.partner_selection = parse_partner_selection(p)?;
        }
        config.lambda_override = self.lambda_override;
        if let Some(m) = self.max_events {
            config.max_events = m;
        }
        config.log_events = self.log_events;
        config.validate()?;
        Ok(BuiltJob::Boltzmann { method_name, potential, init, config, delta: self.delta })
    }
}

impl ExperimentJob {
    fn build(&self) -> Result<BuiltJob> {
        match self {
            ExperimentJob::KalmanRate { method, n_list, step_size, t_final, n_seeds, problem } => {
                let (method, _) = parse_kalman_method(method)?;
                let problem = problem.build()?;
                let mut config =
                    RateStudyConfig::new(method, n_list.clone(), *step_size, *t_final);
                if let Some(s) = n_seeds {
                    config.n_seeds = *s;
                }
                config.validate()?;
                Ok(BuiltJob::RateStudy { problem, config })
            }
            ExperimentJob::Coupling { n_list, step_size, n_seeds, problem } => {
                let problem = problem.build()?;
                let mut config = CouplingConfig::new(n_list.clone(), *step_size);
                if let Some(s) = n_seeds {
                    config.n_seeds = *s;
                }
                config.validate()?;
                Ok(BuiltJob::Coupling { problem, config })
            }
            ExperimentJob::BoltzmannFigures {
                potential,
                n_particles,
                half_width,
                sigma2,
                delta,
                epsilon,
                t_final,
                n_snapshots,
                verlet_dt,
                baseline_n,
                equilibrium_start,
                scheduler,
                partner_selection,
                max_events,
            } => {
                resolve_potential(potential)?;
                let mut config = FiguresConfig::new(potential.clone());
                if let Some(v) = n_particles {
                    config.n_particles = *v;
                }
                if let Some(v) = half_width {
                    config.half_width = *v;
                }
                config.sigma2 = *sigma2;
                if let Some(v) = delta {
                    config.delta = *v;
                }
                config.epsilon = *epsilon;
                if let Some(v) = t_final {
                    config.t_final = *v;
                }
                if let Some(v) = n_snapshots {
                    config.n_snapshots = *v;
                }
                if let Some(v) = verlet_dt {
                    config.verlet_dt = *v;
                }
                if let Some(v) = baseline_n {
                    config.baseline_n = *v;
                }
                if let Some(v) = equilibrium_start {
                    config.equilibrium_start = *v;
                }
                if let Some(s) = scheduler {
                    config.scheduler = parse_scheduler(s)?;
                }
                if let Some(p) = partner_selection {
                    config.partner_selection = parse_partner_selection(p)?;
                }
                if let Some(m) = max_events {
                    config.max_events = *m;
                }
                config.validate()?;
                Ok(BuiltJob::Figures { config })
            }
        }
    }
}
