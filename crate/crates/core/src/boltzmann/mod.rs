//! Event-driven binary-collision dynamics with a spatially mollified
//! kernel and velocity-Verlet transport.
//!
//! Particles carry positions and velocities. Between collision events the
//! whole ensemble follows the Hamiltonian flow of a confining potential
//! `f`; collisions exchange velocity components along a random unit
//! direction. The collision intensity between particles at `x_i`, `x_j`
//! integrates, over outgoing directions, a Gaussian spatial mollifier of
//! width `epsilon`, so the total cross-section
//!
//! ```text
//! sigma(x_i, x_j) = |S^{d-1}| (eps sqrt(pi))^{-d} exp(-|x_i - x_j|^2 / eps^2)
//! ```
//!
//! is velocity-independent and bounded by its value at coincident
//! positions. That supremum is used as the thinning majorant `Lambda`:
//! clocks ring at majorant rate and rings are accepted with probability
//! `sigma / Lambda`, which keeps waiting times exponential without ever
//! evaluating the kernel before a ring.
//!
//! Two engines are provided:
//!
//! * **Per-particle engine** ([`CollisionMethod::Nanbu`]): each particle
//!   owns a clock of rate `Lambda`. On an accepted ring a partner is
//!   sampled and **only the owner's velocity** is updated. Kinetic energy
//!   is conserved in expectation but not per event, so the total energy
//!   performs a random walk.
//! * **Pair engine** ([`CollisionMethod::Bird`]): every ordered pair owns
//!   a clock of rate `Lambda / n`. On an accepted ring **both** velocities
//!   update, conserving momentum and kinetic energy exactly per event.
//!   A statistically equivalent single-clock scheduler
//!   ([`BirdScheduler::Superposition`]) draws the ringing pair uniformly
//!   at the superposed rate `n(n-1)/n * Lambda`.
//!
//! Equilibria of the pair dynamics are densities proportional to
//! `exp(-f(x) - |v|^2 / 2)`.

mod clock;
mod verlet;

pub use clock::ClockQueue;
pub use verlet::verlet_advance;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::Potential;
use crate::rng::{exp_waiting_time, RngStream, StreamPurpose};

/// Largest particle count accepted by the event-driven runs; keeps
/// per-pair clock stream identifiers inside their 36-bit budget.
pub const MAX_PARTICLES: usize = 1 << 18;

/// Per-owner clock rings are stream-indexed with a 20-bit counter.
const MAX_RINGS_PER_CLOCK: u64 = 1 << 20;

/// Positions and velocities of `n` particles in `R^d`, column-wise, plus
/// the simulation time they correspond to.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEnsemble {
    pub positions: DMatrix<f64>,
    pub velocities: DMatrix<f64>,
    pub time: f64,
}

impl PhaseEnsemble {
    /// Wrap matching `d x n` position and velocity matrices at time zero.
    pub fn new(positions: DMatrix<f64>, velocities: DMatrix<f64>) -> Result<Self> {
        if positions.shape() != velocities.shape() {
            return Err(Error::DimensionMismatch {
                context: "phase ensemble: velocity matrix shape",
                expected: positions.ncols(),
                found: velocities.ncols(),
            });
        }
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "phase ensemble must have positive dimension and at least one particle".into(),
            ));
        }
        Ok(Self { positions, velocities, time: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one particle
    }

    /// Total kinetic energy `sum_i |v_i|^2 / 2`.
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.velocities.iter().map(|v| v * v).sum::<f64>()
    }

    /// Total potential energy `sum_i f(x_i)`.
    pub fn potential_energy(&self, pot: &Potential) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.len() {
            sum += pot.eval(&self.positions.column(i).into_owned())?;
        }
        Ok(sum)
    }

    /// Total energy `sum_i (|v_i|^2 / 2 + f(x_i))`.
    pub fn total_energy(&self, pot: &Potential) -> Result<f64> {
        Ok(self.kinetic_energy() + self.potential_energy(pot)?)
    }
}

/// Surface area of the unit sphere `S^{d-1}`.
fn sphere_surface(dim: usize) -> Result<f64> {
    match dim {
        1 => Ok(2.0),
        2 => Ok(2.0 * std::f64::consts::PI),
        3 => Ok(4.0 * std::f64::consts::PI),
        _ => Err(Error::InvalidArgument(format!(
            "collision kernel supports dimensions 1-3, got {dim}"
        ))),
    }
}

/// The mollified, velocity-independent collision kernel together with its
/// thinning majorant.
#[derive(Clone, Debug)]
pub struct CollisionKernel {
    dim: usize,
    epsilon: f64,
    majorant: f64,
    /// Cached prefactor `|S^{d-1}| (eps sqrt(pi))^{-d}`.
    prefactor: f64,
}

impl CollisionKernel {
    /// Kernel with the analytic majorant: the exact supremum of the total
    /// cross-section, attained at coincident positions.
    pub fn new(dim: usize, epsilon: f64) -> Result<Self> {
        let majorant = Self::analytic_majorant(dim, epsilon)?;
        Self::with_majorant(dim, epsilon, majorant)
    }

    /// Kernel with an explicit majorant override. A zero majorant disables
    /// collisions entirely (pure Hamiltonian transport). An override below
    /// the analytic supremum makes the thinning bound invalid and is
    /// rejected; overrides above it are legal (they only waste rings).
    pub fn with_majorant(dim: usize, epsilon: f64, majorant: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "collision kernel width must be positive, got {epsilon}"
            )));
        }
        if !majorant.is_finite() || majorant < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "collision majorant must be finite and nonnegative, got {majorant}"
            )));
        }
        let analytic = Self::analytic_majorant(dim, epsilon)?;
        if majorant > 0.0 && majorant < analytic * (1.0 - 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "collision majorant {majorant} is below the kernel supremum {analytic}; \
                 thinning would under-sample collisions"
            )));
        }
        let prefactor = sphere_surface(dim)? * (epsilon * std::f64::consts::PI.sqrt()).powi(-(dim as i32));
        Ok(Self { dim, epsilon, majorant, prefactor })
    }

    /// The supremum `|S^{d-1}| (eps sqrt(pi))^{-d}` of the total
    /// cross-section over all position pairs.
    pub fn analytic_majorant(dim: usize, epsilon: f64) -> Result<f64> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "collision kernel width must be positive, got {epsilon}"
            )));
        }
        Ok(sphere_surface(dim)? * (epsilon * std::f64::consts::PI.sqrt()).powi(-(dim as i32)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The thinning majorant `Lambda` (zero means collisions are off).
    pub fn majorant(&self) -> f64 {
        self.majorant
    }

    /// Total cross-section between positions `xi` and `xj`: the angular
    /// integral of the mollified kernel,
    /// `|S^{d-1}| (eps sqrt(pi))^{-d} exp(-|xi - xj|^2 / eps^2)`.
    pub fn total_cross_section(&self, xi: &DVector<f64>, xj: &DVector<f64>) -> Result<f64> {
        if xi.len() != self.dim || xj.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "total_cross_section argument",
                expected: self.dim,
                found: if xi.len() != self.dim { xi.len() } else { xj.len() },
            });
        }
        let r2 = (xi - xj).norm_squared();
        Ok(self.prefactor * (-r2 / (self.epsilon * self.epsilon)).exp())
    }

    /// Cross-section between particle columns of a position matrix
    /// (no allocation; used in the event loop).
    fn cross_section_cols(&self, x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let mut r2 = 0.0;
        for r in 0..self.dim {
            let d = x[(r, i)] - x[(r, j)];
            r2 += d * d;
        }
        self.prefactor * (-r2 / (self.epsilon * self.epsilon)).exp()
    }
}

/// Elastic velocity exchange along the unit direction `n`:
///
/// ```text
/// v* = v + ((w - v) . n) n
/// w* = w + ((v - w) . n) n
/// ```
///
/// Conserves `v + w`, `|v|^2 + |w|^2` and the relative speed `|v - w|`
/// exactly (up to rounding).
pub fn collide_velocities(
    v: &DVector<f64>,
    w: &DVector<f64>,
    n: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if v.len() != w.len() || v.len() != n.len() {
        return Err(Error::DimensionMismatch {
            context: "collide_velocities arguments",
            expected: v.len(),
            found: if w.len() != v.len() { w.len() } else { n.len() },
        });
    }
    if (n.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "collision direction must be a unit vector, |n| = {}",
            n.norm()
        )));
    }
    let s = (w - v).dot(n);
    let mut v_new = v.clone();
    v_new.axpy(s, n, 1.0);
    let mut w_new = w.clone();
    w_new.axpy(-s, n, 1.0);
    Ok((v_new, w_new))
}

/// Draw a direction uniformly distributed on the unit sphere `S^{d-1}`.
/// In one dimension this is a fair coin over `{-1, +1}`.
pub fn sample_unit_direction(rng: &mut ChaCha12Rng, dim: usize) -> Result<DVector<f64>> {
    match dim {
        1 => {
            let u: f64 = rng.gen();
            Ok(DVector::from_vec(vec![if u < 0.5 { -1.0 } else { 1.0 }]))
        }
        2 => {
            let theta: f64 = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
            Ok(DVector::from_vec(vec![theta.cos(), theta.sin()]))
        }
        3 => {
            // Area-preserving cylindrical map.
            let z: f64 = 2.0 * rng.gen::<f64>() - 1.0;
            let phi: f64 = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
            let r = (1.0 - z * z).max(0.0).sqrt();
            Ok(DVector::from_vec(vec![r * phi.cos(), r * phi.sin(), z]))
        }
        _ => Err(Error::InvalidArgument(format!(
            "unit direction sampling supports dimensions 1-3, got {dim}"
        ))),
    }
}

/// Which collision engine to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollisionMethod {
    /// Per-particle clocks; only the clock owner's velocity updates.
    Nanbu,
    /// Per-pair clocks; both partners' velocities update.
    Bird,
}

/// Scheduler used by the pair engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BirdScheduler {
    /// One clock per ordered pair, `n(n-1)` clocks of rate `Lambda / n`.
    #[default]
    PairClocks,
    /// A single clock at the superposed rate `n(n-1)/n * Lambda`; the
    /// ringing ordered pair is drawn uniformly. Statistically equivalent
    /// to [`BirdScheduler::PairClocks`] with O(1) memory.
    Superposition,
}

/// How the per-particle engine selects a collision partner after an
/// accepted ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PartnerSelection {
    /// Uniform over all particles (the clock owner included; a
    /// self-collision leaves the state unchanged).
    #[default]
    Uniform,
    /// Proportional to the pairwise cross-section, self included.
    Proportional,
}

/// Acceptance probability of a per-particle ring for owner `i`:
/// `(1/(n Lambda)) sum_j sigma(x_i, x_j)` with the self term included.
/// Equals 1 exactly when all particles occupy one point and the majorant
/// is analytic.
pub fn nanbu_acceptance(phase: &PhaseEnsemble, kernel: &CollisionKernel, i: usize) -> Result<f64> {
    check_particle(phase, kernel, i)?;
    require_active(kernel)?;
    let n = phase.len();
    let mut sum = 0.0;
    for j in 0..n {
        sum += kernel.cross_section_cols(&phase.positions, i, j);
    }
    Ok(sum / (n as f64 * kernel.majorant()))
}

/// Acceptance probability of a pair ring `(i, j)`:
/// `sigma(x_i, x_j) / Lambda`.
pub fn bird_acceptance(
    phase: &PhaseEnsemble,
    kernel: &CollisionKernel,
    i: usize,
    j: usize,
) -> Result<f64> {
    check_particle(phase, kernel, i)?;
    check_particle(phase, kernel, j)?;
    require_active(kernel)?;
    if i == j {
        return Err(Error::InvalidArgument(
            "pair collision requires two distinct particles".into(),
        ));
    }
    Ok(kernel.cross_section_cols(&phase.positions, i, j) / kernel.majorant())
}

fn check_particle(phase: &PhaseEnsemble, kernel: &CollisionKernel, i: usize) -> Result<()> {
    if kernel.dim() != phase.dim() {
        return Err(Error::DimensionMismatch {
            context: "collision kernel vs phase ensemble dimension",
            expected: phase.dim(),
            found: kernel.dim(),
        });
    }
    if i >= phase.len() {
        return Err(Error::InvalidArgument(format!(
            "particle index {i} out of range for ensemble of {}",
            phase.len()
        )));
    }
    Ok(())
}

fn require_active(kernel: &CollisionKernel) -> Result<()> {
    if kernel.majorant() <= 0.0 {
        return Err(Error::InvalidArgument(
            "collision kernel has zero majorant (collisions disabled)".into(),
        ));
    }
    Ok(())
}

/// What happened when a clock rang.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventOutcome {
    /// Whether the thinning test accepted the ring.
    pub accepted: bool,
    /// The collision partner (for the per-particle engine: the sampled
    /// partner; for the pair engine: the second pair member).
    pub partner: Option<usize>,
}

/// Execute one per-particle ring for owner `i`. Draw order on `rng`:
/// acceptance uniform first; then, if accepted, the partner index
/// (uniform mode: a uniform draw; proportional mode: a weighted draw),
/// then the scattering direction. Only `v_i` is updated.
///
/// Both modes accept a ring with the row-mean probability
/// `sum_j sigma(x_i, x_j) / (n Lambda)`, but couple the partner to the
/// acceptance differently:
///
/// * [`PartnerSelection::Uniform`] pairs the accepted owner with a
///   uniformly random particle, so the pair `(i, j)` collides at the
///   rate `mean_k sigma(x_i, x_k) / n` regardless of `j`. Distant pairs
///   collide as often as close ones, and owners in crowded regions ring
///   effectively more often — in states with position–velocity
///   correlation this rectifies into a systematic energy drift.
/// * [`PartnerSelection::Proportional`] draws the partner with weight
///   `sigma(x_i, x_j)`, so the pair `(i, j)` collides at the per-pair
///   rate `sigma(x_i, x_j) / n` — the same pair law the pair engine
///   realizes by thinning each `(i, j)` ring with
///   `sigma(x_i, x_j) / Lambda`.
pub fn nanbu_event(
    phase: &mut PhaseEnsemble,
    kernel: &CollisionKernel,
    i: usize,
    selection: PartnerSelection,
    rng: &mut ChaCha12Rng,
) -> Result<EventOutcome> {
    check_particle(phase, kernel, i)?;
    require_active(kernel)?;
    let n = phase.len();
    let u: f64 = rng.gen();

    let j = match selection {
        PartnerSelection::Uniform => {
            if u > nanbu_acceptance(phase, kernel, i)? {
                return Ok(EventOutcome { accepted: false, partner: None });
            }
            rng.gen_range(0..n)
        }
        PartnerSelection::Proportional => {
            let mut row = Vec::with_capacity(n);
            let mut sum = 0.0;
            for j in 0..n {
                let s = kernel.cross_section_cols(&phase.positions, i, j);
                row.push(s);
                sum += s;
            }
            if u > sum / (n as f64 * kernel.majorant()) {
                return Ok(EventOutcome { accepted: false, partner: None });
            }
            let target: f64 = rng.gen::<f64>() * sum;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (j, s) in row.iter().enumerate() {
                acc += s;
                if target < acc {
                    chosen = j;
                    break;
                }
            }
            chosen
        }
    };

    let dir = sample_unit_direction(rng, phase.dim())?;
    let vi = phase.velocities.column(i).into_owned();
    let vj = phase.velocities.column(j).into_owned();
    let (vi_new, _) = collide_velocities(&vi, &vj, &dir)?;
    phase.velocities.set_column(i, &vi_new);
    Ok(EventOutcome { accepted: true, partner: Some(j) })
}

/// Execute one pair ring for the ordered pair `(i, j)`. Draw order on
/// `rng`: acceptance uniform, then (if accepted) direction. Both
/// velocities update, conserving momentum and kinetic energy per event.
pub fn bird_event(
    phase: &mut PhaseEnsemble,
    kernel: &CollisionKernel,
    i: usize,
    j: usize,
    rng: &mut ChaCha12Rng,
) -> Result<EventOutcome> {
    let acceptance = bird_acceptance(phase, kernel, i, j)?;
    let u: f64 = rng.gen();
    if u > acceptance {
        return Ok(EventOutcome { accepted: false, partner: Some(j) });
    }
    let dir = sample_unit_direction(rng, phase.dim())?;
    let vi = phase.velocities.column(i).into_owned();
    let vj = phase.velocities.column(j).into_owned();
    let (vi_new, vj_new) = collide_velocities(&vi, &vj, &dir)?;
    phase.velocities.set_column(i, &vi_new);
    phase.velocities.set_column(j, &vj_new);
    Ok(EventOutcome { accepted: true, partner: Some(j) })
}

/// Initial condition of a kinetic run.
#[derive(Clone, Debug)]
pub enum BoltzmannInit {
    /// Positions uniform on the box `[-half_width, half_width]^d`,
    /// velocities i.i.d. `N(0, sigma2 I)`.
    Box { half_width: f64, sigma2: f64 },
    /// Positions from the equilibrium density `exp(-f)` (inverse-transform
    /// sampling), velocities standard normal.
    Equilibrium,
    /// An explicit phase-space state (its time is reset to zero).
    State(PhaseEnsemble),
}

/// Configuration of an event-driven kinetic run.
#[derive(Clone, Debug)]
pub struct BoltzmannConfig {
    pub method: CollisionMethod,
    pub n_particles: usize,
    pub t_final: f64,
    /// Mollifier width of the collision kernel.
    pub epsilon: f64,
    /// Thinning majorant override; `None` uses the analytic supremum and
    /// `Some(0.0)` disables collisions (pure transport).
    pub lambda_override: Option<f64>,
    /// Verlet substep ceiling.
    pub verlet_dt: f64,
    /// Times at which full phase snapshots are recorded; must be sorted
    /// and lie in `[0, t_final]`.
    pub snapshot_times: Vec<f64>,
    pub scheduler: BirdScheduler,
    pub partner_selection: PartnerSelection,
    /// Hard cap on clock rings before the run aborts.
    pub max_events: u64,
    /// Record a per-ring event log in the run result.
    pub log_events: bool,
}

impl BoltzmannConfig {
    /// A configuration with the documented defaults: analytic majorant,
    /// Verlet step `0.01`, pair-clock scheduler, uniform partner
    /// selection, a `10^9` event budget and `n_snapshots` uniformly spaced
    /// snapshot times (endpoints included).
    pub fn new(
        method: CollisionMethod,
        n_particles: usize,
        t_final: f64,
        epsilon: f64,
        n_snapshots: usize,
    ) -> Self {
        Self {
            method,
            n_particles,
            t_final,
            epsilon,
            lambda_override: None,
            verlet_dt: 0.01,
            snapshot_times: uniform_grid(t_final, n_snapshots),
            scheduler: BirdScheduler::default(),
            partner_selection: PartnerSelection::default(),
            max_events: 1_000_000_000,
            log_events: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("at least one particle required".into()));
        }
        if self.n_particles > MAX_PARTICLES {
            return Err(Error::InvalidConfig(format!(
                "particle count {} exceeds the supported maximum {MAX_PARTICLES}",
                self.n_particles
            )));
        }
        if !self.t_final.is_finite() || self.t_final < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "final time must be nonnegative and finite, got {}",
                self.t_final
            )));
        }
        if !(self.verlet_dt > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "verlet_dt must be positive, got {}",
                self.verlet_dt
            )));
        }
        if self.max_events == 0 {
            return Err(Error::InvalidConfig("event budget must be positive".into()));
        }
        let mut prev = 0.0;
        for &t in &self.snapshot_times {
            if !t.is_finite() || t < prev || t > self.t_final {
                return Err(Error::InvalidConfig(format!(
                    "snapshot times must be sorted within [0, {}]",
                    self.t_final
                )));
            }
            prev = t;
        }
        Ok(())
    }
}

/// `n_points` times uniformly spaced over `[0, t_final]`, endpoints
/// included (a single point means just `t_final`).
pub fn uniform_grid(t_final: f64, n_points: usize) -> Vec<f64> {
    match n_points {
        0 => Vec::new(),
        1 => vec![t_final],
        _ => (0..n_points)
            .map(|k| t_final * k as f64 / (n_points - 1) as f64)
            .collect(),
    }
}

/// One clock ring in the event log.
#[derive(Clone, Copy, Debug)]
pub struct EventRecord {
    pub time: f64,
    /// Clock owner: the particle for the per-particle engine, the ordered
    /// pair for the pair engine.
    pub owner: (usize, Option<usize>),
    pub accepted: bool,
    pub partner: Option<usize>,
}

/// Result of an event-driven kinetic run.
#[derive(Clone, Debug)]
pub struct BoltzmannRun {
    /// Phase snapshots at the configured times, in order.
    pub snapshots: Vec<PhaseEnsemble>,
    /// Final state at `t_final`.
    pub final_state: PhaseEnsemble,
    /// Number of clock rings processed.
    pub rings: u64,
    /// Number of accepted (executed) collisions.
    pub collisions: u64,
    /// Per-ring log, present when `log_events` was set.
    pub events: Option<Vec<EventRecord>>,
}

/// Owner key of a clock in the unified event loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ClockOwner {
    Particle(usize),
    Pair(usize, usize),
    Global,
}

/// Run the event-driven dynamics: draw the initial condition, then
/// alternate Verlet transport and collision events until `t_final`.
///
/// The run is a pure function of `(pot, init, cfg, seed)`; every random
/// draw comes from a stream derived from the seed, a purpose tag and the
/// owner index, so results are independent of scheduling and platform.
pub fn run_boltzmann(
    pot: &Potential,
    init: &BoltzmannInit,
    cfg: &BoltzmannConfig,
    seed: u64,
) -> Result<BoltzmannRun> {
    cfg.validate()?;
    let dim = pot.dim();
    let n = cfg.n_particles;
    let kernel = match cfg.lambda_override {
        Some(majorant) => CollisionKernel::with_majorant(dim, cfg.epsilon, majorant)?,
        None => CollisionKernel::new(dim, cfg.epsilon)?,
    };

    let mut phase = draw_initial(pot, init, n, seed)?;

    let mut snapshots: Vec<PhaseEnsemble> = Vec::with_capacity(cfg.snapshot_times.len());
    let mut next_snap = 0usize;
    let mut log = if cfg.log_events { Some(Vec::new()) } else { None };

    // Advance to `t`, emitting any snapshots that fall on the way.
    macro_rules! advance_to {
        ($t:expr) => {{
            let t: f64 = $t;
            while next_snap < cfg.snapshot_times.len() && cfg.snapshot_times[next_snap] <= t {
                verlet_advance(&mut phase, pot, cfg.snapshot_times[next_snap], cfg.verlet_dt)?;
                snapshots.push(phase.clone());
                next_snap += 1;
            }
            verlet_advance(&mut phase, pot, t, cfg.verlet_dt)?;
        }};
    }

    let mut rings = 0u64;
    let mut collisions = 0u64;

    if kernel.majorant() > 0.0 {
        // Clock state: the queue plus per-owner ring counters used to
        // index waiting-time streams.
        let mut queue: ClockQueue<ClockOwner> = ClockQueue::new();
        let mut particle_rings = vec![0u32; 0];
        let mut pair_rings = vec![0u32; 0];
        let mut global_rings = 0u64;

        let lambda = kernel.majorant();
        match (cfg.method, cfg.scheduler) {
            (CollisionMethod::Nanbu, _) => {
                particle_rings = vec![0u32; n];
                for i in 0..n {
                    let s = RngStream::clock(seed, StreamPurpose::ParticleClock, i as u64, 0);
                    queue.push(exp_waiting_time(&s, lambda), ClockOwner::Particle(i));
                }
            }
            (CollisionMethod::Bird, BirdScheduler::PairClocks) => {
                pair_rings = vec![0u32; n * n];
                let rate = lambda / n as f64;
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let owner = (i * n + j) as u64;
                        let s = RngStream::clock(seed, StreamPurpose::PairClock, owner, 0);
                        queue.push(exp_waiting_time(&s, rate), ClockOwner::Pair(i, j));
                    }
                }
            }
            (CollisionMethod::Bird, BirdScheduler::Superposition) => {
                // Superposed rate of n(n-1) pair clocks at Lambda/n each.
                let rate = (n * (n - 1)) as f64 / n as f64 * lambda;
                if rate > 0.0 {
                    let s = RngStream::clock(seed, StreamPurpose::GlobalClock, 0, 0);
                    queue.push(exp_waiting_time(&s, rate), ClockOwner::Global);
                }
            }
        }

        while let Some((ring, owner)) = queue.peek() {
            if ring > cfg.t_final {
                break;
            }
            queue.pop();
            rings += 1;
            if rings > cfg.max_events {
                return Err(Error::EventBudget {
                    max_events: cfg.max_events,
                    t_final: cfg.t_final,
                });
            }
            advance_to!(ring);

            // Event randomness comes from a stream indexed by the global
            // ring counter; the event loop is strictly sequential, so this
            // is deterministic.
            let mut ev_rng = RngStream::indexed(seed, StreamPurpose::Event, rings - 1).rng();
            let (outcome, logged_owner) = match owner {
                ClockOwner::Particle(i) => (
                    nanbu_event(&mut phase, &kernel, i, cfg.partner_selection, &mut ev_rng)?,
                    (i, None),
                ),
                ClockOwner::Pair(i, j) => {
                    (bird_event(&mut phase, &kernel, i, j, &mut ev_rng)?, (i, Some(j)))
                }
                ClockOwner::Global => {
                    let i = ev_rng.gen_range(0..n);
                    let mut j = ev_rng.gen_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    (bird_event(&mut phase, &kernel, i, j, &mut ev_rng)?, (i, Some(j)))
                }
            };
            if outcome.accepted {
                collisions += 1;
            }
            if let Some(log) = log.as_mut() {
                log.push(EventRecord {
                    time: ring,
                    owner: logged_owner,
                    accepted: outcome.accepted,
                    partner: outcome.partner,
                });
            }

            // Reschedule the owner from its own waiting-time stream.
            let (stream, rate) = match owner {
                ClockOwner::Particle(i) => {
                    particle_rings[i] += 1;
                    check_ring_budget(particle_rings[i] as u64, cfg)?;
                    (
                        RngStream::clock(
                            seed,
                            StreamPurpose::ParticleClock,
                            i as u64,
                            particle_rings[i] as u64,
                        ),
                        lambda,
                    )
                }
                ClockOwner::Pair(i, j) => {
                    let idx = i * n + j;
                    pair_rings[idx] += 1;
                    check_ring_budget(pair_rings[idx] as u64, cfg)?;
                    (
                        RngStream::clock(
                            seed,
                            StreamPurpose::PairClock,
                            idx as u64,
                            pair_rings[idx] as u64,
                        ),
                        lambda / n as f64,
                    )
                }
                ClockOwner::Global => {
                    global_rings += 1;
                    if global_rings >= (1 << 36) {
                        return Err(Error::EventBudget {
                            max_events: cfg.max_events,
                            t_final: cfg.t_final,
                        });
                    }
                    (
                        RngStream::indexed(seed, StreamPurpose::GlobalClock, global_rings),
                        (n * (n - 1)) as f64 / n as f64 * lambda,
                    )
                }
            };
            queue.push(ring + exp_waiting_time(&stream, rate), owner);
        }
    }

    advance_to!(cfg.t_final);
    let final_state = phase;
    Ok(BoltzmannRun {
        snapshots,
        final_state,
        rings,
        collisions,
        events: log,
    })
}

fn check_ring_budget(count: u64, cfg: &BoltzmannConfig) -> Result<()> {
    if count >= MAX_RINGS_PER_CLOCK {
        return Err(Error::EventBudget {
            max_events: cfg.max_events,
            t_final: cfg.t_final,
        });
    }
    Ok(())
}

fn draw_initial(
    pot: &Potential,
    init: &BoltzmannInit,
    n: usize,
    seed: u64,
) -> Result<PhaseEnsemble> {
    let dim = pot.dim();
    match init {
        BoltzmannInit::Box { half_width, sigma2 } => {
            if !(*half_width > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "box half width must be positive, got {half_width}"
                )));
            }
            if !(*sigma2 > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "initial velocity variance must be positive, got {sigma2}"
                )));
            }
            let sigma = sigma2.sqrt();
            let mut positions = DMatrix::zeros(dim, n);
            let mut velocities = DMatrix::zeros(dim, n);
            for i in 0..n {
                // Per-particle stream: d uniforms for the position, then d
                // standard normals for the velocity.
                let mut rng = RngStream::indexed(seed, StreamPurpose::Init, i as u64).rng();
                for r in 0..dim {
                    positions[(r, i)] = half_width * (2.0 * rng.gen::<f64>() - 1.0);
                }
                for r in 0..dim {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    velocities[(r, i)] = sigma * z;
                }
            }
            PhaseEnsemble::new(positions, velocities)
        }
        BoltzmannInit::Equilibrium => {
            let stream = RngStream::indexed(seed, StreamPurpose::Oracle, 0);
            crate::oracles::equilibrium_sample(pot, n, &stream)
        }
        BoltzmannInit::State(state) => {
            if state.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "initial state vs potential dimension",
                    expected: dim,
                    found: state.dim(),
                });
            }
            if state.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "initial state vs configured particle count",
                    expected: n,
                    found: state.len(),
                });
            }
            let mut s = state.clone();
            s.time = 0.0;
            Ok(s)
        }
    }
}
