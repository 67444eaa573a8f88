//! Deterministic, stream-indexed random number generation.
//!
//! All randomness in the crate flows through [`RngStream`]: a pair of a
//! 64-bit master seed and a 64-bit stream identifier, realized as a
//! counter-based ChaCha12 generator. Distinct stream identifiers under the
//! same seed yield statistically independent sequences, and a given
//! `(seed, stream_id)` pair reproduces the same bytes on every platform.
//!
//! Streams are never shared between logical actors. Each particle, each
//! collision clock and each event draws from its own stream, derived from
//! `(seed, purpose tag, index)`. This makes every run a pure function of
//! `(configuration, seed)`, independent of thread scheduling, and lets two
//! coupled particle systems consume identical noise by construction.
//!
//! Stream identifier layout (64 bits):
//!
//! ```text
//! [purpose: 8 bits | payload: 56 bits]
//! ```
//!
//! For clock streams the payload is further split into an owner index
//! (36 bits) and that owner's ring count (20 bits), so each exponential
//! waiting-time draw has its own stream and owners never need mutable
//! generator state.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const PAYLOAD_BITS: u32 = 56;
const RING_BITS: u32 = 20;
const OWNER_BITS: u32 = PAYLOAD_BITS - RING_BITS;

/// What a random stream is used for. The tag participates in the stream
/// identifier, so draws for different purposes never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamPurpose {
    /// Initial ensemble draws (one stream per particle).
    Init,
    /// Per-step sampler noise (one stream per particle, consumed
    /// sequentially over the run).
    ParticleNoise,
    /// Exponential waiting times of per-particle collision clocks.
    ParticleClock,
    /// Exponential waiting times of per-pair collision clocks.
    PairClock,
    /// Exponential waiting times of a single superposed collision clock.
    GlobalClock,
    /// Acceptance/partner/direction draws of collision events (one stream
    /// per event, indexed by the global event counter).
    Event,
    /// Reference-sample draws made by analytic oracles.
    Oracle,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Init => 1,
            StreamPurpose::ParticleNoise => 2,
            StreamPurpose::ParticleClock => 3,
            StreamPurpose::PairClock => 4,
            StreamPurpose::GlobalClock => 5,
            StreamPurpose::Event => 6,
            StreamPurpose::Oracle => 7,
        }
    }
}

/// A handle to one independent random stream: `(seed, stream_id)`.
///
/// The handle is cheap to copy and carries no generator state; call
/// [`RngStream::rng`] to materialize the generator positioned at the start
/// of the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    /// A stream with an explicit identifier.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// The stream owned by actor `index` under the given purpose.
    ///
    /// # Panics
    /// If `index` does not fit in the 56-bit payload.
    pub fn indexed(seed: u64, purpose: StreamPurpose, index: u64) -> Self {
        assert!(
            index < (1 << PAYLOAD_BITS),
            "stream index {index} exceeds the 56-bit payload"
        );
        Self::new(seed, (purpose.tag() << PAYLOAD_BITS) | index)
    }

    /// The stream for clock owner `owner`'s `ring_count`-th waiting-time
    /// draw. Owners get fresh, independent streams for every draw, so the
    /// event loop never stores generator state per clock.
    ///
    /// # Panics
    /// If `owner` exceeds 36 bits or `ring_count` exceeds 20 bits.
    pub fn clock(seed: u64, purpose: StreamPurpose, owner: u64, ring_count: u64) -> Self {
        assert!(owner < (1 << OWNER_BITS), "clock owner {owner} exceeds 36 bits");
        assert!(
            ring_count < (1 << RING_BITS),
            "ring count {ring_count} exceeds 20 bits"
        );
        Self::indexed(seed, purpose, (owner << RING_BITS) | ring_count)
    }

    /// Materialize the generator at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Draw `n` independent standard normal vectors of dimension `dim`,
/// returned as the columns of a `dim x n` matrix.
pub fn gaussian_draw(stream: &RngStream, n: usize, dim: usize) -> Result<DMatrix<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "gaussian_draw: dimension must be positive".into(),
        ));
    }
    let mut rng = stream.rng();
    Ok(gaussian_draw_with(&mut rng, dim, n))
}

/// As [`gaussian_draw`], but consuming an existing generator's state —
/// for actors that draw noise sequentially over many steps from one
/// persistent stream. Columns are particles; entries are filled
/// column-major, `dim` values per column.
pub fn gaussian_draw_with<R: Rng>(rng: &mut R, dim: usize, n: usize) -> DMatrix<f64> {
    assert!(dim > 0, "gaussian_draw_with: dimension must be positive");
    DMatrix::from_fn(dim, n, |_, _| rng.sample(StandardNormal))
}

/// One exponential waiting time with the given rate, by inversion of the
/// survival function. Consumes exactly one 64-bit word of the stream.
///
/// # Panics
/// If `rate` is not strictly positive and finite.
pub fn exp_waiting_time(stream: &RngStream, rate: f64) -> f64 {
    assert!(rate > 0.0 && rate.is_finite(), "waiting-time rate must be positive");
    let u: f64 = stream.rng().gen();
    // u is in [0, 1), so 1 - u is in (0, 1] and the logarithm is finite.
    -(1.0 - u).ln() / rate
}
