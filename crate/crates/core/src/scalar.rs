//! Scalar abstraction and deterministic sampling utilities.
//!
//! Every numeric component in this crate is generic over [`Scalar`] so the
//! same code runs in `f64` (the default) or `f32` (opt-in via run
//! configuration). Random draws go through the helpers here so that a seeded
//! generator fully determines every sampled stream.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Floating-point scalar used by all numeric code in this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Widening (for `f32`) or identity (for `f64`) conversion used when
    /// serializing and reporting values.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar value representable as f64")
    }

    /// Draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        real(standard_normal_f64(rng))
    }

    /// Draw uniformly from `[low, high)`.
    fn uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> Self {
        real(rng.gen_range(low..high))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the active scalar type.
///
/// Panics on values outside the target type's range; configuration constants
/// are always small finite numbers, so this is a programming-error guard,
/// not a runtime error path.
pub fn real<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant convertible to the active scalar type")
}

/// Standard-normal draw via the Box–Muller transform.
///
/// Implemented directly (rather than through a distribution crate) so the
/// sampled stream is a fixed function of the generator state: every call
/// consumes exactly two uniform draws.
pub fn standard_normal_f64<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // gen::<f64>() yields [0, 1); flip to (0, 1] so the logarithm is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministically derive an independent generator for one named purpose
/// of a run (network init, action sampling, replay sampling, ...).
///
/// All generators of a run share the master seed and differ only in the
/// stream id, so a `(config, seed)` pair pins every random draw of the run.
pub fn seeded_stream(master_seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}
