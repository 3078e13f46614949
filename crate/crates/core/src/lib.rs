//! Multi-agent soft actor–critic with collective influence estimation.
//!
//! This crate trains teams of decentralized reinforcement-learning agents to
//! cooperatively lift a rigid disk: each of `N` robot arms grips the disk rim
//! at a fixed angular station and controls its own vertical, radial, and grip
//! displacements. The shared reward favors raising the disk while keeping it
//! level, so agents must coordinate without communicating.
//!
//! Three training modes are provided:
//!
//! * `centralized` — a single soft actor–critic controller over the joint
//!   observation and joint action (upper baseline),
//! * `cien_sac` — fully decentralized agents, each augmenting its local
//!   observation with a learned 2-d *collective influence* vector inferred
//!   from the task-object state alone,
//! * `independent` — the same decentralized agents with no influence
//!   estimator (lower baseline).
//!
//! The numeric core ([`nn`], [`env`], [`cien`], [`sac`], [`replay`]) is
//! generic over the scalar type through [`Scalar`]; double precision is the
//! default and single precision is available behind a run-configuration
//! switch. Concrete `f32`/`f64` aliases for the main types live at the crate
//! root.
//!
//! Everything is deterministic: a run is a pure function of its
//! configuration and seed, down to the bytes of the emitted metrics and
//! checkpoint files.

pub mod cien;
pub mod env;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod sac;
pub mod scalar;

pub use scalar::{real, Scalar};

/// Default precision for all training arithmetic.
pub type Real = f64;

/// Double-precision dense network (the default).
pub type DenseNetwork64 = nn::DenseNetwork<f64>;
/// Single-precision dense network.
pub type DenseNetwork32 = nn::DenseNetwork<f32>;

/// Double-precision environment state (the default).
pub type EnvState64 = env::EnvState<f64>;
/// Single-precision environment state.
pub type EnvState32 = env::EnvState<f32>;

/// Double-precision replay buffer (the default).
pub type ReplayBuffer64 = replay::ReplayBuffer<f64>;
/// Single-precision replay buffer.
pub type ReplayBuffer32 = replay::ReplayBuffer<f32>;

/// Double-precision squashed-Gaussian policy (the default).
pub type GaussianPolicy64 = sac::GaussianPolicy<f64>;
/// Single-precision squashed-Gaussian policy.
pub type GaussianPolicy32 = sac::GaussianPolicy<f32>;

/// Double-precision twin critic pair (the default).
pub type TwinCritics64 = sac::TwinCritics<f64>;
/// Single-precision twin critic pair.
pub type TwinCritics32 = sac::TwinCritics<f32>;

/// Double-precision collective influence estimator (the default).
pub type InfluenceEstimator64 = cien::InfluenceEstimator<f64>;
/// Single-precision collective influence estimator.
pub type InfluenceEstimator32 = cien::InfluenceEstimator<f32>;

/// Double-precision fleet of learners (the default).
pub type Fleet64 = harness::Fleet<f64>;
/// Single-precision fleet of learners.
pub type Fleet32 = harness::Fleet<f32>;
