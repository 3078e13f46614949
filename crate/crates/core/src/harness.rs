//! Experiment orchestration: run configuration, per-mode network
//! construction, the training loop (critic updates every step, actor /
//! influence / target updates every `actor_delay` steps), deterministic
//! evaluation, observation-noise fine-tuning, checkpointing, and gradient
//! verification.
//!
//! Three training modes share one loop:
//!
//! * `centralized`  — one composite agent controlling every arm (full state,
//!   joint action).
//! * `cien_sac`     — one learner per arm, each with its own influence
//!   estimator; the only cross-agent signal is the shared object state.
//! * `independent`  — one learner per arm with no influence estimation.
//!
//! Every run is fully determined by `(config, seed)`: all randomness flows
//! from per-purpose, per-agent ChaCha streams derived from the seed, so
//! metrics files and checkpoints rerun bit-identically.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::{fs, io, thread};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cien::{CienError, InfluenceBatchItem, InfluenceEstimator, INFLUENCE_DIM};
use crate::env::{
    self, EnvConfig, EnvError, EnvState, NoiseConfig, ObserveMode, TerminationReason,
    TrajectoryRow, ACTION_DIM, ARM_STATE_DIM, OBJECT_STATE_DIM,
};
use crate::nn::{Activation, DenseNetwork, NnError, OutputHead, REL_ERROR_FLOOR};
use crate::replay::{ReplayBuffer, ReplayError, Transition, TransitionDims};
use crate::sac::{
    actor_objective_and_grad, actor_update, critic_loss_and_grad, critic_update,
    synchronize_targets, td_target, GaussianPolicy, SacError, SacHyper, TwinCritics,
};
use crate::scalar::{real, seeded_stream, Scalar};

/// Metrics CSV schema, one row per training episode.
pub const METRICS_HEADER: &str =
    "episode,return,final_height,final_tilt,terminated_reason,critic_loss_mean,actor_objective_mean";

/// Trajectory CSV schema, one row per environment step.
pub const TRAJECTORY_HEADER: &str = "step,height_m,tilt_rad,reward,terminated,reason";

/// Checkpoint format tag; bumped on incompatible layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Environment variable capping how many seeds train concurrently.
pub const THREADS_ENV_VAR: &str = "CIEN_MARL_THREADS";

/// Central-difference step used by [`gradcheck`].
pub const GRADCHECK_EPS: f64 = 1e-6;

/// Worst acceptable relative error in [`gradcheck`].
pub const GRADCHECK_THRESHOLD: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Training mode: who controls what, and what each learner sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One composite agent: full state (all arms + object), joint action.
    Centralized,
    /// Per-arm learners, each with an influence estimator.
    CienSac,
    /// Per-arm learners with no influence estimation.
    Independent,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Centralized => "centralized",
            Mode::CienSac => "cien_sac",
            Mode::Independent => "independent",
        }
    }
}

/// Floating-point width used for all learnable parameters and arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

/// Hidden-layer widths for the three network families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkWidths {
    pub actor: Vec<usize>,
    pub critic: Vec<usize>,
    pub influence: Vec<usize>,
}

impl NetworkWidths {
    /// Published per-mode widths: 512-wide actor/critic for the centralized
    /// agent, 256-wide for per-arm learners, 128-wide influence estimator.
    pub fn preset(mode: Mode) -> Self {
        let (a, c) = match mode {
            Mode::Centralized => (512, 512),
            Mode::CienSac | Mode::Independent => (256, 256),
        };
        Self {
            actor: vec![a, a],
            critic: vec![c, c],
            influence: vec![128, 128],
        }
    }
}

/// Fine-tuning stage: continue a trained checkpoint under observation noise
/// with a lowered height target and a fresh replay buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    /// Checkpoint to continue from.
    pub source_checkpoint: PathBuf,
    /// Additional training episodes.
    #[serde(default = "default_extra_episodes")]
    pub extra_episodes: usize,
    /// Success threshold (and recorded target height) for this stage.
    #[serde(default = "default_reduced_target")]
    pub reduced_target_height: f64,
}

fn default_extra_episodes() -> usize {
    2000
}

fn default_reduced_target() -> f64 {
    1.25
}

/// One experiment: mode, environment, learner hyperparameters, and the
/// training/evaluation protocol. Parsed from a TOML document; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub precision: Precision,
    /// Training episode budget per seed.
    pub episodes: usize,
    /// Every seed trains an independent run; artifacts are per-seed.
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub hyper: SacHyper,
    /// Hidden widths; `None` selects the published per-mode preset.
    pub widths: Option<NetworkWidths>,
    /// Observation noise applied during training (never during evaluation).
    pub noise: Option<NoiseConfig>,
    pub fine_tune: Option<FineTuneConfig>,
    pub out_dir: PathBuf,
    /// Environment steps driven by uniform-random actions before the policy
    /// takes over. Learning starts as soon as a buffer holds a full batch.
    pub warmup_steps: u64,
    /// Critic updates per agent per environment step.
    pub updates_per_step: usize,
    /// Episodes between deterministic evaluations (0 = final only).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// A run succeeds when the noiseless-evaluation mean final height
    /// reaches this.
    pub success_height: f64,
    /// Optional extra success condition: the evaluation's largest observed
    /// tilt must stay below this bound. Balanced-lifting stages (the noise
    /// fine-tune) gate on it; plain height-seeking runs leave it off.
    pub success_max_tilt: Option<f64>,
    /// Stop training at the first successful evaluation.
    pub early_stop: bool,
    /// Episodes between checkpoint saves (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CienSac,
            precision: Precision::F64,
            episodes: 5000,
            seeds: vec![0],
            env: EnvConfig::default(),
            hyper: SacHyper::default(),
            widths: None,
            noise: None,
            fine_tune: None,
            out_dir: PathBuf::from("runs"),
            warmup_steps: 1000,
            updates_per_step: 1,
            eval_every: 50,
            eval_episodes: 10,
            success_height: 1.30,
            success_max_tilt: None,
            early_stop: true,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let h = &self.hyper;
        if !(h.gamma > 0.0 && h.gamma < 1.0) {
            return Err(HarnessError::Config(format!("gamma {} outside (0, 1)", h.gamma)));
        }
        if !(h.tau > 0.0 && h.tau <= 1.0) {
            return Err(HarnessError::Config(format!("tau {} outside (0, 1]", h.tau)));
        }
        if h.alpha < 0.0 {
            return Err(HarnessError::Config(format!("alpha {} negative", h.alpha)));
        }
        if h.batch_size == 0 || h.buffer_capacity < h.batch_size {
            return Err(HarnessError::Config(format!(
                "batch size {} must be >= 1 and <= buffer capacity {}",
                h.batch_size, h.buffer_capacity
            )));
        }
        if h.actor_delay == 0 {
            return Err(HarnessError::Config("actor_delay must be >= 1".into()));
        }
        if h.adam.learning_rate <= 0.0 {
            return Err(HarnessError::Config("learning rate must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.eval_episodes == 0 {
            return Err(HarnessError::Config("eval_episodes must be >= 1".into()));
        }
        if !self.success_height.is_finite() {
            return Err(HarnessError::Config("success_height must be finite".into()));
        }
        if let Some(bound) = self.success_max_tilt {
            if !bound.is_finite() || bound <= 0.0 {
                return Err(HarnessError::Config(
                    "success_max_tilt must be a positive finite angle".into(),
                ));
            }
        }
        if self.fine_tune.is_some() && self.noise.is_none() {
            return Err(HarnessError::Config(
                "fine_tune requires a [noise] section (use zero sigmas for noiseless)".into(),
            ));
        }
        Ok(())
    }

    /// Parse a TOML document into a config; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration or unreadable/invalid input files.
    #[error("configuration: {0}")]
    Config(String),
    /// Failure while a run is executing (non-finite losses, write failures).
    #[error("runtime: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for HarnessError {
            fn from(e: $ty) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(NnError, SacError, CienError, ReplayError, EnvError);

fn read_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("cannot read {}: {e}", path.display()))
}

fn write_err(path: &Path, e: io::Error) -> HarnessError {
    HarnessError::Runtime(format!("cannot write {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Mode geometry and fleet construction
// ---------------------------------------------------------------------------

/// Input/output widths implied by a mode at a given team size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeDims {
    /// Independent learners ("controllers"): 1 for centralized, N otherwise.
    pub controllers: usize,
    /// Width of the local (arm) observation slice per controller.
    pub local_obs: usize,
    /// Action width per controller.
    pub action: usize,
    /// Influence width, when the mode carries an estimator.
    pub influence: Option<usize>,
}

impl ModeDims {
    pub fn actor_input(&self) -> usize {
        self.local_obs + OBJECT_STATE_DIM + self.influence.unwrap_or(0)
    }

    pub fn critic_input(&self) -> usize {
        self.actor_input() + self.action
    }

    pub fn transition_dims(&self) -> TransitionDims {
        TransitionDims {
            local_obs: self.local_obs,
            object_obs: OBJECT_STATE_DIM,
            action: self.action,
            influence: self.influence,
        }
    }
}

pub fn mode_dims(mode: Mode, n_agents: usize) -> ModeDims {
    match mode {
        Mode::Centralized => ModeDims {
            controllers: 1,
            local_obs: ARM_STATE_DIM * n_agents,
            action: ACTION_DIM * n_agents,
            influence: None,
        },
        Mode::CienSac => ModeDims {
            controllers: n_agents,
            local_obs: ARM_STATE_DIM,
            action: ACTION_DIM,
            influence: Some(INFLUENCE_DIM),
        },
        Mode::Independent => ModeDims {
            controllers: n_agents,
            local_obs: ARM_STATE_DIM,
            action: ACTION_DIM,
            influence: None,
        },
    }
}

/// One learner: policy, twin critics, and (CIEN-SAC only) an influence
/// estimator, all tagged with the owning controller index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent<T> {
    pub owner: usize,
    pub policy: GaussianPolicy<T>,
    pub critics: TwinCritics<T>,
    pub influence: Option<InfluenceEstimator<T>>,
}

/// Every controller of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet<T> {
    pub mode: Mode,
    pub n_agents: usize,
    pub agents: Vec<Agent<T>>,
}

/// Build freshly initialized networks for a mode. Network shapes depend
/// only on `(mode, n_agents, widths)`; the influence estimator's shape is
/// independent even of `n_agents`.
pub fn build_fleet<T: Scalar>(
    mode: Mode,
    env_cfg: &EnvConfig,
    widths: &NetworkWidths,
    rng: &mut impl Rng,
) -> Result<Fleet<T>, HarnessError> {
    let dims = mode_dims(mode, env_cfg.n_agents);
    let mut agents = Vec::with_capacity(dims.controllers);
    for owner in 0..dims.controllers {
        let policy = GaussianPolicy::new(
            dims.actor_input(),
            dims.action,
            &widths.actor,
            env_cfg.action_bound,
            rng,
        )?;
        let critics = TwinCritics::new(dims.critic_input(), &widths.critic, rng)?;
        let influence = match mode {
            Mode::CienSac => Some(InfluenceEstimator::new(&widths.influence, rng)?),
            _ => None,
        };
        agents.push(Agent {
            owner,
            policy,
            critics,
            influence,
        });
    }
    Ok(Fleet {
        mode,
        n_agents: env_cfg.n_agents,
        agents,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Self-describing snapshot of one seed's fleet: metadata header plus every
/// network and optimizer state. JSON round-trips are bit-identical.
/// Replay buffers are deliberately not persisted (fine-tuning starts fresh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub mode: Mode,
    pub n_agents: usize,
    pub precision: Precision,
    pub env: EnvConfig,
    pub hyper: SacHyper,
    pub success_height: f64,
    pub seed: u64,
    pub episodes_trained: usize,
    pub total_env_steps: u64,
    pub agents: Vec<Agent<T>>,
}

impl<T> Checkpoint<T> {
    pub fn fleet(self) -> Fleet<T> {
        Fleet {
            mode: self.mode,
            n_agents: self.n_agents,
            agents: self.agents,
        }
    }
}

pub fn save_checkpoint<T: Scalar + Serialize>(
    path: &Path,
    checkpoint: &Checkpoint<T>,
) -> Result<(), HarnessError> {
    let body = serde_json::to_string(checkpoint)
        .map_err(|e| HarnessError::Runtime(format!("checkpoint encode: {e}")))?;
    fs::write(path, body).map_err(|e| write_err(path, e))
}

pub fn load_checkpoint<T: Scalar + DeserializeOwned>(
    path: &Path,
) -> Result<Checkpoint<T>, HarnessError> {
    let body = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    let checkpoint: Checkpoint<T> =
        serde_json::from_str(&body).map_err(|e| read_err(path, e))?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(HarnessError::Config(format!(
            "checkpoint {} has format version {}, expected {}",
            path.display(),
            checkpoint.format_version,
            CHECKPOINT_VERSION
        )));
    }
    let dims = mode_dims(checkpoint.mode, checkpoint.n_agents);
    if checkpoint.agents.len() != dims.controllers
        || checkpoint.agents.iter().any(|a| {
            a.policy.obs_dim() != dims.actor_input()
                || a.critics.input_dim() != dims.critic_input()
                || a.influence.is_some() != dims.influence.is_some()
        })
    {
        return Err(HarnessError::Config(format!(
            "checkpoint {} is inconsistent with its own mode metadata",
            path.display()
        )));
    }
    Ok(checkpoint)
}

/// Peek only the precision tag, so callers can dispatch the generic loader.
pub fn checkpoint_precision(path: &Path) -> Result<Precision, HarnessError> {
    #[derive(Deserialize)]
    struct Probe {
        precision: Precision,
    }
    let body = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    let probe: Probe = serde_json::from_str(&body).map_err(|e| read_err(path, e))?;
    Ok(probe.precision)
}

// ---------------------------------------------------------------------------
// Run outputs
// ---------------------------------------------------------------------------

/// Per-seed training outcome, also written as `<stem>_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    /// Episodes actually completed (early stop may end the run short).
    pub episodes: usize,
    pub success: bool,
    pub final_eval_height_mean: f64,
    pub final_eval_tilt_mean: f64,
    pub final_eval_max_tilt: f64,
    pub episodes_to_success: Option<usize>,
    pub total_env_steps: u64,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub isolation_checks: u64,
    pub isolation_violations: u64,
    pub eval_history: Vec<EvalPoint>,
    pub checkpoint: String,
}

/// One interim evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub episode: usize,
    pub mean_final_height: f64,
    /// Largest tilt seen in any evaluation episode.
    pub max_tilt: f64,
}

/// The run-level success predicate: the evaluation must lift high enough
/// and, when a tilt gate is configured, keep the disk level throughout.
fn eval_succeeds(summary: &EvalSummary, config: &RunConfig) -> bool {
    summary.mean_final_height >= config.success_height
        && config
            .success_max_tilt
            .is_none_or(|bound| summary.max_tilt < bound)
}

/// Deterministic-evaluation aggregate over a set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_final_height: f64,
    pub mean_final_tilt: f64,
    /// Mean over episodes of the per-episode tilt maximum.
    pub mean_max_tilt: f64,
    /// Largest tilt seen in any episode.
    pub max_tilt: f64,
    pub mean_length: f64,
    /// Fraction of episodes whose final height reached the success
    /// threshold.
    pub success_rate: f64,
}

/// Result of evaluating a stored checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub summary: EvalSummary,
}

// ---------------------------------------------------------------------------
// Cross-agent isolation audit
// ---------------------------------------------------------------------------

/// Instrumentation that every per-agent operation passes through: each check
/// asserts that all components touched belong to the acting controller.
/// Decentralized training is only honest if this never fires.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IsolationAudit {
    checks: u64,
    violations: u64,
}

impl IsolationAudit {
    fn record(&mut self, acting: usize, owners: &[usize]) {
        self.checks += 1;
        if owners.iter().any(|&o| o != acting) {
            self.violations += 1;
        }
    }

    pub fn checks(&self) -> u64 {
        self.checks
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }
}

// ---------------------------------------------------------------------------
// Training internals
// ---------------------------------------------------------------------------

// Stream purposes for per-seed ChaCha RNGs; combined with the controller
// index so every (purpose, agent) pair draws from its own stream.
const STREAM_INIT: u64 = 0;
const STREAM_EXPLORE: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_REPLAY: u64 = 3;
const STREAM_TD: u64 = 4;
const STREAM_ACTOR: u64 = 5;
const STREAM_OBS_NOISE: u64 = 6;

fn agent_stream(purpose: u64, agent: usize) -> u64 {
    purpose | ((agent as u64 + 1) << 8)
}

/// Mutable per-controller training state that is not part of a checkpoint.
struct AgentRuntime<T> {
    owner: usize,
    buffer: ReplayBuffer<T>,
    update_count: u64,
    critic_updates: u64,
    actor_updates: u64,
    rng_explore: ChaCha12Rng,
    rng_warmup: ChaCha12Rng,
    rng_replay: ChaCha12Rng,
    rng_td: ChaCha12Rng,
    rng_actor: ChaCha12Rng,
    rng_noise: ChaCha12Rng,
}

impl<T: Scalar> AgentRuntime<T> {
    fn new(owner: usize, seed: u64, capacity: usize, dims: TransitionDims) -> Self {
        Self {
            owner,
            buffer: ReplayBuffer::new(capacity, dims),
            update_count: 0,
            critic_updates: 0,
            actor_updates: 0,
            rng_explore: seeded_stream(seed, agent_stream(STREAM_EXPLORE, owner)),
            rng_warmup: seeded_stream(seed, agent_stream(STREAM_WARMUP, owner)),
            rng_replay: seeded_stream(seed, agent_stream(STREAM_REPLAY, owner)),
            rng_td: seeded_stream(seed, agent_stream(STREAM_TD, owner)),
            rng_actor: seeded_stream(seed, agent_stream(STREAM_ACTOR, owner)),
            rng_noise: seeded_stream(seed, agent_stream(STREAM_OBS_NOISE, owner)),
        }
    }
}

/// One controller's view of the world at one step: observation split into
/// slices plus the influence estimate that will ride along in the stored
/// transition.
#[derive(Debug, Clone)]
struct View<T> {
    local: Vec<T>,
    object: Vec<T>,
    influence: Option<[T; 2]>,
}

impl<T: Scalar> View<T> {
    fn policy_obs(&self) -> Vec<T> {
        let inf: &[T] = self.influence.as_ref().map_or(&[], |c| &c[..]);
        let mut obs = Vec::with_capacity(self.local.len() + self.object.len() + inf.len());
        obs.extend_from_slice(&self.local);
        obs.extend_from_slice(&self.object);
        obs.extend_from_slice(inf);
        obs
    }
}

fn observe_mode(mode: Mode, controller: usize) -> ObserveMode {
    match mode {
        Mode::Centralized => ObserveMode::Centralized,
        _ => ObserveMode::Decentralized(controller),
    }
}

/// Affine standardization of an observation, in place, by the task's own
/// constants: grasp deviations by their safety half-width, heights (relative
/// to the start) by the initial height, grips by their band, velocities by
/// the action bound, tilt by its limit. Every network input then varies on
/// the order of one. Without this the radial-grasp slot — whose live range
/// is the `2 * grip_deviation_delta` band — is numerically invisible next to
/// meter-scale heights, and the critics need far more updates to resolve the
/// termination cliff than to track the reward. Only constants that staging
/// never rewrites may appear here: a fine-tune run must feed a loaded
/// checkpoint the exact representation it was trained on.
fn standardize_obs<T: Scalar>(local: &mut [T], object: &mut [T], cfg: &EnvConfig) {
    let radial0 = real::<T>(cfg.grasp_radius);
    let radial_scale = real::<T>(cfg.grip_deviation_delta);
    let height0 = real::<T>(cfg.initial_height);
    let height_scale = real::<T>(cfg.initial_height.abs().max(f64::EPSILON));
    let grip_scale = real::<T>(env::GRIP_BAND);
    let vel_scale = real::<T>(cfg.action_bound);
    let tilt_scale = real::<T>(cfg.tilt_limit);
    for arm in local.chunks_exact_mut(ARM_STATE_DIM) {
        arm[0] = (arm[0] - radial0) / radial_scale;
        arm[1] = (arm[1] - height0) / height_scale;
        arm[2] = arm[2] / grip_scale;
        for v in &mut arm[3..ARM_STATE_DIM] {
            *v = *v / vel_scale;
        }
    }
    object[0] = (object[0] - height0) / height_scale;
    object[1] = object[1] / tilt_scale;
}

/// Observe the environment for one controller, optionally through sensor
/// noise, and estimate the collective influence from the (possibly noisy)
/// object slice with the controller's own online estimator. Noise is applied
/// in physical units, then the observation is standardized (see
/// [`standardize_obs`]); the estimator and both networks always see the
/// standardized form.
fn observe_view<T: Scalar>(
    state: &EnvState<T>,
    mode: Mode,
    controller: usize,
    cfg: &EnvConfig,
    noise: Option<(&NoiseConfig, &mut ChaCha12Rng)>,
    estimator: Option<&InfluenceEstimator<T>>,
) -> Result<View<T>, HarnessError> {
    let raw = env::observe(state, observe_mode(mode, controller))?;
    let mut obs = match noise {
        Some((noise_cfg, rng)) => env::noisy_observe(&raw, noise_cfg, rng),
        None => raw,
    };
    let split = obs.len() - OBJECT_STATE_DIM;
    let (local_slice, object_slice) = obs.split_at_mut(split);
    standardize_obs(local_slice, object_slice, cfg);
    let object = object_slice.to_vec();
    let influence = match estimator {
        Some(est) => Some(est.estimate(&object, false)?),
        None => None,
    };
    let mut local = obs;
    local.truncate(split);
    Ok(View {
        local,
        object,
        influence,
    })
}

/// Aggregated losses from one agent's updates during one episode.
#[derive(Debug, Clone, Copy, Default)]
struct UpdateStats {
    critic_loss_sum: f64,
    critic_n: u64,
    actor_objective_sum: f64,
    actor_n: u64,
}

impl UpdateStats {
    fn merge(&mut self, other: UpdateStats) {
        self.critic_loss_sum += other.critic_loss_sum;
        self.critic_n += other.critic_n;
        self.actor_objective_sum += other.actor_objective_sum;
        self.actor_n += other.actor_n;
    }
}

/// Run `updates` full update iterations for one agent: sample a minibatch,
/// update both critics, and on every `actor_delay`-th iteration also update
/// the actor, the influence estimator (when present), and all target
/// networks. Skips silently while the buffer holds less than a batch.
fn update_agent<T: Scalar>(
    agent: &mut Agent<T>,
    runtime: &mut AgentRuntime<T>,
    hyper: &SacHyper,
    updates: usize,
) -> Result<UpdateStats, HarnessError> {
    let mut stats = UpdateStats::default();
    if runtime.buffer.len() < hyper.batch_size {
        return Ok(stats);
    }
    for _ in 0..updates {
        let batch = runtime.buffer.sample(hyper.batch_size, &mut runtime.rng_replay)?;
        let targets = td_target(
            &batch,
            &agent.critics,
            &agent.policy,
            agent.influence.as_ref(),
            hyper,
            &mut runtime.rng_td,
        )?;
        let (loss1, loss2) = critic_update(&mut agent.critics, &batch, &targets, hyper)?;
        runtime.update_count += 1;
        runtime.critic_updates += 1;
        stats.critic_loss_sum += 0.5 * (loss1.as_f64() + loss2.as_f64());
        stats.critic_n += 1;

        if runtime.update_count.is_multiple_of(hyper.actor_delay) {
            let objective = actor_update(
                &mut agent.policy,
                agent.critics.q1(),
                &batch,
                hyper,
                &mut runtime.rng_actor,
            )?;
            if let Some(est) = agent.influence.as_mut() {
                let items: Vec<InfluenceBatchItem<'_, T>> = batch
                    .iter()
                    .map(|t| InfluenceBatchItem {
                        local_obs: &t.local_obs,
                        object_obs: &t.object_obs,
                        action: &t.action,
                    })
                    .collect();
                crate::cien::update_estimator(est, agent.critics.q1(), &items, &hyper.adam)?;
            }
            synchronize_targets(&mut agent.critics, hyper.tau)?;
            if let Some(est) = agent.influence.as_mut() {
                est.sync_target(hyper.tau)?;
            }
            runtime.actor_updates += 1;
            stats.actor_objective_sum += objective.as_f64();
            stats.actor_n += 1;
        }
    }
    Ok(stats)
}

/// Everything that happened in one training episode, condensed to one
/// metrics row.
struct EpisodeRecord {
    ep_return: f64,
    length: u64,
    final_height: f64,
    final_tilt: f64,
    reason: TerminationReason,
    stats: UpdateStats,
}

struct Trainer<'a, T: Scalar> {
    config: &'a RunConfig,
    seed: u64,
    fleet: Fleet<T>,
    runtimes: Vec<AgentRuntime<T>>,
    audit: IsolationAudit,
    total_env_steps: u64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(
        config: &'a RunConfig,
        seed: u64,
        initial: Option<&Fleet<T>>,
    ) -> Result<Self, HarnessError> {
        let dims = mode_dims(config.mode, config.env.n_agents);
        let fleet = match initial {
            Some(f) => f.clone(),
            None => {
                let widths = config
                    .widths
                    .clone()
                    .unwrap_or_else(|| NetworkWidths::preset(config.mode));
                let mut rng = seeded_stream(seed, STREAM_INIT);
                build_fleet(config.mode, &config.env, &widths, &mut rng)?
            }
        };
        let runtimes = (0..dims.controllers)
            .map(|owner| {
                AgentRuntime::new(
                    owner,
                    seed,
                    config.hyper.buffer_capacity,
                    dims.transition_dims(),
                )
            })
            .collect();
        Ok(Self {
            config,
            seed,
            fleet,
            runtimes,
            audit: IsolationAudit::default(),
            total_env_steps: 0,
        })
    }

    fn observe_all(&mut self, state: &EnvState<T>) -> Result<Vec<View<T>>, HarnessError> {
        let mode = self.fleet.mode;
        let noise = self.config.noise.as_ref();
        self.fleet
            .agents
            .iter()
            .zip(self.runtimes.iter_mut())
            .enumerate()
            .map(|(i, (agent, runtime))| {
                self.audit.record(i, &[agent.owner, runtime.owner]);
                observe_view(
                    state,
                    mode,
                    agent.owner,
                    &self.config.env,
                    noise.map(|cfg| (cfg, &mut runtime.rng_noise)),
                    agent.influence.as_ref(),
                )
            })
            .collect()
    }

    /// Run one episode end to end: act, store, update.
    fn run_episode(&mut self) -> Result<EpisodeRecord, HarnessError> {
        // Copy the reference out of `self` so config reads do not conflict
        // with the mutable borrows below.
        let config = self.config;
        let env_cfg = &config.env;
        let hyper = &config.hyper;
        let mut state = env::reset::<T>(env_cfg, self.seed)?;
        let mut views = self.observe_all(&state)?;
        let mut record = EpisodeRecord {
            ep_return: 0.0,
            length: 0,
            final_height: state.object.height.as_f64(),
            final_tilt: state.object.tilt.as_f64(),
            reason: TerminationReason::Horizon,
            stats: UpdateStats::default(),
        };

        // Warm-up actions are uniform within a per-episode random fraction of
        // the bound. Full-scale episodes probe the single-step termination
        // thresholds but end almost immediately; small-scale ones live long
        // enough to random-walk across the interior of the safety bands, so
        // the critics see position-dependent danger, not just action size.
        let warmup_scales: Option<Vec<f64>> = if self.total_env_steps < config.warmup_steps {
            Some(
                self.runtimes
                    .iter_mut()
                    .map(|r| f64::uniform(&mut r.rng_warmup, 0.1, 1.0))
                    .collect(),
            )
        } else {
            None
        };

        loop {
            // Act: uniform exploration during warm-up, the policy afterward.
            let warmup = self.total_env_steps < config.warmup_steps;
            let bound = env_cfg.action_bound;
            let mut actions: Vec<Vec<T>> = Vec::with_capacity(self.fleet.agents.len());
            for (i, (agent, runtime)) in self
                .fleet
                .agents
                .iter()
                .zip(self.runtimes.iter_mut())
                .enumerate()
            {
                self.audit.record(i, &[agent.owner, runtime.owner]);
                let action = if warmup {
                    let span = warmup_scales.as_ref().map_or(bound, |s| s[i] * bound);
                    (0..agent.policy.action_dim())
                        .map(|_| T::uniform(&mut runtime.rng_warmup, -span, span))
                        .collect()
                } else {
                    agent
                        .policy
                        .sample(&views[i].policy_obs(), &mut runtime.rng_explore)?
                        .action
                };
                actions.push(action);
            }

            let env_actions = to_env_actions(self.fleet.mode, env_cfg.n_agents, &actions);
            let result = env::step(&mut state, &env_actions, env_cfg)?;
            self.total_env_steps += 1;
            record.length += 1;
            record.ep_return += result.reward.as_f64();
            record.final_height = result.object.height.as_f64();
            record.final_tilt = result.object.tilt.as_f64();

            // Store: the pre-step views become the transitions' observations.
            let next_views = self.observe_all(&state)?;
            let done = result.terminated && result.reason.is_safety();
            let old_views = std::mem::replace(&mut views, next_views);
            for (i, ((old, action), (agent, runtime))) in old_views
                .into_iter()
                .zip(actions)
                .zip(self.fleet.agents.iter().zip(self.runtimes.iter_mut()))
                .enumerate()
            {
                self.audit.record(i, &[agent.owner, runtime.owner]);
                // Stored actions are unit-scaled (action / bound), matching
                // the standardized observation slots the critics train on.
                let unit_bound = real::<T>(env_cfg.action_bound);
                runtime.buffer.push(Transition {
                    local_obs: old.local,
                    object_obs: old.object,
                    action: action.iter().map(|&a| a / unit_bound).collect(),
                    influence: old.influence.map(|c| c.to_vec()),
                    reward: result.reward,
                    next_local_obs: views[i].local.clone(),
                    next_object_obs: views[i].object.clone(),
                    done,
                })?;
            }

            // Update: critics every step, actor/influence/targets every
            // `actor_delay`-th update, each agent strictly from its own
            // components.
            for (i, (agent, runtime)) in self
                .fleet
                .agents
                .iter_mut()
                .zip(self.runtimes.iter_mut())
                .enumerate()
            {
                self.audit.record(i, &[agent.owner, runtime.owner]);
                let stats = update_agent(agent, runtime, hyper, config.updates_per_step)?;
                record.stats.merge(stats);
            }

            if result.terminated {
                record.reason = result.reason;
                return Ok(record);
            }
        }
    }

    fn checkpoint(&self, episodes_trained: usize) -> Checkpoint<T> {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            mode: self.fleet.mode,
            n_agents: self.fleet.n_agents,
            precision: self.config.precision,
            env: self.config.env.clone(),
            hyper: self.config.hyper,
            success_height: self.config.success_height,
            seed: self.seed,
            episodes_trained,
            total_env_steps: self.total_env_steps,
            agents: self.fleet.agents.clone(),
        }
    }
}

/// Regroup per-controller action vectors into the per-arm triples the
/// environment consumes (the centralized controller's joint action is split
/// back into arm slices).
fn to_env_actions<T: Scalar>(
    mode: Mode,
    n_agents: usize,
    actions: &[Vec<T>],
) -> Vec<[T; ACTION_DIM]> {
    let mut out = Vec::with_capacity(n_agents);
    match mode {
        Mode::Centralized => {
            for chunk in actions[0].chunks_exact(ACTION_DIM) {
                out.push([chunk[0], chunk[1], chunk[2]]);
            }
        }
        _ => {
            for a in actions {
                out.push([a[0], a[1], a[2]]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluate a fleet deterministically: squashed-mean actions, no exploration
/// noise, no observation noise, no learning. Returns the aggregate summary
/// and every episode's trajectory.
pub fn evaluate_fleet<T: Scalar>(
    fleet: &Fleet<T>,
    env_cfg: &EnvConfig,
    episodes: usize,
    success_height: f64,
) -> Result<(EvalSummary, Vec<Vec<TrajectoryRow>>), HarnessError> {
    assert!(episodes > 0, "evaluation needs at least one episode");
    let mut trajectories = Vec::with_capacity(episodes);
    let mut sum_return = 0.0;
    let mut sum_final_height = 0.0;
    let mut sum_final_tilt = 0.0;
    let mut sum_max_tilt = 0.0;
    let mut max_tilt = 0.0f64;
    let mut sum_length = 0.0;
    let mut successes = 0usize;

    for _ in 0..episodes {
        let mut state = env::reset::<T>(env_cfg, 0)?;
        let mut rows = Vec::new();
        let mut ep_max_tilt = 0.0f64;
        // The episode loop always takes at least one step before breaking.
        let (final_height, final_tilt);
        let mut ep_return = 0.0;
        loop {
            let mut actions: Vec<Vec<T>> = Vec::with_capacity(fleet.agents.len());
            for agent in &fleet.agents {
                let view = observe_view(
                    &state,
                    fleet.mode,
                    agent.owner,
                    env_cfg,
                    None,
                    agent.influence.as_ref(),
                )?;
                actions.push(agent.policy.deterministic_action(&view.policy_obs())?);
            }
            let env_actions = to_env_actions(fleet.mode, env_cfg.n_agents, &actions);
            let result = env::step(&mut state, &env_actions, env_cfg)?;
            let height = result.object.height.as_f64();
            let tilt = result.object.tilt.as_f64();
            ep_return += result.reward.as_f64();
            ep_max_tilt = ep_max_tilt.max(tilt);
            rows.push(TrajectoryRow {
                step: state.step_count,
                height_m: height,
                tilt_rad: tilt,
                reward: result.reward.as_f64(),
                terminated: result.terminated,
                reason: result.reason,
            });
            if result.terminated {
                final_height = height;
                final_tilt = tilt;
                break;
            }
        }
        sum_return += ep_return;
        sum_final_height += final_height;
        sum_final_tilt += final_tilt;
        sum_max_tilt += ep_max_tilt;
        max_tilt = max_tilt.max(ep_max_tilt);
        sum_length += rows.len() as f64;
        if final_height >= success_height {
            successes += 1;
        }
        trajectories.push(rows);
    }

    let n = episodes as f64;
    Ok((
        EvalSummary {
            episodes,
            mean_return: sum_return / n,
            mean_final_height: sum_final_height / n,
            mean_final_tilt: sum_final_tilt / n,
            mean_max_tilt: sum_max_tilt / n,
            max_tilt,
            mean_length: sum_length / n,
            success_rate: successes as f64 / n,
        },
        trajectories,
    ))
}

/// Load a checkpoint and evaluate it deterministically, optionally writing
/// per-episode trajectory CSVs and a summary JSON into `out_dir`.
pub fn evaluate_checkpoint(
    path: &Path,
    episodes: usize,
    out_dir: Option<&Path>,
    write_traces: bool,
    write_summary: bool,
) -> Result<EvalOutcome, HarnessError> {
    match checkpoint_precision(path)? {
        Precision::F64 => evaluate_checkpoint_typed::<f64>(path, episodes, out_dir, write_traces, write_summary),
        Precision::F32 => evaluate_checkpoint_typed::<f32>(path, episodes, out_dir, write_traces, write_summary),
    }
}

fn evaluate_checkpoint_typed<T: Scalar + DeserializeOwned>(
    path: &Path,
    episodes: usize,
    out_dir: Option<&Path>,
    write_traces: bool,
    write_summary: bool,
) -> Result<EvalOutcome, HarnessError> {
    let checkpoint = load_checkpoint::<T>(path)?;
    let env_cfg = checkpoint.env.clone();
    let seed = checkpoint.seed;
    let success_height = checkpoint.success_height;
    let fleet = checkpoint.fleet();
    let (summary, trajectories) = evaluate_fleet(&fleet, &env_cfg, episodes, success_height)?;
    let outcome = EvalOutcome {
        mode: fleet.mode,
        seed,
        summary,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| write_err(dir, e))?;
        let stem = format!("{}_seed{}", fleet.mode.as_str(), seed);
        if write_traces {
            for (i, rows) in trajectories.iter().enumerate() {
                let p = dir.join(format!("{stem}_eval_trace_ep{}.csv", i + 1));
                fs::write(&p, trajectory_csv(rows)).map_err(|e| write_err(&p, e))?;
            }
        }
        if write_summary {
            let p = dir.join(format!("{stem}_eval_summary.json"));
            write_json(&p, &outcome)?;
        }
    }
    Ok(outcome)
}

/// Render trajectory rows as CSV (schema [`TRAJECTORY_HEADER`]).
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.height_m, r.tilt_rad, r.reward, r.terminated, r.reason.as_str()
        ));
    }
    out
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), HarnessError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Runtime(format!("encode {}: {e}", path.display())))?;
    fs::write(path, body).map_err(|e| write_err(path, e))
}

// ---------------------------------------------------------------------------
// Top-level drivers
// ---------------------------------------------------------------------------

/// Train every seed in the config; returns per-seed summaries in seed order
/// and writes `<mode>_seed<k>_{metrics.csv, summary.json, ep<n>.json}` into
/// `out_dir`.
pub fn train(config: &RunConfig) -> Result<Vec<RunSummary>, HarnessError> {
    config.validate()?;
    match config.precision {
        Precision::F64 => run_seeds::<f64>(config, None),
        Precision::F32 => run_seeds::<f32>(config, None),
    }
}

/// [`train`], but every seed starts from the given fleet instead of fresh
/// networks (the fine-tuning entry path; also useful for tests).
pub fn train_from<T: Scalar + Serialize>(
    config: &RunConfig,
    initial: &Fleet<T>,
) -> Result<Vec<RunSummary>, HarnessError> {
    config.validate()?;
    run_seeds(config, Some(initial))
}

/// Continue a stored checkpoint under observation noise with a lowered
/// target height and a fresh replay buffer, per the config's `[fine_tune]`
/// section.
pub fn fine_tune(config: &RunConfig) -> Result<Vec<RunSummary>, HarnessError> {
    config.validate()?;
    let ft = config
        .fine_tune
        .as_ref()
        .ok_or_else(|| HarnessError::Config("fine-tune needs a [fine_tune] section".into()))?
        .clone();
    match checkpoint_precision(&ft.source_checkpoint)? {
        Precision::F64 => fine_tune_typed::<f64>(config, &ft),
        Precision::F32 => fine_tune_typed::<f32>(config, &ft),
    }
}

fn fine_tune_typed<T: Scalar + Serialize + DeserializeOwned>(
    config: &RunConfig,
    ft: &FineTuneConfig,
) -> Result<Vec<RunSummary>, HarnessError> {
    let checkpoint = load_checkpoint::<T>(&ft.source_checkpoint)?;
    if checkpoint.n_agents != config.env.n_agents {
        return Err(HarnessError::Config(format!(
            "checkpoint was trained with {} agents, config says {}",
            checkpoint.n_agents, config.env.n_agents
        )));
    }
    if checkpoint.mode != config.mode {
        return Err(HarnessError::Config(format!(
            "checkpoint mode {} does not match config mode {}",
            checkpoint.mode.as_str(),
            config.mode.as_str()
        )));
    }
    let mut stage = config.clone();
    stage.episodes = ft.extra_episodes;
    stage.env.target_height = ft.reduced_target_height;
    stage.success_height = ft.reduced_target_height;
    stage.warmup_steps = 0;
    let fleet = checkpoint.fleet();
    run_seeds(&stage, Some(&fleet))
}

/// How many seeds may train concurrently: the `CIEN_MARL_THREADS` variable,
/// defaulting to 1 (strictly serial).
pub fn worker_threads() -> Result<usize, HarnessError> {
    parse_threads(std::env::var(THREADS_ENV_VAR).ok().as_deref())
}

fn parse_threads(raw: Option<&str>) -> Result<usize, HarnessError> {
    match raw {
        None => Ok(1),
        Some(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "{THREADS_ENV_VAR} must be a positive integer, got {s:?}"
                ))
            }),
    }
}

fn run_seeds<T: Scalar + Serialize>(
    config: &RunConfig,
    initial: Option<&Fleet<T>>,
) -> Result<Vec<RunSummary>, HarnessError> {
    fs::create_dir_all(&config.out_dir).map_err(|e| write_err(&config.out_dir, e))?;
    let workers = worker_threads()?.min(config.seeds.len()).max(1);
    if workers == 1 {
        return config
            .seeds
            .iter()
            .map(|&seed| train_seed(config, seed, initial))
            .collect();
    }

    let slots: Vec<Mutex<Option<Result<RunSummary, HarnessError>>>> =
        config.seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= config.seeds.len() {
                    break;
                }
                let result = train_seed(config, config.seeds[i], initial);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("worker left a seed unprocessed")
        })
        .collect()
}

fn train_seed<T: Scalar + Serialize>(
    config: &RunConfig,
    seed: u64,
    initial: Option<&Fleet<T>>,
) -> Result<RunSummary, HarnessError> {
    let stem = format!("{}_seed{}", config.mode.as_str(), seed);
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut trainer = Trainer::new(config, seed, initial)?;
    let outcome = run_training(&mut trainer, &mut csv);

    // Metrics for completed episodes are flushed even when the run aborts.
    let metrics_path = config.out_dir.join(format!("{stem}_metrics.csv"));
    fs::write(&metrics_path, &csv).map_err(|e| write_err(&metrics_path, e))?;
    let state = outcome?;

    // Final evaluation (reused from the last interim one when nothing
    // trained since).
    let final_eval = match state.last_eval {
        Some((at, ref summary)) if at == state.episodes_completed => summary.clone(),
        _ => {
            evaluate_fleet(
                &trainer.fleet,
                &config.env,
                config.eval_episodes,
                config.success_height,
            )?
            .0
        }
    };
    let mut episodes_to_success = state.episodes_to_success;
    if episodes_to_success.is_none() && eval_succeeds(&final_eval, config) {
        episodes_to_success = Some(state.episodes_completed);
    }

    let checkpoint_name = format!("{stem}_ep{}.json", state.episodes_completed);
    save_checkpoint(
        &config.out_dir.join(&checkpoint_name),
        &trainer.checkpoint(state.episodes_completed),
    )?;

    let summary = RunSummary {
        mode: config.mode,
        seed,
        episodes: state.episodes_completed,
        success: episodes_to_success.is_some(),
        final_eval_height_mean: final_eval.mean_final_height,
        final_eval_tilt_mean: final_eval.mean_final_tilt,
        final_eval_max_tilt: final_eval.max_tilt,
        episodes_to_success,
        total_env_steps: trainer.total_env_steps,
        critic_updates: trainer.runtimes.iter().map(|r| r.critic_updates).sum(),
        actor_updates: trainer.runtimes.iter().map(|r| r.actor_updates).sum(),
        isolation_checks: trainer.audit.checks(),
        isolation_violations: trainer.audit.violations(),
        eval_history: state.eval_history,
        checkpoint: checkpoint_name,
    };
    write_json(&config.out_dir.join(format!("{stem}_summary.json")), &summary)?;
    Ok(summary)
}

struct TrainingState {
    episodes_completed: usize,
    episodes_to_success: Option<usize>,
    eval_history: Vec<EvalPoint>,
    last_eval: Option<(usize, EvalSummary)>,
}

fn run_training<T: Scalar + Serialize>(
    trainer: &mut Trainer<'_, T>,
    csv: &mut String,
) -> Result<TrainingState, HarnessError> {
    let config = trainer.config;
    let mut state = TrainingState {
        episodes_completed: 0,
        episodes_to_success: None,
        eval_history: Vec::new(),
        last_eval: None,
    };

    for ep in 0..config.episodes {
        let record = trainer.run_episode().map_err(|e| {
            HarnessError::Runtime(format!(
                "seed {}: aborted during episode {}: {e}",
                trainer.seed,
                ep + 1
            ))
        })?;
        state.episodes_completed = ep + 1;
        let critic_mean = if record.stats.critic_n > 0 {
            record.stats.critic_loss_sum / record.stats.critic_n as f64
        } else {
            0.0
        };
        let actor_mean = if record.stats.actor_n > 0 {
            record.stats.actor_objective_sum / record.stats.actor_n as f64
        } else {
            0.0
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            ep + 1,
            record.ep_return,
            record.final_height,
            record.final_tilt,
            record.reason.as_str(),
            critic_mean,
            actor_mean
        ));

        if config.checkpoint_every > 0 && (ep + 1) % config.checkpoint_every == 0 {
            let name = format!(
                "{}_seed{}_ep{}.json",
                config.mode.as_str(),
                trainer.seed,
                ep + 1
            );
            save_checkpoint(&config.out_dir.join(name), &trainer.checkpoint(ep + 1))?;
        }

        if config.eval_every > 0 && (ep + 1) % config.eval_every == 0 {
            let (summary, _) = evaluate_fleet(
                &trainer.fleet,
                &config.env,
                config.eval_episodes,
                config.success_height,
            )?;
            state.eval_history.push(EvalPoint {
                episode: ep + 1,
                mean_final_height: summary.mean_final_height,
                max_tilt: summary.max_tilt,
            });
            let succeeded = eval_succeeds(&summary, config);
            state.last_eval = Some((ep + 1, summary));
            if succeeded {
                state.episodes_to_success.get_or_insert(ep + 1);
                if config.early_stop {
                    break;
                }
            }
        }
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Worst finite-difference relative errors found by [`gradcheck`], per
/// network family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub worst_critic: f64,
    pub worst_actor: f64,
    pub worst_estimator: f64,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.worst_critic.max(self.worst_actor).max(self.worst_estimator)
    }

    pub fn pass(&self) -> bool {
        self.worst() < self.threshold
    }
}

/// Verify the three analytic training gradients (critic regression loss,
/// actor objective, influence objective) against central finite differences
/// on randomly built small networks, one instance per seed. Always runs in
/// double precision.
pub fn gradcheck(seeds: usize) -> Result<GradcheckReport, HarnessError> {
    assert!(seeds > 0, "gradcheck needs at least one seed");
    let mut report = GradcheckReport {
        seeds,
        worst_critic: 0.0,
        worst_actor: 0.0,
        worst_estimator: 0.0,
        threshold: GRADCHECK_THRESHOLD,
    };

    macro_rules! fd_loop {
        ($net:expr, $grads:expr, $eval:expr) => {{
            let mut worst = 0.0f64;
            let n = $net.param_count();
            for i in 0..n {
                let orig = $net.param(i);
                $net.set_param(i, orig + GRADCHECK_EPS);
                let plus: f64 = $eval;
                $net.set_param(i, orig - GRADCHECK_EPS);
                let minus: f64 = $eval;
                $net.set_param(i, orig);
                let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
                let analytic = $grads.flat(i);
                let rel = (analytic - numeric).abs() / analytic.abs().max(REL_ERROR_FLOOR);
                if rel > worst {
                    worst = rel;
                }
            }
            worst
        }};
    }

    for seed in 0..seeds as u64 {
        let mut rng = seeded_stream(seed, 1 << 16);
        let hidden_a = [rng.gen_range(4..=16usize), rng.gen_range(4..=16usize)];
        let hidden_c = [rng.gen_range(4..=16usize), rng.gen_range(4..=16usize)];
        let hidden_e = [rng.gen_range(4..=16usize), rng.gen_range(4..=16usize)];
        let dims = mode_dims(Mode::CienSac, 3);

        let mut policy = GaussianPolicy::<f64>::new(
            dims.actor_input(),
            dims.action,
            &hidden_a,
            0.05,
            &mut rng,
        )?;
        let mut critic = DenseNetwork::<f64>::new(
            &[dims.critic_input(), hidden_c[0], hidden_c[1], 1],
            Activation::Relu,
            OutputHead::Linear,
            &mut rng,
        )?;
        let mut estimator = InfluenceEstimator::<f64>::new(&hidden_e, &mut rng)?;

        let batch: Vec<Transition<f64>> = (0..4)
            .map(|_| {
                let draw = |rng: &mut ChaCha12Rng, n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
                };
                Transition {
                    local_obs: draw(&mut rng, dims.local_obs),
                    object_obs: draw(&mut rng, OBJECT_STATE_DIM),
                    action: (0..dims.action).map(|_| rng.gen_range(-0.05..0.05)).collect(),
                    influence: Some(draw(&mut rng, INFLUENCE_DIM)),
                    reward: rng.gen_range(-1.0..1.5),
                    next_local_obs: draw(&mut rng, dims.local_obs),
                    next_object_obs: draw(&mut rng, OBJECT_STATE_DIM),
                    done: false,
                }
            })
            .collect();
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let targets: Vec<f64> = (0..refs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noises: Vec<Vec<f64>> = refs
            .iter()
            .map(|_| (0..dims.action).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let alpha = 0.2;

        // Critic regression loss.
        let (_, grads) = critic_loss_and_grad(&critic, &refs, &targets)?;
        let worst = fd_loop!(critic, grads, critic_loss_and_grad(&critic, &refs, &targets)?.0);
        report.worst_critic = report.worst_critic.max(worst);

        // Actor objective (entropy plus critic value through the action).
        let (_, grads) = actor_objective_and_grad(&policy, &critic, &refs, alpha, &noises)?;
        let worst = fd_loop!(
            policy.network_mut(),
            grads,
            actor_objective_and_grad(&policy, &critic, &refs, alpha, &noises)?.0
        );
        report.worst_actor = report.worst_actor.max(worst);

        // Influence objective (critic ascent through the influence slots).
        let items: Vec<InfluenceBatchItem<'_, f64>> = batch
            .iter()
            .map(|t| InfluenceBatchItem {
                local_obs: &t.local_obs,
                object_obs: &t.object_obs,
                action: &t.action,
            })
            .collect();
        let (_, grads) = crate::cien::influence_objective_and_grad(&estimator, &critic, &items)?;
        let worst = fd_loop!(
            estimator.network_mut(),
            grads,
            crate::cien::influence_objective_and_grad(&estimator, &critic, &items)?.0
        );
        report.worst_estimator = report.worst_estimator.max(worst);
    }
    Ok(report)
}
