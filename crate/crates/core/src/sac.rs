//! Soft actor–critic learner: squashed-Gaussian policy, twin critics with
//! soft-updated targets, TD(0) targets with an entropy bonus, and manual
//! reparameterized policy gradients.
//!
//! Everything operates on [`Transition`] minibatches whose observations are
//! split into a per-agent local slice and a task-object slice; an optional
//! 2-d influence vector rides along for agents that carry an influence
//! estimator. Input layout is fixed everywhere:
//!
//! * policy input  — `[local, object, influence?]`
//! * critic input  — `[local, object, action, influence?]`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cien::{InfluenceEstimator, INFLUENCE_DIM};
use crate::nn::{
    adam_step, soft_update, Activation, AdamParams, AdamState, DenseNetwork, GradientBundle,
    NnError, OutputHead,
};
use crate::replay::Transition;
use crate::scalar::{real, Scalar};

/// Fudge factor inside `ln(1 - tanh(u)^2 + EPS)` that keeps the squash
/// correction finite when the tanh saturates.
pub const SQUASH_EPS: f64 = 1e-6;

/// Sign convention for the entropy bonus inside the TD target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `y = r + gamma * (min Q' - alpha * log pi')` — the convention that
    /// rewards high-entropy behaviour.
    Standard,
    /// `y = r + gamma * (min Q' + alpha * log pi')` — the same magnitude with
    /// the bonus added instead of subtracted, kept switchable for ablations.
    Flipped,
}

/// Learner hyperparameters, shared by every training mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacHyper {
    /// Discount factor.
    pub gamma: f64,
    /// Polyak rate for every target network.
    pub tau: f64,
    /// Fixed entropy temperature.
    pub alpha: f64,
    /// Minibatch size drawn from the replay buffer per update.
    pub batch_size: usize,
    /// Replay buffer capacity.
    pub buffer_capacity: usize,
    /// Adam settings, shared by actor, critics, and influence estimator.
    pub adam: AdamParams,
    /// Actor (and target/estimator) updates fire every this-many critic
    /// updates.
    pub actor_delay: u64,
    /// Entropy sign convention in the TD target.
    pub entropy_sign: EntropySign,
}

impl Default for SacHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.2,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            adam: AdamParams::default(),
            actor_delay: 2,
            entropy_sign: EntropySign::Standard,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SacError {
    #[error(transparent)]
    Net(#[from] NnError),
    #[error("update called with an empty minibatch")]
    EmptyBatch,
    #[error("policy expects observation width {expected}, transition provides {got}")]
    PolicyObsWidth { expected: usize, got: usize },
    #[error("critic expects input width {expected}, transition provides {got}")]
    CriticInputWidth { expected: usize, got: usize },
    #[error(
        "critic input is exactly one influence vector short: the network was built \
         for influence-augmented inputs but the transition stores none"
    )]
    MissingInfluence,
    #[error("{what} became non-finite; parameters were left untouched")]
    NonFiniteLoss { what: &'static str },
    #[error("expected {expected} noise vectors of width {width}, got {got}")]
    NoiseShape { expected: usize, width: usize, got: usize },
}

/// Squashed-Gaussian policy head plus its Adam state.
///
/// The network emits `[mean, log_std]` (a Gaussian output head clamps the
/// log-stds); actions are `scale * tanh(mean + std * noise)`, componentwise
/// in `(-scale, scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy<T> {
    net: DenseNetwork<T>,
    opt: AdamState<T>,
    action_scale: T,
}

/// Everything produced by one reparameterized draw from the policy.
#[derive(Debug, Clone)]
pub struct SampledAction<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
    /// The standard-normal draw `noise`, with `pre_tanh = mean + std * noise`.
    pub noise: Vec<T>,
    pub pre_tanh: Vec<T>,
    pub action: Vec<T>,
    /// Log-density of `action` under the squashed Gaussian.
    pub log_prob: T,
}

impl<T: Scalar> GaussianPolicy<T> {
    /// Build a policy network `obs_dim -> hidden... -> 2 * action_dim` with
    /// ReLU hidden layers and a Gaussian output head.
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        action_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        assert!(action_scale > 0.0, "action scale must be positive");
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(obs_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        let net = DenseNetwork::new(&sizes, Activation::Relu, OutputHead::Gaussian, rng)?;
        let opt = AdamState::new(&net);
        Ok(Self {
            net,
            opt,
            action_scale: real::<T>(action_scale),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn action_scale(&self) -> T {
        self.action_scale
    }

    pub fn network(&self) -> &DenseNetwork<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut DenseNetwork<T> {
        &mut self.net
    }

    pub fn optimizer_state(&self) -> &AdamState<T> {
        &self.opt
    }

    /// Reparameterized draw with a caller-supplied standard-normal vector —
    /// the deterministic core of [`Self::sample`].
    pub fn sample_with_noise(&self, obs: &[T], noise: &[T]) -> Result<SampledAction<T>, SacError> {
        let k = self.action_dim();
        if noise.len() != k {
            return Err(SacError::NoiseShape {
                expected: 1,
                width: k,
                got: noise.len(),
            });
        }
        let out = self.net.forward(obs)?;
        let mean = out[..k].to_vec();
        let log_std = out[k..].to_vec();
        let mut pre_tanh = Vec::with_capacity(k);
        let mut action = Vec::with_capacity(k);
        for i in 0..k {
            let u = log_std[i].exp().mul_add(noise[i], mean[i]);
            pre_tanh.push(u);
            action.push(self.action_scale * u.tanh());
        }
        let log_prob = squashed_log_prob(&log_std, noise, &pre_tanh, self.action_scale);
        Ok(SampledAction {
            mean,
            log_std,
            noise: noise.to_vec(),
            pre_tanh,
            action,
            log_prob,
        })
    }

    /// Stochastic action draw; consumes exactly `action_dim` standard-normal
    /// variates from `rng`.
    pub fn sample(&self, obs: &[T], rng: &mut impl Rng) -> Result<SampledAction<T>, SacError> {
        let noise: Vec<T> = (0..self.action_dim()).map(|_| T::standard_normal(rng)).collect();
        self.sample_with_noise(obs, &noise)
    }

    /// Greedy action: the squashed mean, no sampling.
    pub fn deterministic_action(&self, obs: &[T]) -> Result<Vec<T>, SacError> {
        let out = self.net.forward(obs)?;
        let k = self.action_dim();
        Ok(out[..k].iter().map(|&m| self.action_scale * m.tanh()).collect())
    }
}

/// Log-density of a squashed-Gaussian action, expressed through the noise
/// and pre-squash values of the draw that produced it:
///
/// `sum_k [ -ln(2 pi)/2 - log_std_k - noise_k^2/2
///          - ln(1 - tanh(pre_tanh_k)^2 + SQUASH_EPS) - ln(scale) ]`
///
/// The first three terms are the Gaussian log-density over `pre_tanh`; the
/// rest is the change-of-variables correction for `action = scale * tanh(.)`.
fn squashed_log_prob<T: Scalar>(log_std: &[T], noise: &[T], pre_tanh: &[T], scale: T) -> T {
    let half_ln_tau = real::<T>(0.5 * std::f64::consts::TAU.ln());
    let eps = real::<T>(SQUASH_EPS);
    let half = real::<T>(0.5);
    let ln_scale = scale.ln();
    let mut total = T::zero();
    for ((&ls, &n), &u) in log_std.iter().zip(noise).zip(pre_tanh) {
        let t = u.tanh();
        let jac = (T::one() - t * t + eps).ln();
        total = total - half_ln_tau - ls - half * n * n - jac - ln_scale;
    }
    total
}

/// Log-density of the same draw measured on the unit squash `tanh(u)`,
/// i.e. before the physical action scaling.
///
/// The scaling contributes only the constant `k * ln(1/scale)` to the full
/// log-density. With bounds well below 1 that constant dominates every
/// attainable per-dimension entropy, so an entropy regularizer fed the full
/// density degenerates into a flat per-step tax on staying alive — larger
/// than any reachable reward here — and bootstrapped values come to favor
/// early termination no matter what the policy does. Training therefore
/// regularizes the scale-free density; the full change-of-variables value
/// remains what [`GaussianPolicy::sample`] reports.
fn unit_squash_log_prob<T: Scalar>(full_log_prob: T, action_dim: usize, scale: T) -> T {
    full_log_prob + real::<T>(action_dim as f64) * scale.ln()
}

/// The two online critics, their target copies, and per-critic Adam states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinCritics<T> {
    q1: DenseNetwork<T>,
    q2: DenseNetwork<T>,
    target1: DenseNetwork<T>,
    target2: DenseNetwork<T>,
    opt1: AdamState<T>,
    opt2: AdamState<T>,
}

impl<T: Scalar> TwinCritics<T> {
    /// Two independently initialized critics `input_dim -> hidden... -> 1`
    /// with ReLU hidden layers and a linear head; targets start as copies.
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = DenseNetwork::new(&sizes, Activation::Relu, OutputHead::Linear, rng)?;
        let q2 = DenseNetwork::new(&sizes, Activation::Relu, OutputHead::Linear, rng)?;
        let target1 = q1.clone();
        let target2 = q2.clone();
        let opt1 = AdamState::new(&q1);
        let opt2 = AdamState::new(&q2);
        Ok(Self {
            q1,
            q2,
            target1,
            target2,
            opt1,
            opt2,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.q1.input_dim()
    }

    pub fn q1(&self) -> &DenseNetwork<T> {
        &self.q1
    }

    pub fn q2(&self) -> &DenseNetwork<T> {
        &self.q2
    }

    pub fn q1_mut(&mut self) -> &mut DenseNetwork<T> {
        &mut self.q1
    }

    pub fn q2_mut(&mut self) -> &mut DenseNetwork<T> {
        &mut self.q2
    }

    pub fn target1(&self) -> &DenseNetwork<T> {
        &self.target1
    }

    pub fn target2(&self) -> &DenseNetwork<T> {
        &self.target2
    }

    /// `min(Q1', Q2')` under the target copies.
    pub fn min_target(&self, input: &[T]) -> Result<T, NnError> {
        let a = self.target1.forward(input)?[0];
        let b = self.target2.forward(input)?[0];
        Ok(a.min(b))
    }

    pub fn optimizer_states(&self) -> (&AdamState<T>, &AdamState<T>) {
        (&self.opt1, &self.opt2)
    }
}

/// Polyak step of both critic targets toward their online networks. Policy
/// networks have no target copies anywhere in this crate.
pub fn synchronize_targets<T: Scalar>(critics: &mut TwinCritics<T>, tau: f64) -> Result<(), NnError> {
    let tau = real::<T>(tau);
    soft_update(&mut critics.target1, &critics.q1, tau)?;
    soft_update(&mut critics.target2, &critics.q2, tau)
}

fn assemble<T: Scalar>(buf: &mut Vec<T>, parts: &[&[T]]) {
    buf.clear();
    for p in parts {
        buf.extend_from_slice(p);
    }
}

fn check_widths<T: Scalar>(
    batch: &[&Transition<T>],
    policy: &GaussianPolicy<T>,
    critic_input_dim: usize,
    influence_width: usize,
) -> Result<(), SacError> {
    let first = batch.first().ok_or(SacError::EmptyBatch)?;
    let obs = first.local_obs.len() + first.object_obs.len() + influence_width;
    if policy.obs_dim() != obs {
        return Err(SacError::PolicyObsWidth {
            expected: policy.obs_dim(),
            got: obs,
        });
    }
    let critic_in = obs + first.action.len();
    if critic_input_dim != critic_in {
        if critic_input_dim == critic_in + INFLUENCE_DIM && influence_width == 0 {
            return Err(SacError::MissingInfluence);
        }
        return Err(SacError::CriticInputWidth {
            expected: critic_input_dim,
            got: critic_in,
        });
    }
    Ok(())
}

fn stored_influence_width<T: Scalar>(batch: &[&Transition<T>]) -> usize {
    batch
        .first()
        .and_then(|t| t.influence.as_ref())
        .map_or(0, Vec::len)
}

/// Bootstrap targets `y_i` for a minibatch:
///
/// `y = r + gamma * (1 - done) * (min(Q1', Q2')(s', a') -/+ alpha * log pi(a'|s'))`
///
/// with `a'` freshly sampled from the policy at the next observation, and
/// `log pi` measured on the unit squash (see [`unit_squash_log_prob`]). When
/// an influence estimator is supplied, its *target* copy fills the influence
/// slots of both the next observation and the critic input. Consumes
/// `action_dim` standard-normal draws per transition, done or not.
pub fn td_target<T: Scalar>(
    batch: &[&Transition<T>],
    critics: &TwinCritics<T>,
    policy: &GaussianPolicy<T>,
    influence: Option<&InfluenceEstimator<T>>,
    hyper: &SacHyper,
    rng: &mut impl Rng,
) -> Result<Vec<T>, SacError> {
    let influence_width = influence.map_or(0, |_| INFLUENCE_DIM);
    check_widths(batch, policy, critics.input_dim(), influence_width)?;

    let gamma = real::<T>(hyper.gamma);
    let alpha = real::<T>(hyper.alpha);
    let scale = policy.action_scale();
    let mut obs = Vec::with_capacity(policy.obs_dim());
    let mut critic_in = Vec::with_capacity(critics.input_dim());
    let mut targets = Vec::with_capacity(batch.len());
    for tr in batch {
        let next_influence = match influence {
            Some(est) => Some(est.estimate(&tr.next_object_obs, true)?),
            None => None,
        };
        let inf_slice: &[T] = next_influence.as_ref().map_or(&[], |c| &c[..]);
        assemble(&mut obs, &[&tr.next_local_obs, &tr.next_object_obs, inf_slice]);
        let next = policy.sample(&obs, rng)?;
        // Critic action slots are unit-scaled, like the stored transitions.
        let unit_action: Vec<T> = next.action.iter().map(|&a| a / scale).collect();
        assemble(
            &mut critic_in,
            &[&tr.next_local_obs, &tr.next_object_obs, &unit_action, inf_slice],
        );
        let q_min = critics.min_target(&critic_in)?;
        let log_pi = unit_squash_log_prob(next.log_prob, policy.action_dim(), scale);
        let entropy_term = match hyper.entropy_sign {
            EntropySign::Standard => -alpha * log_pi,
            EntropySign::Flipped => alpha * log_pi,
        };
        let mask = if tr.done { T::zero() } else { T::one() };
        targets.push(mask.mul_add(gamma * (q_min + entropy_term), tr.reward));
    }
    Ok(targets)
}

/// Mean-squared Bellman error of one critic against fixed targets, with its
/// parameter gradient. Critic inputs take the stored actions and stored
/// influence. Exposed on its own (besides [`critic_update`]) for gradient
/// verification.
pub fn critic_loss_and_grad<T: Scalar>(
    critic: &DenseNetwork<T>,
    batch: &[&Transition<T>],
    targets: &[T],
) -> Result<(T, GradientBundle<T>), SacError> {
    let inv_m = T::one() / real::<T>(batch.len() as f64);
    let two = real::<T>(2.0);
    let mut loss = T::zero();
    let mut bundle = GradientBundle::zeros_like(critic);
    let mut input = Vec::with_capacity(critic.input_dim());
    for (tr, &y) in batch.iter().zip(targets) {
        let inf_slice: &[T] = tr.influence.as_ref().map_or(&[], |c| &c[..]);
        assemble(&mut input, &[&tr.local_obs, &tr.object_obs, &tr.action, inf_slice]);
        let (q, cache) = critic.forward_cached(&input)?;
        let err = q[0] - y;
        loss = (err * err).mul_add(inv_m, loss);
        critic.backward_accumulate(&cache, &[two * err * inv_m], &mut bundle)?;
    }
    Ok((loss, bundle))
}

/// One Adam step of both critics toward the given targets; returns the two
/// pre-step losses. Validates both losses and gradients before stepping, so
/// a non-finite batch leaves both critics untouched.
pub fn critic_update<T: Scalar>(
    critics: &mut TwinCritics<T>,
    batch: &[&Transition<T>],
    targets: &[T],
    hyper: &SacHyper,
) -> Result<(T, T), SacError> {
    if batch.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    assert_eq!(batch.len(), targets.len(), "one target per transition");
    if !targets.iter().all(|y| y.is_finite()) {
        return Err(SacError::NonFiniteLoss { what: "TD target" });
    }
    let (loss1, grads1) = critic_loss_and_grad(&critics.q1, batch, targets)?;
    let (loss2, grads2) = critic_loss_and_grad(&critics.q2, batch, targets)?;
    if !(loss1.is_finite() && loss2.is_finite()) {
        return Err(SacError::NonFiniteLoss { what: "critic loss" });
    }
    if !(grads1.is_finite() && grads2.is_finite()) {
        return Err(SacError::NonFiniteLoss { what: "critic gradient" });
    }
    adam_step(&mut critics.q1, &mut critics.opt1, &grads1, &hyper.adam)?;
    adam_step(&mut critics.q2, &mut critics.opt2, &grads2, &hyper.adam)?;
    Ok((loss1, loss2))
}

/// Actor objective on a minibatch with caller-supplied noise vectors:
///
/// `J = mean_i [ alpha * log pi(a_i|s_i) - Q1(s_i, a_i) ]`,  `a_i` drawn by
/// reparameterization at the stored observation (stored influence included,
/// both in the policy input and the critic input). `log pi` is the
/// unit-squash log-density (see [`unit_squash_log_prob`]); the physical-scale
/// constant would shift the objective without touching its gradient. Returns
/// `J` and `dJ/d(policy parameters)`; the critic is read-only.
///
/// The critic's action slots take the unit action `tanh(u)` (like stored
/// transitions); the gradient is assembled by hand from three chains per
/// action dim `k` (`t = tanh(u)`, `D = 1 - t^2 + SQUASH_EPS`,
/// `g_a = d(-Q/M)/d a_k` via the critic's input gradient):
///
/// * `dJ/du_k     = (alpha/M) * 2 t (1 - t^2) / D + g_a * (1 - t^2)`
/// * `dJ/dmean_k  = dJ/du_k`
/// * `dJ/dlogstd_k = dJ/du_k * std_k * noise_k - alpha/M`
pub fn actor_objective_and_grad<T: Scalar>(
    policy: &GaussianPolicy<T>,
    critic: &DenseNetwork<T>,
    batch: &[&Transition<T>],
    alpha: T,
    noises: &[Vec<T>],
) -> Result<(T, GradientBundle<T>), SacError> {
    let influence_width = stored_influence_width(batch);
    check_widths(batch, policy, critic.input_dim(), influence_width)?;
    let k = policy.action_dim();
    if noises.len() != batch.len() || noises.iter().any(|n| n.len() != k) {
        return Err(SacError::NoiseShape {
            expected: batch.len(),
            width: k,
            got: noises.len(),
        });
    }

    let inv_m = T::one() / real::<T>(batch.len() as f64);
    let alpha_m = alpha * inv_m;
    let eps = real::<T>(SQUASH_EPS);
    let two = real::<T>(2.0);
    let scale = policy.action_scale();
    let mut objective = T::zero();
    let mut bundle = GradientBundle::zeros_like(policy.network());
    let mut obs = Vec::with_capacity(policy.obs_dim());
    let mut critic_in = Vec::with_capacity(critic.input_dim());
    let mut upstream = vec![T::zero(); 2 * k];

    for (tr, noise) in batch.iter().zip(noises) {
        let inf_slice: &[T] = tr.influence.as_ref().map_or(&[], |c| &c[..]);
        assemble(&mut obs, &[&tr.local_obs, &tr.object_obs, inf_slice]);
        let (head, policy_cache) = policy.network().forward_cached(&obs)?;
        let (mean, log_std) = head.split_at(k);

        let mut pre_tanh = Vec::with_capacity(k);
        let mut action = Vec::with_capacity(k);
        for i in 0..k {
            let u = log_std[i].exp().mul_add(noise[i], mean[i]);
            pre_tanh.push(u);
            action.push(u.tanh());
        }
        let log_prob =
            unit_squash_log_prob(squashed_log_prob(log_std, noise, &pre_tanh, scale), k, scale);

        assemble(&mut critic_in, &[&tr.local_obs, &tr.object_obs, &action, inf_slice]);
        let (q, critic_cache) = critic.forward_cached(&critic_in)?;
        objective = objective + (alpha_m * log_prob - q[0] * inv_m);

        // d(-Q/M)/d(critic input), restricted to the action slots.
        let (_, d_critic_in) = critic.backward(&critic_cache, &[-inv_m])?;
        let action_offset = tr.local_obs.len() + tr.object_obs.len();
        let d_action = &d_critic_in[action_offset..action_offset + k];

        for i in 0..k {
            let t = pre_tanh[i].tanh();
            let sech2 = T::one() - t * t;
            let d = sech2 + eps;
            let d_u = (alpha_m * two * t).mul_add(sech2 / d, d_action[i] * sech2);
            upstream[i] = d_u;
            upstream[k + i] = (d_u * log_std[i].exp()).mul_add(noise[i], -alpha_m);
        }
        policy.network().backward_accumulate(&policy_cache, &upstream, &mut bundle)?;
    }
    Ok((objective, bundle))
}

/// One Adam step of the policy along the actor gradient, with fresh noise
/// drawn from `rng` (exactly `action_dim` standard normals per transition).
/// Returns the pre-step objective. A non-finite objective or gradient leaves
/// the policy untouched.
pub fn actor_update<T: Scalar>(
    policy: &mut GaussianPolicy<T>,
    critic: &DenseNetwork<T>,
    batch: &[&Transition<T>],
    hyper: &SacHyper,
    rng: &mut impl Rng,
) -> Result<T, SacError> {
    if batch.is_empty() {
        return Err(SacError::EmptyBatch);
    }
    let k = policy.action_dim();
    let noises: Vec<Vec<T>> = batch
        .iter()
        .map(|_| (0..k).map(|_| T::standard_normal(rng)).collect())
        .collect();
    let alpha = real::<T>(hyper.alpha);
    let (objective, grads) = actor_objective_and_grad(policy, critic, batch, alpha, &noises)?;
    if !objective.is_finite() {
        return Err(SacError::NonFiniteLoss { what: "actor objective" });
    }
    if !grads.is_finite() {
        return Err(SacError::NonFiniteLoss { what: "actor gradient" });
    }
    adam_step(&mut policy.net, &mut policy.opt, &grads, &hyper.adam)?;
    Ok(objective)
}
