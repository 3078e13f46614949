//! Collective influence estimation.
//!
//! Each decentralized agent carries an influence estimator: a small network
//! that maps the 2-d task-object state (disk height, tilt) to a 2-d
//! *collective influence* vector in `[-1, 1]^2` — a learned summary of what
//! the rest of the team is doing to the object. The estimator reads nothing
//! but the object state, so its shape is independent of the team size.
//!
//! Training follows a critic-ascent rule: the estimator parameters move so
//! that the agent's first critic, evaluated at the stored observations and
//! actions with the *current* influence estimate plugged in, increases.
//! A soft-updated target copy provides the influence fed into TD targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    adam_step, soft_update, Activation, AdamParams, AdamState, DenseNetwork, GradientBundle,
    NnError, OutputHead,
};
use crate::scalar::{real, Scalar};

/// Width of the collective influence vector.
pub const INFLUENCE_DIM: usize = 2;

/// Width of the task-object state the estimator reads.
pub const OBJECT_INPUT_DIM: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum CienError {
    #[error(transparent)]
    Net(#[from] NnError),
    #[error("critic input width {critic} cannot hold local {local} + object {object} + action {action} + influence {influence}")]
    CriticWidth {
        critic: usize,
        local: usize,
        object: usize,
        action: usize,
        influence: usize,
    },
}

/// Influence network `e_psi`, its soft-updated target copy, and the Adam
/// state for the online network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEstimator<T> {
    net: DenseNetwork<T>,
    target: DenseNetwork<T>,
    opt: AdamState<T>,
}

/// One minibatch item for the estimator update: the stored observation
/// slices and the stored action (no influence — the estimator's own output
/// is plugged into that slot).
#[derive(Debug, Clone, Copy)]
pub struct InfluenceBatchItem<'a, T> {
    pub local_obs: &'a [T],
    pub object_obs: &'a [T],
    pub action: &'a [T],
}

impl<T: Scalar> InfluenceEstimator<T> {
    /// Build an estimator with the given hidden widths; the target copy
    /// starts identical to the online network.
    ///
    /// Architecture: `2 -> hidden... -> 2`, ReLU hidden layers, tanh output
    /// head. Construction never consults the number of agents.
    pub fn new(hidden: &[usize], rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(OBJECT_INPUT_DIM);
        sizes.extend_from_slice(hidden);
        sizes.push(INFLUENCE_DIM);
        let net = DenseNetwork::new(&sizes, Activation::Relu, OutputHead::Tanh, rng)?;
        let target = net.clone();
        let opt = AdamState::new(&net);
        Ok(Self { net, target, opt })
    }

    /// Estimate the collective influence from a task-object state.
    ///
    /// `use_target` selects the soft-updated target copy (used when forming
    /// TD targets) instead of the online network.
    pub fn estimate(&self, object_state: &[T], use_target: bool) -> Result<[T; 2], NnError> {
        let net = if use_target { &self.target } else { &self.net };
        let out = net.forward(object_state)?;
        Ok([out[0], out[1]])
    }

    pub fn network(&self) -> &DenseNetwork<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut DenseNetwork<T> {
        &mut self.net
    }

    pub fn target_network(&self) -> &DenseNetwork<T> {
        &self.target
    }

    /// Polyak step of the target copy toward the online network.
    pub fn sync_target(&mut self, tau: f64) -> Result<(), NnError> {
        soft_update(&mut self.target, &self.net, real::<T>(tau))
    }

    pub fn optimizer_state(&self) -> &AdamState<T> {
        &self.opt
    }
}

/// Estimator objective on a minibatch: the mean of
/// `-Q(local, object, action, e_psi(object))` under the given critic, along
/// with its gradient with respect to the estimator parameters (the critic
/// is read-only here).
pub fn influence_objective_and_grad<T: Scalar>(
    est: &InfluenceEstimator<T>,
    critic: &DenseNetwork<T>,
    batch: &[InfluenceBatchItem<'_, T>],
) -> Result<(T, GradientBundle<T>), CienError> {
    assert!(!batch.is_empty(), "estimator update needs a non-empty batch");
    let first = &batch[0];
    let expected = first.local_obs.len() + first.object_obs.len() + first.action.len() + INFLUENCE_DIM;
    if critic.input_dim() != expected {
        return Err(CienError::CriticWidth {
            critic: critic.input_dim(),
            local: first.local_obs.len(),
            object: first.object_obs.len(),
            action: first.action.len(),
            influence: INFLUENCE_DIM,
        });
    }

    let inv_m = T::one() / real::<T>(batch.len() as f64);
    let mut objective = T::zero();
    let mut bundle = GradientBundle::zeros_like(est.network());
    let mut critic_input = Vec::with_capacity(expected);

    for item in batch {
        let (influence, est_cache) = est.net.forward_cached(item.object_obs)?;

        critic_input.clear();
        critic_input.extend_from_slice(item.local_obs);
        critic_input.extend_from_slice(item.object_obs);
        critic_input.extend_from_slice(item.action);
        critic_input.extend_from_slice(&influence);
        let (q, critic_cache) = critic.forward_cached(&critic_input)?;
        objective = objective - q[0] * inv_m;

        // d(-q/m)/d(critic input), restricted to the influence slots, is the
        // upstream gradient for the estimator.
        let (_, d_input) = critic.backward(&critic_cache, &[-inv_m])?;
        let d_influence = &d_input[d_input.len() - INFLUENCE_DIM..];
        est.net.backward_accumulate(&est_cache, d_influence, &mut bundle)?;
    }
    Ok((objective, bundle))
}

/// One Adam step of the online estimator along the critic-ascent gradient;
/// returns the pre-step objective value.
pub fn update_estimator<T: Scalar>(
    est: &mut InfluenceEstimator<T>,
    critic: &DenseNetwork<T>,
    batch: &[InfluenceBatchItem<'_, T>],
    adam: &AdamParams,
) -> Result<T, CienError> {
    let (objective, grads) = influence_objective_and_grad(est, critic, batch)?;
    adam_step(&mut est.net, &mut est.opt, &grads, adam)?;
    Ok(objective)
}
