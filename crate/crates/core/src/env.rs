//! Analytic surrogate of the cooperative disk-lifting task.
//!
//! `N` robot grippers hold a rigid disk at fixed angular stations
//! `phi_i = 2*pi*i/N` on a ring of radius `grasp_radius`. Each gripper
//! controls three per-step displacements: vertical, radial, and a grip
//! scalar. The disk pose is recovered analytically each step by fitting a
//! least-squares plane through the gripper positions (exact for `N = 3`);
//! the shared reward is `height - tilt_weight * tilt`, so the team is paid
//! for raising the disk while keeping it level.
//!
//! Episodes end on the first violated safety check, tested in a fixed
//! order — grip deviation, center deviation, tilt limit — and otherwise at
//! the horizon. Safety terminations are true failure states (value
//! bootstrap is masked); hitting the horizon is plain truncation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{real, Scalar};

/// Per-arm observation width: three coordinates plus their displacements.
pub const ARM_STATE_DIM: usize = 6;
/// Task-object observation width: disk height and tilt.
pub const OBJECT_STATE_DIM: usize = 2;
/// Per-arm action width: vertical, radial, grip displacement.
pub const ACTION_DIM: usize = 3;
/// Half-width of the tolerated grip-scalar drift from its reset value;
/// exceeding it terminates the episode as a grip deviation.
pub const GRIP_BAND: f64 = 0.5;

/// Environment parameters. All lengths in meters, angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Number of arms gripping the disk (>= 2).
    pub n_agents: usize,
    /// Ring radius at which grippers hold the rim.
    pub grasp_radius: f64,
    /// Disk height at reset.
    pub initial_height: f64,
    /// Height the protocol counts as a completed lift.
    pub target_height: f64,
    /// Episode length in control steps.
    pub horizon: u32,
    /// Control period in seconds (bookkeeping only: actions are already
    /// expressed as displacement per step).
    pub dt: f64,
    /// Symmetric clamp applied to every action component.
    pub action_bound: f64,
    /// Allowed drift of a gripper's grasp distance from its reset value.
    pub grip_deviation_delta: f64,
    /// Allowed Euclidean drift of the disk center in the ring plane.
    pub center_deviation_eps: f64,
    /// Tilt angle beyond which the disk is considered dropped.
    pub tilt_limit: f64,
    /// Weight of the tilt penalty in the reward.
    pub tilt_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_agents: 3,
            grasp_radius: 0.5,
            initial_height: 0.896,
            target_height: 1.36,
            horizon: 200,
            dt: 0.25,
            action_bound: 0.05,
            grip_deviation_delta: 0.03,
            center_deviation_eps: 0.05,
            tilt_limit: std::f64::consts::FRAC_PI_4,
            tilt_weight: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_agents < 2 {
            return Err(EnvError::TooFewAgents { got: self.n_agents });
        }
        Ok(())
    }
}

/// One arm's state: coordinates plus the displacements applied on the most
/// recent step (zero at reset).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState<T> {
    /// Gripper distance from the ring center.
    pub radial: T,
    /// Gripper height.
    pub height: T,
    /// Grip scalar (dimensionless; no effect on the disk pose).
    pub grip: T,
    pub d_radial: T,
    pub d_height: T,
    pub d_grip: T,
}

impl<T: Scalar> ArmState<T> {
    fn write_observation(&self, out: &mut Vec<T>) {
        out.extend_from_slice(&[
            self.radial,
            self.height,
            self.grip,
            self.d_radial,
            self.d_height,
            self.d_grip,
        ]);
    }
}

/// Disk pose summary exposed to the agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState<T> {
    pub height: T,
    pub tilt: T,
}

/// Full environment state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState<T> {
    pub agents: Vec<ArmState<T>>,
    pub object: ObjectState<T>,
    pub step_count: u32,
    /// Grasp distances at reset; drifting beyond `grip_deviation_delta`
    /// from these ends the episode.
    pub initial_grasp: Vec<T>,
    /// Grip scalars at reset; drifting beyond +/-0.5 from these counts as a
    /// grip deviation as well.
    pub initial_grip: Vec<T>,
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    None,
    GripDeviation,
    CenterDeviation,
    TiltLimit,
    Horizon,
}

impl TerminationReason {
    /// Safety terminations are real failure states whose value must not be
    /// bootstrapped; horizon truncation bootstraps normally.
    pub fn is_safety(self) -> bool {
        matches!(
            self,
            TerminationReason::GripDeviation
                | TerminationReason::CenterDeviation
                | TerminationReason::TiltLimit
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::None => "none",
            TerminationReason::GripDeviation => "grip_deviation",
            TerminationReason::CenterDeviation => "center_deviation",
            TerminationReason::TiltLimit => "tilt_limit",
            TerminationReason::Horizon => "horizon",
        }
    }
}

impl std::fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult<T> {
    pub reward: T,
    pub object: ObjectState<T>,
    pub terminated: bool,
    pub reason: TerminationReason,
}

/// Disk pose recovered from gripper positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub height: T,
    pub tilt: T,
    /// Mean in-plane displacement of the grippers from the nominal ring.
    pub center_dev: [T; 2],
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("need at least 2 agents, got {got}")]
    TooFewAgents { got: usize },
    #[error("expected {expected} action vectors, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent index {index} out of range for {n_agents} agents")]
    AgentIndex { index: usize, n_agents: usize },
    #[error("gripper geometry is degenerate: {detail}")]
    DegenerateGeometry { detail: String },
}

/// Fixed angular stations `2*pi*i/n` of the grippers.
pub fn station_angles<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| real::<T>(std::f64::consts::TAU * i as f64 / n as f64))
        .collect()
}

/// Deterministic initial state: every gripper at the nominal ring radius
/// and initial height with zero displacements; the disk level at the
/// initial height.
///
/// The `_seed` parameter is part of the interface for forward
/// compatibility; initial conditions are currently deterministic.
pub fn reset<T: Scalar>(config: &EnvConfig, _seed: u64) -> Result<EnvState<T>, EnvError> {
    config.validate()?;
    let radial = real::<T>(config.grasp_radius);
    let height = real::<T>(config.initial_height);
    let zero = T::zero();
    let arm = ArmState {
        radial,
        height,
        grip: zero,
        d_radial: zero,
        d_height: zero,
        d_grip: zero,
    };
    Ok(EnvState {
        agents: vec![arm; config.n_agents],
        object: ObjectState { height, tilt: zero },
        step_count: 0,
        initial_grasp: vec![radial; config.n_agents],
        initial_grip: vec![zero; config.n_agents],
    })
}

/// Gripper positions as `(radial, station angle, height)` triples.
pub fn gripper_triples<T: Scalar>(state: &EnvState<T>) -> Vec<(T, T, T)> {
    let angles = station_angles::<T>(state.agents.len());
    state
        .agents
        .iter()
        .zip(angles)
        .map(|(arm, phi)| (arm.radial, phi, arm.height))
        .collect()
}

/// Recover the disk pose from gripper positions `(radial, angle, height)`.
///
/// For `n >= 3`, a least-squares plane `z(x, y) = a*x + b*y + c` is fitted
/// through the gripper points (exact when `n = 3`); the pose height is the
/// plane evaluated at the gripper centroid and the tilt is
/// `atan(sqrt(a^2 + b^2))`. For `n = 2` the plane is underdetermined and
/// the tilt comes from the two-point slope instead.
pub fn object_pose<T: Scalar>(
    grippers: &[(T, T, T)],
    grasp_radius: T,
) -> Result<Pose<T>, EnvError> {
    let n = grippers.len();
    if n < 2 {
        return Err(EnvError::TooFewAgents { got: n });
    }
    let n_t = real::<T>(n as f64);

    let mut center_dev = [T::zero(); 2];
    let mut points = Vec::with_capacity(n);
    for &(radial, phi, height) in grippers {
        let (sin, cos) = phi.sin_cos();
        points.push((radial * cos, radial * sin, height));
        let off = radial - grasp_radius;
        center_dev[0] = center_dev[0] + off * cos;
        center_dev[1] = center_dev[1] + off * sin;
    }
    center_dev[0] = center_dev[0] / n_t;
    center_dev[1] = center_dev[1] / n_t;

    let mut mean = (T::zero(), T::zero(), T::zero());
    for &(x, y, z) in &points {
        mean.0 = mean.0 + x;
        mean.1 = mean.1 + y;
        mean.2 = mean.2 + z;
    }
    mean.0 = mean.0 / n_t;
    mean.1 = mean.1 / n_t;
    mean.2 = mean.2 / n_t;

    let tilt = if n == 2 {
        let (x0, y0, z0) = points[0];
        let (x1, y1, z1) = points[1];
        let dist = ((x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0)).sqrt();
        if dist <= T::zero() {
            return Err(EnvError::DegenerateGeometry {
                detail: "two grippers coincide in the ring plane".into(),
            });
        }
        ((z1 - z0).abs() / dist).atan()
    } else {
        // Normal equations in centroid-centered coordinates; centering makes
        // the 3x3 system block-diagonal, leaving a 2x2 solve for the slope.
        let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
        let (mut sxz, mut syz) = (T::zero(), T::zero());
        for &(x, y, z) in &points {
            let (u, v, w) = (x - mean.0, y - mean.1, z - mean.2);
            sxx = u.mul_add(u, sxx);
            sxy = u.mul_add(v, sxy);
            syy = v.mul_add(v, syy);
            sxz = u.mul_add(w, sxz);
            syz = v.mul_add(w, syz);
        }
        let det = sxx * syy - sxy * sxy;
        let scale = (sxx + syy) * (sxx + syy);
        if det.abs() <= scale * real::<T>(1e-12) {
            return Err(EnvError::DegenerateGeometry {
                detail: "gripper positions are collinear in the ring plane".into(),
            });
        }
        let a = (syy * sxz - sxy * syz) / det;
        let b = (sxx * syz - sxy * sxz) / det;
        (a * a + b * b).sqrt().atan()
    };

    // The least-squares plane passes through the point centroid, so its
    // value at the centroid is the mean gripper height.
    Ok(Pose {
        height: mean.2,
        tilt,
        center_dev,
    })
}

/// Advance the environment by one joint step.
///
/// Each action is `[vertical, radial, grip]` displacement; components are
/// clamped to `[-action_bound, +action_bound]` before integration. The
/// reward is computed on the post-step pose, and safety checks run in the
/// fixed order grip deviation -> center deviation -> tilt limit -> horizon.
pub fn step<T: Scalar>(
    state: &mut EnvState<T>,
    actions: &[[T; ACTION_DIM]],
    config: &EnvConfig,
) -> Result<StepResult<T>, EnvError> {
    if actions.len() != state.agents.len() {
        return Err(EnvError::ActionCount {
            expected: state.agents.len(),
            got: actions.len(),
        });
    }
    let bound = real::<T>(config.action_bound);
    for (arm, action) in state.agents.iter_mut().zip(actions) {
        debug_assert!(action.iter().all(|a| a.is_finite()), "non-finite action");
        let d_height = action[0].max(-bound).min(bound);
        let d_radial = action[1].max(-bound).min(bound);
        let d_grip = action[2].max(-bound).min(bound);
        arm.height = arm.height + d_height;
        arm.radial = arm.radial + d_radial;
        arm.grip = arm.grip + d_grip;
        arm.d_height = d_height;
        arm.d_radial = d_radial;
        arm.d_grip = d_grip;
    }
    state.step_count += 1;

    let pose = object_pose(&gripper_triples(state), real::<T>(config.grasp_radius))?;
    state.object = ObjectState {
        height: pose.height,
        tilt: pose.tilt,
    };
    let reward = pose.height - real::<T>(config.tilt_weight) * pose.tilt;

    let delta = real::<T>(config.grip_deviation_delta);
    let grip_band = real::<T>(GRIP_BAND);
    let grip_violation = state
        .agents
        .iter()
        .zip(state.initial_grasp.iter().zip(&state.initial_grip))
        .any(|(arm, (&d0, &g0))| {
            (arm.radial - d0).abs() > delta || (arm.grip - g0).abs() > grip_band
        });
    let center_norm = (pose.center_dev[0] * pose.center_dev[0]
        + pose.center_dev[1] * pose.center_dev[1])
        .sqrt();

    let reason = if grip_violation {
        TerminationReason::GripDeviation
    } else if center_norm > real::<T>(config.center_deviation_eps) {
        TerminationReason::CenterDeviation
    } else if pose.tilt > real::<T>(config.tilt_limit) {
        TerminationReason::TiltLimit
    } else if state.step_count >= config.horizon {
        TerminationReason::Horizon
    } else {
        TerminationReason::None
    };

    Ok(StepResult {
        reward,
        object: state.object,
        terminated: reason != TerminationReason::None,
        reason,
    })
}

/// What an agent (or the centralized controller) sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserveMode {
    /// All arm states concatenated, then the object state (`6N + 2` values).
    Centralized,
    /// One arm's state, then the object state (8 values).
    Decentralized(usize),
}

pub fn observe<T: Scalar>(
    state: &EnvState<T>,
    mode: ObserveMode,
) -> Result<Vec<T>, EnvError> {
    match mode {
        ObserveMode::Centralized => {
            let mut out = Vec::with_capacity(ARM_STATE_DIM * state.agents.len() + OBJECT_STATE_DIM);
            for arm in &state.agents {
                arm.write_observation(&mut out);
            }
            out.push(state.object.height);
            out.push(state.object.tilt);
            Ok(out)
        }
        ObserveMode::Decentralized(index) => {
            let arm = state.agents.get(index).ok_or(EnvError::AgentIndex {
                index,
                n_agents: state.agents.len(),
            })?;
            let mut out = Vec::with_capacity(ARM_STATE_DIM + OBJECT_STATE_DIM);
            arm.write_observation(&mut out);
            out.push(state.object.height);
            out.push(state.object.tilt);
            Ok(out)
        }
    }
}

/// Observation-noise magnitudes for the fine-tuning protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation added to the observed disk height (meters).
    pub sigma_height: f64,
    /// Standard deviation added to the observed disk tilt (radians).
    pub sigma_tilt: f64,
}

/// Apply Gaussian sensor noise to the object-state entries (always the last
/// two) of an observation; arm-state entries are never touched.
pub fn noisy_observe<T: Scalar>(
    observation: &[T],
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Vec<T> {
    assert!(
        observation.len() >= OBJECT_STATE_DIM,
        "observation too short to carry an object state"
    );
    let mut out = observation.to_vec();
    let n = out.len();
    // Two draws are always consumed so the stream advance is fixed.
    let eps_height = T::standard_normal(rng);
    let eps_tilt = T::standard_normal(rng);
    out[n - 2] = out[n - 2] + real::<T>(noise.sigma_height) * eps_height;
    out[n - 1] = out[n - 1] + real::<T>(noise.sigma_tilt) * eps_tilt;
    out
}

/// One row of an exported trajectory (`step,height_m,tilt_rad,reward,terminated,reason`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u32,
    pub height_m: f64,
    pub tilt_rad: f64,
    pub reward: f64,
    pub terminated: bool,
    pub reason: TerminationReason,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::seeded_stream;
    use rand::Rng;

    /// Independent least-squares plane fit: assemble and solve the full 3x3
    /// normal equations by Gaussian elimination (no centering, no shared
    /// code with the implementation).
    #[allow(clippy::needless_range_loop)]
    fn reference_plane(points: &[(f64, f64, f64)]) -> (f64, f64, f64) {
        let n = points.len() as f64;
        let (mut sxx, mut sxy, mut sx) = (0.0, 0.0, 0.0);
        let (mut syy, mut sy) = (0.0, 0.0);
        let (mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0);
        for &(x, y, z) in points {
            sxx += x * x;
            sxy += x * y;
            sx += x;
            syy += y * y;
            sy += y;
            sxz += x * z;
            syz += y * z;
            sz += z;
        }
        let mut m = [
            [sxx, sxy, sx, sxz],
            [sxy, syy, sy, syz],
            [sx, sy, n, sz],
        ];
        // Gaussian elimination with partial pivoting.
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            for row in (col + 1)..3 {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        let c = m[2][3] / m[2][2];
        let b = (m[1][3] - m[1][2] * c) / m[1][1];
        let a = (m[0][3] - m[0][1] * b - m[0][2] * c) / m[0][0];
        (a, b, c)
    }

    fn polar_to_cartesian(grippers: &[(f64, f64, f64)]) -> Vec<(f64, f64, f64)> {
        grippers
            .iter()
            .map(|&(r, phi, h)| (r * phi.cos(), r * phi.sin(), h))
            .collect()
    }

    #[test]
    fn reset_places_the_disk_level_at_initial_height() {
        let cfg = EnvConfig::default();
        let state = reset::<f64>(&cfg, 7).unwrap();
        assert_eq!(state.agents.len(), 3);
        assert_eq!(state.object, ObjectState { height: 0.896, tilt: 0.0 });
        assert_eq!(state.step_count, 0);
        for arm in &state.agents {
            assert_eq!(arm.radial, 0.5);
            assert_eq!(arm.height, 0.896);
            assert_eq!(arm.grip, 0.0);
            assert_eq!((arm.d_radial, arm.d_height, arm.d_grip), (0.0, 0.0, 0.0));
        }
        assert_eq!(state.initial_grasp, vec![0.5; 3]);
    }

    #[test]
    fn reset_scales_to_any_agent_count() {
        let cfg = EnvConfig { n_agents: 5, ..EnvConfig::default() };
        let state = reset::<f64>(&cfg, 0).unwrap();
        assert_eq!(state.agents.len(), 5);
        assert_eq!(state.initial_grasp.len(), 5);
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::default();
        let a = reset::<f64>(&cfg, 7).unwrap();
        let b = reset::<f64>(&cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reset_rejects_single_agent() {
        let cfg = EnvConfig { n_agents: 1, ..EnvConfig::default() };
        assert!(matches!(reset::<f64>(&cfg, 0), Err(EnvError::TooFewAgents { got: 1 })));
    }

    #[test]
    fn joint_max_lift_raises_the_disk_by_one_bound() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let lift = [[0.05, 0.0, 0.0]; 3];
        let result = step(&mut state, &lift, &cfg).unwrap();
        assert!((result.object.height - 0.946).abs() < 1e-15);
        assert_eq!(result.object.tilt, 0.0);
        assert!((result.reward - 0.946).abs() < 1e-15);
        assert!(!result.terminated);
        assert_eq!(result.reason, TerminationReason::None);
        assert_eq!(state.agents[0].d_height, 0.05);
    }

    #[test]
    fn actions_clamp_to_the_bound() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let oversized = [[0.2, 0.0, 0.0]; 3];
        let result = step(&mut state, &oversized, &cfg).unwrap();
        assert!((result.object.height - 0.946).abs() < 1e-15, "0.2 clamps to 0.05");
        assert_eq!(state.agents[0].d_height, 0.05);
    }

    #[test]
    fn radial_drift_past_delta_ends_the_episode() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let mut actions = [[0.0; 3]; 3];
        actions[0][1] = 0.05; // radial displacement: |rho - rho_0| = 0.05 > 0.03
        let result = step(&mut state, &actions, &cfg).unwrap();
        assert!(result.terminated);
        assert_eq!(result.reason, TerminationReason::GripDeviation);
        assert!(result.reason.is_safety());
    }

    #[test]
    fn grip_scalar_drift_folds_into_the_grip_check() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let squeeze = [[0.0, 0.0, 0.05]; 3];
        // 10 steps reach exactly 0.5 (not > 0.5): still alive.
        for k in 1..=10 {
            let result = step(&mut state, &squeeze, &cfg).unwrap();
            assert!(!result.terminated, "step {k}: |g| = {} within band", state.agents[0].grip);
        }
        // The 11th crosses the band.
        let result = step(&mut state, &squeeze, &cfg).unwrap();
        assert!(result.terminated);
        assert_eq!(result.reason, TerminationReason::GripDeviation);
    }

    #[test]
    fn idle_team_survives_to_the_horizon() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let idle = [[0.0; 3]; 3];
        for k in 1..=199 {
            let result = step(&mut state, &idle, &cfg).unwrap();
            assert!(!result.terminated, "terminated early at step {k}");
            assert_eq!(result.object.height, 0.896);
        }
        let last = step(&mut state, &idle, &cfg).unwrap();
        assert!(last.terminated);
        assert_eq!(last.reason, TerminationReason::Horizon);
        assert!(!last.reason.is_safety(), "horizon is truncation, not failure");
    }

    #[test]
    fn step_rejects_wrong_action_count() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let two = [[0.0; 3]; 2];
        assert!(matches!(
            step(&mut state, &two, &cfg),
            Err(EnvError::ActionCount { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn level_grippers_give_zero_tilt_and_centered_disk() {
        let grippers: Vec<(f64, f64, f64)> = station_angles::<f64>(3)
            .into_iter()
            .map(|phi| (0.5, phi, 1.2))
            .collect();
        let pose = object_pose(&grippers, 0.5).unwrap();
        assert_eq!(pose.height, 1.2);
        assert_eq!(pose.tilt, 0.0);
        assert!(pose.center_dev[0].abs() < 1e-15);
        assert!(pose.center_dev[1].abs() < 1e-15);
    }

    #[test]
    fn pose_matches_an_independent_least_squares_fit() {
        let angles = station_angles::<f64>(3);
        let heights = [1.1, 1.0, 1.0];
        let grippers: Vec<(f64, f64, f64)> = angles
            .iter()
            .zip(heights)
            .map(|(&phi, h)| (0.5, phi, h))
            .collect();
        let pose = object_pose(&grippers, 0.5).unwrap();

        let (a, b, c) = reference_plane(&polar_to_cartesian(&grippers));
        let cart = polar_to_cartesian(&grippers);
        let centroid_x = cart.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let centroid_y = cart.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let expected_height = a * centroid_x + b * centroid_y + c;
        let expected_tilt = (a * a + b * b).sqrt().atan();

        assert!((pose.height - 31.0 / 30.0).abs() < 1e-12, "mean height is 31/30");
        assert!((pose.height - expected_height).abs() < 1e-12);
        assert!((pose.tilt - expected_tilt).abs() < 1e-12);
        assert!(pose.tilt > 0.0);
    }

    #[test]
    fn pose_matches_reference_for_uneven_radii_and_many_agents() {
        let mut rng = seeded_stream(21, 0);
        for &n in &[3usize, 4, 5, 8] {
            let angles = station_angles::<f64>(n);
            let grippers: Vec<(f64, f64, f64)> = angles
                .iter()
                .map(|&phi| {
                    (
                        0.5 + rng.gen_range(-0.02..0.02),
                        phi,
                        0.9 + rng.gen_range(-0.1..0.1),
                    )
                })
                .collect();
            let pose = object_pose(&grippers, 0.5).unwrap();
            let cart = polar_to_cartesian(&grippers);
            let (a, b, c) = reference_plane(&cart);
            let cx = cart.iter().map(|p| p.0).sum::<f64>() / n as f64;
            let cy = cart.iter().map(|p| p.1).sum::<f64>() / n as f64;
            assert!(
                (pose.height - (a * cx + b * cy + c)).abs() < 1e-12,
                "n = {n} height"
            );
            assert!(
                (pose.tilt - (a * a + b * b).sqrt().atan()).abs() < 1e-12,
                "n = {n} tilt"
            );
        }
    }

    #[test]
    fn uniform_radial_drift_keeps_the_center_fixed() {
        // Equal offsets along symmetric stations cancel exactly.
        let angles = station_angles::<f64>(3);
        let grippers: Vec<(f64, f64, f64)> =
            angles.iter().map(|&phi| (0.52, phi, 1.0)).collect();
        let pose = object_pose(&grippers, 0.5).unwrap();
        assert!(pose.center_dev[0].abs() < 1e-15);
        assert!(pose.center_dev[1].abs() < 1e-15);
    }

    #[test]
    fn two_agents_fall_back_to_the_line_slope() {
        let angles = station_angles::<f64>(2);
        let grippers = [(0.5, angles[0], 1.0), (0.5, angles[1], 1.2)];
        let pose = object_pose(&grippers, 0.5).unwrap();
        // Stations sit at +/-0.5 on the x axis: distance 1, rise 0.2.
        assert!((pose.height - 1.1).abs() < 1e-15);
        assert!((pose.tilt - 0.2f64.atan()).abs() < 1e-12);
    }

    #[test]
    fn pose_needs_at_least_two_grippers() {
        let grippers = [(0.5f64, 0.0, 1.0)];
        assert!(matches!(
            object_pose(&grippers, 0.5),
            Err(EnvError::TooFewAgents { got: 1 })
        ));
    }

    #[test]
    fn termination_checks_run_in_fixed_order() {
        // Both the grip band and the tilt limit are violated after one step;
        // grip deviation is checked first and must win.
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        state.agents[0].height = 2.5; // tilt far beyond pi/4
        state.agents[0].radial = 0.58; // grasp drift beyond delta
        let idle = [[0.0; 3]; 3];
        let result = step(&mut state, &idle, &cfg).unwrap();
        assert!(result.object.tilt > cfg.tilt_limit, "tilt limit is indeed violated");
        assert_eq!(result.reason, TerminationReason::GripDeviation);
    }

    #[test]
    fn center_deviation_fires_when_grip_allows_it() {
        // Disable the grip check with a huge delta, then drag one gripper
        // inward until the mean center offset crosses eps.
        let cfg = EnvConfig {
            grip_deviation_delta: 10.0,
            ..EnvConfig::default()
        };
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let mut pull = [[0.0; 3]; 3];
        pull[0][1] = -0.05;
        let mut last = None;
        for _ in 0..4 {
            last = Some(step(&mut state, &pull, &cfg).unwrap());
            if last.as_ref().unwrap().terminated {
                break;
            }
        }
        let result = last.unwrap();
        assert!(result.terminated, "center deviation should trip within 4 steps");
        assert_eq!(result.reason, TerminationReason::CenterDeviation);
    }

    #[test]
    fn tilt_limit_threshold_is_exact() {
        // Directly probe the pose-to-termination boundary around pi/4.
        let cfg = EnvConfig {
            grip_deviation_delta: 10.0,
            center_deviation_eps: 10.0,
            horizon: 1000,
            ..EnvConfig::default()
        };
        // Solve for the height offset giving tilt exactly pi/4 at station 0:
        // slope = 4*delta_h/3 for equal radii 0.5 (see the plane fit), so
        // delta_h = 3/4 gives tan(tilt) = 1.
        for (bump, expect_end) in [(0.75 - 1e-9, false), (0.75 + 1e-9, true)] {
            let mut state = reset::<f64>(&cfg, 0).unwrap();
            state.agents[0].height = 0.896 + bump;
            let idle = [[0.0; 3]; 3];
            let result = step(&mut state, &idle, &cfg).unwrap();
            let crossed = result.reason == TerminationReason::TiltLimit;
            assert_eq!(
                crossed, expect_end,
                "bump {bump}: tilt {} vs limit {}",
                result.object.tilt, cfg.tilt_limit
            );
        }
    }

    #[test]
    fn symmetric_actions_preserve_symmetry() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let mut rng = seeded_stream(3, 1);
        for _ in 0..50 {
            let a = [
                rng.gen_range(-0.03..0.03),
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.02..0.02),
            ];
            let joint = [a; 3];
            let result = step(&mut state, &joint, &cfg).unwrap();
            assert!(result.object.tilt.abs() < 1e-12, "identical actions keep the disk level");
            if result.terminated {
                break;
            }
        }
    }

    #[test]
    fn object_state_always_matches_a_fresh_pose_fit() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let mut rng = seeded_stream(5, 2);
        for _ in 0..30 {
            let actions: Vec<[f64; 3]> = (0..3)
                .map(|_| {
                    [
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.01..0.01),
                        rng.gen_range(-0.05..0.05),
                    ]
                })
                .collect();
            let result = step(&mut state, &actions, &cfg).unwrap();
            let pose = object_pose(&gripper_triples(&state), 0.5).unwrap();
            assert_eq!(state.object.height, pose.height, "stored pose is the fitted pose");
            assert_eq!(state.object.tilt, pose.tilt);
            if result.terminated {
                break;
            }
        }
    }

    #[test]
    fn reward_is_height_minus_weighted_tilt() {
        let cfg = EnvConfig { tilt_weight: 2.0, grip_deviation_delta: 10.0, ..EnvConfig::default() };
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let mut actions = [[0.0; 3]; 3];
        actions[0][0] = 0.05;
        let result = step(&mut state, &actions, &cfg).unwrap();
        let expected = result.object.height - 2.0 * result.object.tilt;
        assert!((result.reward - expected).abs() < 1e-15);
        assert!(result.object.tilt > 0.0);
    }

    #[test]
    fn observation_layouts_and_widths() {
        let cfg = EnvConfig::default();
        let mut state = reset::<f64>(&cfg, 0).unwrap();
        let mut actions = [[0.0; 3]; 3];
        actions[1][0] = 0.02;
        step(&mut state, &actions, &cfg).unwrap();

        let central = observe(&state, ObserveMode::Centralized).unwrap();
        assert_eq!(central.len(), 20, "6 * 3 + 2");
        assert_eq!(central[18], state.object.height);
        assert_eq!(central[19], state.object.tilt);

        let local = observe(&state, ObserveMode::Decentralized(1)).unwrap();
        assert_eq!(local.len(), 8, "6 + 2");
        assert_eq!(local[0], state.agents[1].radial);
        assert_eq!(local[1], state.agents[1].height);
        assert_eq!(local[4], 0.02, "stored vertical displacement");
        assert_eq!(local[6], state.object.height);
        assert_eq!(local[7], state.object.tilt);
    }

    #[test]
    fn local_observation_width_is_agent_count_invariant() {
        for n in [2usize, 3, 5, 8] {
            let cfg = EnvConfig { n_agents: n, ..EnvConfig::default() };
            let state = reset::<f64>(&cfg, 0).unwrap();
            let local = observe(&state, ObserveMode::Decentralized(0)).unwrap();
            assert_eq!(local.len(), 8, "n = {n}");
            let central = observe(&state, ObserveMode::Centralized).unwrap();
            assert_eq!(central.len(), 6 * n + 2, "n = {n}");
        }
    }

    #[test]
    fn observe_rejects_out_of_range_agent() {
        let cfg = EnvConfig::default();
        let state = reset::<f64>(&cfg, 0).unwrap();
        assert!(matches!(
            observe(&state, ObserveMode::Decentralized(3)),
            Err(EnvError::AgentIndex { index: 3, n_agents: 3 })
        ));
    }

    #[test]
    fn zero_noise_is_identity() {
        let cfg = EnvConfig::default();
        let state = reset::<f64>(&cfg, 0).unwrap();
        let obs = observe(&state, ObserveMode::Decentralized(0)).unwrap();
        let mut rng = seeded_stream(1, 3);
        let noisy = noisy_observe(&obs, &NoiseConfig { sigma_height: 0.0, sigma_tilt: 0.0 }, &mut rng);
        assert_eq!(noisy, obs);
    }

    #[test]
    fn noise_touches_only_the_object_entries_with_configured_spread() {
        let cfg = EnvConfig::default();
        let state = reset::<f64>(&cfg, 0).unwrap();
        let obs = observe(&state, ObserveMode::Decentralized(0)).unwrap();
        let noise = NoiseConfig {
            sigma_height: 0.01,
            sigma_tilt: std::f64::consts::PI / 180.0,
        };
        let mut rng = seeded_stream(9, 4);
        let n = 100_000;
        let (mut sum_h, mut sum_h2) = (0.0, 0.0);
        let (mut sum_t, mut sum_t2) = (0.0, 0.0);
        for _ in 0..n {
            let noisy = noisy_observe(&obs, &noise, &mut rng);
            assert_eq!(&noisy[..6], &obs[..6], "arm entries must be untouched");
            let dh = noisy[6] - obs[6];
            let dt = noisy[7] - obs[7];
            sum_h += dh;
            sum_h2 += dh * dh;
            sum_t += dt;
            sum_t2 += dt * dt;
        }
        let std_h = ((sum_h2 - sum_h * sum_h / n as f64) / (n as f64 - 1.0)).sqrt();
        let std_t = ((sum_t2 - sum_t * sum_t / n as f64) / (n as f64 - 1.0)).sqrt();
        assert!((std_h / noise.sigma_height - 1.0).abs() < 0.02, "height noise std {std_h}");
        assert!((std_t / noise.sigma_tilt - 1.0).abs() < 0.02, "tilt noise std {std_t}");
    }

    #[test]
    fn rollouts_are_bit_reproducible() {
        let cfg = EnvConfig::default();
        let run = || {
            let mut state = reset::<f64>(&cfg, 11).unwrap();
            let mut rng = seeded_stream(11, 5);
            let mut rewards = Vec::new();
            for _ in 0..100 {
                let actions: Vec<[f64; 3]> = (0..3)
                    .map(|_| {
                        [
                            rng.gen_range(-0.05..0.05),
                            rng.gen_range(-0.05..0.05),
                            rng.gen_range(-0.05..0.05),
                        ]
                    })
                    .collect();
                let result = step(&mut state, &actions, &cfg).unwrap();
                rewards.push(result.reward);
                if result.terminated {
                    break;
                }
            }
            (state, rewards)
        };
        let (s1, r1) = run();
        let (s2, r2) = run();
        assert_eq!(s1, s2);
        assert_eq!(r1, r2);
    }
}
