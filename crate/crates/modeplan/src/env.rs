//! Continuous-control environments. The concrete task is sparse-reward
//! continuous mountain car: an underpowered car in a valley that must build
//! momentum to crest the right hill. Dynamics are pure functions of
//! (state, control), so rollouts are trivially reproducible.

use nalgebra::DVector;

use crate::config::EnvConfig;

/// One transition outcome in vector form.
#[derive(Debug, Clone)]
pub struct EnvStep {
    pub state: DVector<f64>,
    pub reward: f64,
    pub terminated: bool,
}

/// Vector-space interface the agent and harness operate against. States and
/// controls are plain vectors; bounds describe the box the task lives in.
pub trait ContinuousEnv {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn state_lower(&self) -> DVector<f64>;
    fn state_upper(&self) -> DVector<f64>;
    fn control_lower(&self) -> DVector<f64>;
    fn control_upper(&self) -> DVector<f64>;
    /// Initial state. Deterministic: every episode starts identically.
    fn reset(&self) -> DVector<f64>;
    fn step(&self, state: &DVector<f64>, control: &DVector<f64>) -> EnvStep;
}

/// Sparse-reward continuous mountain car.
#[derive(Debug, Clone)]
pub struct MountainCar {
    cfg: EnvConfig,
}

impl MountainCar {
    pub fn new(cfg: EnvConfig) -> Self {
        MountainCar { cfg }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Scalar-form step. `force` is clamped to the control bounds, velocity
    /// integrates the engine force against the slope, and position integrates
    /// velocity; both are clamped to their boxes. The episode terminates, and
    /// the goal reward is granted, exactly when the new position reaches the
    /// goal.
    pub fn step_scalar(&self, position: f64, velocity: f64, force: f64) -> (f64, f64, f64, bool) {
        let c = &self.cfg;
        let force = force.clamp(c.control_min, c.control_max);
        let velocity = (velocity + force * c.power - c.gravity * (3.0 * position).cos())
            .clamp(-c.speed_limit, c.speed_limit);
        let position = (position + velocity).clamp(c.position_min, c.position_max);
        let terminated = position >= c.goal_position;
        let mut reward = -c.control_cost_weight * force * force;
        if terminated {
            reward += c.goal_reward;
        }
        (position, velocity, reward, terminated)
    }
}

impl ContinuousEnv for MountainCar {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn state_lower(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.cfg.position_min, -self.cfg.speed_limit])
    }

    fn state_upper(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.cfg.position_max, self.cfg.speed_limit])
    }

    fn control_lower(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.cfg.control_min])
    }

    fn control_upper(&self) -> DVector<f64> {
        DVector::from_row_slice(&[self.cfg.control_max])
    }

    fn reset(&self) -> DVector<f64> {
        DVector::zeros(2)
    }

    fn step(&self, state: &DVector<f64>, control: &DVector<f64>) -> EnvStep {
        assert_eq!(state.len(), 2, "mountain car state is (position, velocity)");
        assert_eq!(control.len(), 1, "mountain car control is a single force");
        let (p, v, reward, terminated) = self.step_scalar(state[0], state[1], control[0]);
        EnvStep {
            state: DVector::from_row_slice(&[p, v]),
            reward,
            terminated,
        }
    }
}
