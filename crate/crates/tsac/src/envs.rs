//! Toy continuous-control tasks.
//!
//! Both tasks are damped-free point masses driven by bounded accelerations
//! under explicit Euler integration, with a goal position resampled per
//! episode. They run a fixed horizon with no early termination, and expose
//! dense (`-distance` every step) and sparse (`-distance` only at the final
//! step) reward modes. Simple enough that value functions can be checked by
//! brute-force rollouts.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Integration step.
const DT: f64 = 0.1;
/// Success tolerance on the goal distance, in normalized units.
const TOL: f64 = 0.1;
/// Goal positions are resampled uniformly from `[-GOAL_RANGE, GOAL_RANGE]`.
const GOAL_RANGE: f64 = 0.8;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment id `{0}` (known: pointmass-2d, chain-reach)")]
    UnknownEnv(String),
    #[error("step() called on a finished episode; reset() first")]
    EpisodeDone,
    #[error("action has dimension {got}, expected {expected}")]
    ActionShape { got: usize, expected: usize },
    #[error("action contains a non-finite component")]
    NonFiniteAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Dense,
    Sparse,
}

/// Static description of a task.
#[derive(Debug, Clone, Copy)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub reward_mode: RewardMode,
}

/// Snapshot of an episode in progress.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
    pub done: bool,
    pub success: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// A single-owner environment instance.
pub trait Env {
    fn spec(&self) -> EnvSpec;
    /// Starts a new episode, deterministically for a given seed.
    fn reset(&mut self, seed: u64) -> EnvState;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError>;
}

/// Point mass with position/velocity state and a per-episode goal;
/// observation is `[x, v, goal]`.
pub struct PointMass {
    dim: usize,
    horizon: usize,
    reward_mode: RewardMode,
    pos: Vec<f64>,
    vel: Vec<f64>,
    goal: Vec<f64>,
    step_index: usize,
    done: bool,
}

impl PointMass {
    pub fn new(dim: usize, horizon: usize, reward_mode: RewardMode) -> Self {
        Self {
            dim,
            horizon,
            reward_mode,
            pos: vec![0.0; dim],
            vel: vec![0.0; dim],
            goal: vec![0.0; dim],
            step_index: 0,
            done: true,
        }
    }

    fn distance_to_goal(&self) -> f64 {
        self.pos
            .iter()
            .zip(&self.goal)
            .map(|(x, g)| (x - g) * (x - g))
            .sum::<f64>()
            .sqrt()
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(3 * self.dim);
        obs.extend_from_slice(&self.pos);
        obs.extend_from_slice(&self.vel);
        obs.extend_from_slice(&self.goal);
        obs
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation(),
            step_index: self.step_index,
            done: self.done,
            success: self.distance_to_goal() <= TOL,
        }
    }
}

impl Env for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 3 * self.dim,
            act_dim: self.dim,
            horizon: self.horizon,
            reward_mode: self.reward_mode,
        }
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos.fill(0.0);
        self.vel.fill(0.0);
        for g in &mut self.goal {
            *g = rng.random_range(-GOAL_RANGE..GOAL_RANGE);
        }
        self.step_index = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.dim {
            return Err(EnvError::ActionShape {
                got: action.len(),
                expected: self.dim,
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        // Position advances on the old velocity, then velocity picks up the
        // (clipped) acceleration.
        for i in 0..self.dim {
            self.pos[i] += DT * self.vel[i];
            self.vel[i] += DT * action[i].clamp(-1.0, 1.0);
        }
        self.step_index += 1;
        self.done = self.step_index == self.horizon;
        let dist = self.distance_to_goal();
        let reward = match self.reward_mode {
            RewardMode::Dense => -dist,
            RewardMode::Sparse if self.done => -dist,
            RewardMode::Sparse => 0.0,
        };
        Ok(StepOutcome {
            state: self.state(),
            reward,
            done: self.done,
            success: dist <= TOL,
        })
    }
}

/// Instantiates a task by its string id.
pub fn make_env(id: &str, reward_mode: RewardMode) -> Result<Box<dyn Env>, EnvError> {
    match id {
        "pointmass-2d" => Ok(Box::new(PointMass::new(2, 50, reward_mode))),
        "chain-reach" => Ok(Box::new(PointMass::new(1, 25, reward_mode))),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}
