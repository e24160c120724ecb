//! Bootstrap values and multi-horizon n-step targets.
//!
//! The per-window target vector holds one value per horizon,
//! `g[i] = sum_{j<i} gamma^j r_{t+j} + gamma^i V(s_{t+i})`, with rewards
//! masked past the first terminal and the bootstrap term zeroed once a
//! terminal occurred at or before the bootstrap state. `V` is the expected
//! target-critic value under fresh policy actions — the recorded actions are
//! never density-evaluated, which is what removes the need for importance
//! sampling.

use ndarray::Array2;
use rand::RngCore;

use crate::nets::{Critic, GaussianPolicy, WindowInput};
use crate::replay::Window;

/// Per-horizon targets for one window: `g[i-1]` supervises the prefix of
/// length `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    pub g: Vec<f64>,
}

/// Anything that can draw bootstrap actions for a state. The learned policy
/// implements it; fixed-policy evaluation supplies its own.
pub trait BootstrapPolicy {
    fn sample_action(&self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

impl BootstrapPolicy for GaussianPolicy {
    fn sample_action(&self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let head = self.forward(obs).expect("finite observation");
        self.sample(&head, &mut &mut *rng).0
    }
}

/// Monte-Carlo estimate of `V(s) = E_{a ~ pi}[Q_target(s, a)]` using the
/// critic at a single action token. With twin critics the minimum over the
/// pair is averaged. No entropy term enters the value.
pub fn bootstrap_value(
    state: &[f64],
    policy: &dyn BootstrapPolicy,
    target_critics: &[Critic],
    n_action_samples: usize,
    rng: &mut dyn RngCore,
) -> f64 {
    assert!(n_action_samples >= 1);
    let mut total = 0.0;
    for _ in 0..n_action_samples {
        let action = policy.sample_action(state, rng);
        let actions = Array2::from_shape_vec((1, action.len()), action).expect("shape");
        let q = target_critics
            .iter()
            .map(|c| c.q_values(state, &actions.view()).expect("finite inputs")[0])
            .fold(f64::INFINITY, f64::min);
        total += q;
    }
    total / n_action_samples as f64
}

/// Batched version of [`bootstrap_value`]: one value per state, each from
/// `n_action_samples` fresh policy actions, evaluated in a single packed
/// critic pass per sample round.
pub fn bootstrap_values_batch(
    states: &[&[f64]],
    policy: &dyn BootstrapPolicy,
    target_critics: &[Critic],
    n_action_samples: usize,
    rng: &mut dyn RngCore,
) -> Vec<f64> {
    assert!(n_action_samples >= 1);
    if states.is_empty() {
        return Vec::new();
    }
    let mut totals = vec![0.0; states.len()];
    for _ in 0..n_action_samples {
        let sampled: Vec<Vec<f64>> = states
            .iter()
            .map(|s| policy.sample_action(s, rng))
            .collect();
        let act_dim = sampled[0].len();
        let actions_mats: Vec<Array2<f64>> = sampled
            .into_iter()
            .map(|a| Array2::from_shape_vec((1, act_dim), a).expect("shape"))
            .collect();
        let windows: Vec<WindowInput> = states
            .iter()
            .zip(&actions_mats)
            .map(|(s, a)| WindowInput {
                state: s,
                actions: a.view(),
            })
            .collect();
        let mut mins: Vec<f64> = vec![f64::INFINITY; states.len()];
        for critic in target_critics {
            let (q, _) = critic.forward(&windows).expect("finite inputs");
            for (m, qs) in mins.iter_mut().zip(&q) {
                *m = m.min(qs[0]);
            }
        }
        for (t, m) in totals.iter_mut().zip(&mins) {
            *t += m;
        }
    }
    for t in totals.iter_mut() {
        *t /= n_action_samples as f64;
    }
    totals
}

/// Builds the target vector for one window from per-step bootstrap values
/// (`v_boot[i-1]` is `V` at the window's state row `i`).
pub fn nstep_targets(window: &Window, v_boot: &[f64], gamma: f64) -> TargetVector {
    let n = window.horizon;
    debug_assert_eq!(v_boot.len(), n);
    let mut g = Vec::with_capacity(n);
    let mut reward_acc = 0.0;
    let mut discount = 1.0;
    let mut terminal_seen = false;
    for j in 0..n {
        reward_acc += discount * window.rewards[j] * f64::from(window.mask[j]);
        discount *= gamma;
        terminal_seen = terminal_seen || window.dones[j];
        let boot = if terminal_seen { 0.0 } else { v_boot[j] };
        g.push(reward_acc + discount * boot);
    }
    TargetVector { g }
}

/// Mean of the per-horizon targets (the target-side averaging ablation;
/// supervises only the final prefix position).
pub fn averaged_target(targets: &TargetVector) -> f64 {
    targets.g.iter().sum::<f64>() / targets.g.len() as f64
}
