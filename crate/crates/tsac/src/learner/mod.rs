//! The training core: multi-horizon critic updates without importance
//! sampling, SAC-style policy and temperature updates, and the two target
//! schedules.
//!
//! Per critic update, every valid prefix of every sampled window is
//! supervised by its own n-step target, and the loss is the mean over
//! horizons (then windows). Differentiation is linear, so minimizing that
//! mean realizes gradient-level averaging across horizons exactly. Replayed
//! actions enter only through the critic's inputs: the policy density is
//! evaluated solely for freshly sampled actions, and [`Learner::critic_update`]
//! asserts at runtime that no replayed action was density-evaluated.

mod schedule;
mod targets;

pub use schedule::{FreezeSchedule, SpanAction, TargetMode};
pub use targets::{
    averaged_target, bootstrap_value, bootstrap_values_batch, nstep_targets, BootstrapPolicy,
    TargetVector,
};

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::envs::EnvError;
use crate::nets::{
    build_critic, hard_copy, param_count, polyak_update, AdamW, Critic, CriticConfig,
    GaussianPolicy, NamedParams, NetError, PolicyConfig, WindowInput,
};
use crate::replay::{ReplayError, Window};
use crate::rng::{substream, Stream};

/// Losses above this magnitude (or any non-finite value) abort the run.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("divergence guard tripped at critic update {update}: loss = {loss}")]
    Diverged { update: u64, loss: f64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("replayed actions were density-evaluated during a critic update")]
    DensityLeak,
}

/// Static learner setup; field meanings follow the run configuration.
pub struct LearnerConfig {
    pub critic: CriticConfig,
    pub policy: PolicyConfig,
    pub gamma: f64,
    pub target_mode: TargetMode,
    pub lr_critic: f64,
    pub lr_policy: f64,
    pub lr_alpha: f64,
    pub weight_decay: f64,
    pub twin_critic: bool,
    /// Supervise only the last prefix with the horizon-averaged target
    /// (destabilization ablation) instead of per-horizon targets.
    pub averaged_target_mode: bool,
    pub n_action_samples: usize,
    pub target_entropy: f64,
    pub alpha_init: f64,
    pub seed: u64,
}

/// Result of one critic update.
pub struct CriticUpdateInfo {
    pub loss: f64,
    pub targets: Vec<TargetVector>,
}

/// Result of one policy update.
pub struct PolicyUpdateInfo {
    pub loss: f64,
    pub mean_log_prob: f64,
}

/// Scalar Adam state for the temperature parameter.
struct ScalarAdam {
    m: f64,
    v: f64,
    step: u64,
}

/// Sampled policy outputs carried between the sampling and update halves of
/// a policy step.
struct PolicyPrep {
    mean: Array2<f64>,
    cache: crate::nets::PolicyCache,
    u: Array2<f64>,
    actions: Array2<f64>,
    log_probs: Vec<f64>,
}

pub struct Learner {
    pub policy: GaussianPolicy,
    critics: Vec<Critic>,
    target_critics: Vec<Critic>,
    schedule: FreezeSchedule,
    critic_opts: Vec<AdamW>,
    policy_opt: AdamW,
    log_alpha: f64,
    alpha_adam: ScalarAdam,
    lr_alpha: f64,
    target_entropy: f64,
    gamma: f64,
    n_action_samples: usize,
    averaged_target_mode: bool,
    bootstrap_override: Option<Box<dyn BootstrapPolicy>>,
    rng_policy: ChaCha8Rng,
    rng_bootstrap: ChaCha8Rng,
}

impl Learner {
    pub fn new(cfg: LearnerConfig) -> Self {
        let mut init_rng = substream(cfg.seed, Stream::NetsInit);
        let n_critics = if cfg.twin_critic { 2 } else { 1 };
        let critics: Vec<Critic> = (0..n_critics)
            .map(|_| build_critic(&cfg.critic, &mut init_rng))
            .collect();
        let target_critics = critics.clone();
        let policy = GaussianPolicy::new(cfg.policy.clone(), &mut init_rng);
        let critic_opts = critics
            .iter()
            .map(|c| AdamW::new(cfg.lr_critic, cfg.weight_decay, param_count(c)))
            .collect();
        let policy_opt = AdamW::new(cfg.lr_policy, cfg.weight_decay, param_count(&policy));
        Self {
            policy,
            critics,
            target_critics,
            schedule: FreezeSchedule::new(cfg.target_mode),
            critic_opts,
            policy_opt,
            log_alpha: cfg.alpha_init.ln(),
            alpha_adam: ScalarAdam {
                m: 0.0,
                v: 0.0,
                step: 0,
            },
            lr_alpha: cfg.lr_alpha,
            target_entropy: cfg.target_entropy,
            gamma: cfg.gamma,
            n_action_samples: cfg.n_action_samples,
            averaged_target_mode: cfg.averaged_target_mode,
            bootstrap_override: None,
            rng_policy: substream(cfg.seed, Stream::PolicySampling),
            rng_bootstrap: substream(cfg.seed, Stream::BootstrapSampling),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn critic(&self) -> &Critic {
        &self.critics[0]
    }

    pub fn critics(&self) -> &[Critic] {
        &self.critics
    }

    pub fn target_critic(&self) -> &Critic {
        &self.target_critics[0]
    }

    pub fn schedule(&self) -> &FreezeSchedule {
        &self.schedule
    }

    pub fn critic_updates_done(&self) -> u64 {
        self.schedule.updates_done()
    }

    /// Replaces the learned policy as the source of bootstrap actions
    /// (fixed-policy evaluation).
    pub fn set_bootstrap_override(&mut self, policy: Box<dyn BootstrapPolicy>) {
        self.bootstrap_override = Some(policy);
    }

    /// Adjusts the critic step size (crude annealing for evaluation runs).
    pub fn set_critic_lr(&mut self, lr: f64) {
        for opt in &mut self.critic_opts {
            opt.lr = lr;
        }
    }

    /// Stochastic action for data collection.
    pub fn sample_action(&mut self, obs: &[f64]) -> Result<Vec<f64>, TrainError> {
        let head = self.policy.forward(obs)?;
        Ok(self.policy.sample(&head, &mut self.rng_policy).0)
    }

    /// Uniform exploration action used before learning starts.
    pub fn uniform_action(&mut self, act_dim: usize) -> Vec<f64> {
        use rand::Rng;
        (0..act_dim)
            .map(|_| self.rng_policy.random_range(-1.0..1.0))
            .collect()
    }

    /// Deterministic evaluation action.
    pub fn greedy_action(&self, obs: &[f64]) -> Result<Vec<f64>, TrainError> {
        let head = self.policy.forward(obs)?;
        Ok(self.policy.deterministic_action(&head))
    }

    /// Bootstrap values for every window state row `1..=n`, respecting the
    /// freeze schedule's cache. Returns one vector per window.
    fn window_bootstrap_values(&mut self, windows: &[Window]) -> Vec<Vec<f64>> {
        // Gather cache misses.
        let mut misses: Vec<(u64, usize)> = Vec::new();
        let mut miss_states: Vec<&[f64]> = Vec::new();
        for w in windows {
            for i in 1..=w.horizon {
                let key = (w.segment_id, w.start + i);
                if self.schedule.cached(key.0, key.1).is_none()
                    && !misses.contains(&key)
                {
                    misses.push(key);
                    miss_states.push(w.states.row(i).to_slice().expect("contiguous row"));
                }
            }
        }
        if !misses.is_empty() {
            let policy: &dyn BootstrapPolicy = match &self.bootstrap_override {
                Some(p) => p.as_ref(),
                None => &self.policy,
            };
            let values = bootstrap_values_batch(
                &miss_states,
                policy,
                &self.target_critics,
                self.n_action_samples,
                &mut self.rng_bootstrap,
            );
            match self.schedule.mode {
                TargetMode::HardFreeze { .. } => {
                    for (key, v) in misses.iter().zip(&values) {
                        self.schedule.insert(key.0, key.1, *v);
                    }
                }
                TargetMode::SoftPolyak { .. } => {
                    // No caching: values drift with every Polyak step. Use
                    // a transient map for this batch only.
                    let map: std::collections::HashMap<(u64, usize), f64> =
                        misses.iter().copied().zip(values.iter().copied()).collect();
                    return windows
                        .iter()
                        .map(|w| {
                            (1..=w.horizon)
                                .map(|i| map[&(w.segment_id, w.start + i)])
                                .collect()
                        })
                        .collect();
                }
            }
        }
        windows
            .iter()
            .map(|w| {
                (1..=w.horizon)
                    .map(|i| {
                        self.schedule
                            .cached(w.segment_id, w.start + i)
                            .expect("filled above")
                    })
                    .collect()
            })
            .collect()
    }

    /// Computes the target vectors the next critic update would use, without
    /// touching parameters; advances the snapshot schedule exactly as the
    /// update would.
    fn prepare_targets(&mut self, windows: &[Window]) -> Vec<TargetVector> {
        if self.schedule.begin_update() == SpanAction::Snapshot {
            for (t, c) in self.target_critics.iter_mut().zip(&self.critics) {
                hard_copy(t, c);
            }
        }
        let boots = self.window_bootstrap_values(windows);
        windows
            .iter()
            .zip(&boots)
            .map(|(w, v)| nstep_targets(w, v, self.gamma))
            .collect()
    }

    /// One critic update on a batch of sampled windows: per-horizon squared
    /// errors averaged over horizons then windows, one optimizer step per
    /// critic, then the schedule's target update.
    pub fn critic_update(&mut self, windows: &[Window]) -> Result<CriticUpdateInfo, TrainError> {
        let density_evals_before = self.policy.external_density_evals();
        let targets = self.prepare_targets(windows);

        let inputs: Vec<WindowInput> = windows
            .iter()
            .map(|w| WindowInput {
                state: w.states.row(0).to_slice().expect("contiguous row"),
                actions: w.actions.view(),
            })
            .collect();
        let batch = windows.len() as f64;
        let mut total_loss = 0.0;
        for ci in 0..self.critics.len() {
            let (q, cache) = self.critics[ci].forward(&inputs)?;
            let mut dq: Vec<Vec<f64>> = q.iter().map(|qs| vec![0.0; qs.len()]).collect();
            let mut loss = 0.0;
            if self.averaged_target_mode {
                // Ablation: one averaged target at the last valid prefix.
                for (w, window) in windows.iter().enumerate() {
                    let Some(last_valid) =
                        (0..window.horizon).rev().find(|i| window.mask[*i] == 1)
                    else {
                        continue;
                    };
                    let avg = targets[w].g[..=last_valid].iter().sum::<f64>()
                        / (last_valid + 1) as f64;
                    let err = q[w][last_valid] - avg;
                    loss += err * err / batch;
                    dq[w][last_valid] = 2.0 * err / batch;
                }
            } else {
                for (w, window) in windows.iter().enumerate() {
                    let horizons = window.horizon as f64;
                    for i in 0..window.horizon {
                        if window.mask[i] == 0 {
                            continue;
                        }
                        let err = q[w][i] - targets[w].g[i];
                        loss += err * err / (batch * horizons);
                        dq[w][i] = 2.0 * err / (batch * horizons);
                    }
                }
            }
            if !loss.is_finite() || loss.abs() > DIVERGENCE_GUARD {
                return Err(TrainError::Diverged {
                    update: self.schedule.updates_done(),
                    loss,
                });
            }
            let mut grads = self.critics[ci].zeros_like();
            self.critics[ci].backward(&cache, &dq, Some(&mut grads), None);
            self.critic_opts[ci].step(&mut self.critics[ci], &grads);
            total_loss += loss;
        }

        if let Some(tau) = self.schedule.end_update() {
            for (t, c) in self.target_critics.iter_mut().zip(&self.critics) {
                polyak_update(t, c, tau);
            }
        }

        if self.policy.external_density_evals() != density_evals_before {
            return Err(TrainError::DensityLeak);
        }
        Ok(CriticUpdateInfo {
            loss: total_loss / self.critics.len() as f64,
            targets,
        })
    }

    /// One policy update on a batch of states: reparameterized actions
    /// through the online critic at a single action token, maximizing
    /// `E[Q(s, a) - alpha log pi(a|s)]`.
    pub fn policy_update(&mut self, states: &Array2<f64>) -> Result<PolicyUpdateInfo, TrainError> {
        let prep = self.sample_reparameterized(states)?;
        let (q, dqda) = self.critic_value_and_action_grad(states, &prep)?;
        self.apply_policy_step(prep, &q, &dqda)
    }

    /// Forward pass plus reparameterized sampling on a state batch.
    fn sample_reparameterized(&mut self, states: &Array2<f64>) -> Result<PolicyPrep, TrainError> {
        let batch = states.nrows();
        let (mean, log_std, cache) = self.policy.forward_batch(&states.view())?;
        let act_dim = mean.ncols();
        let mut u = Array2::zeros((batch, act_dim));
        let mut actions = Array2::zeros((batch, act_dim));
        for b in 0..batch {
            for d in 0..act_dim {
                let eps = gaussian(&mut self.rng_policy);
                let ud = mean[[b, d]] + log_std[[b, d]].exp() * eps;
                u[[b, d]] = ud;
                actions[[b, d]] = ud.tanh();
            }
        }
        let log_probs: Vec<f64> = (0..batch)
            .map(|b| {
                crate::nets::log_prob_of_pre_tanh(
                    u.row(b).to_slice().expect("contiguous"),
                    &mean.row(b).to_owned(),
                    &log_std.row(b).to_owned(),
                )
            })
            .collect();
        Ok(PolicyPrep {
            mean,
            cache,
            u,
            actions,
            log_probs,
        })
    }

    /// Q of the sampled actions at one action token, with gradients to the
    /// action inputs; with twin critics, the row-wise minimum drives both
    /// the loss and the gradient.
    fn critic_value_and_action_grad(
        &self,
        states: &Array2<f64>,
        prep: &PolicyPrep,
    ) -> Result<(Vec<f64>, Array2<f64>), TrainError> {
        let batch = states.nrows();
        let act_dim = prep.actions.ncols();
        let action_rows: Vec<Array2<f64>> = (0..batch)
            .map(|b| {
                Array2::from_shape_vec((1, act_dim), prep.actions.row(b).to_vec()).expect("shape")
            })
            .collect();
        let inputs: Vec<WindowInput> = (0..batch)
            .map(|b| WindowInput {
                state: states.row(b).to_slice().expect("contiguous"),
                actions: action_rows[b].view(),
            })
            .collect();
        let mut q_per_critic = Vec::with_capacity(self.critics.len());
        let mut caches = Vec::with_capacity(self.critics.len());
        for c in &self.critics {
            let (q, cc) = c.forward(&inputs)?;
            q_per_critic.push(q);
            caches.push(cc);
        }
        let argmin: Vec<usize> = (0..batch)
            .map(|b| {
                (0..self.critics.len())
                    .min_by(|&x, &y| q_per_critic[x][b][0].total_cmp(&q_per_critic[y][b][0]))
                    .expect("at least one critic")
            })
            .collect();
        let q_min: Vec<f64> = (0..batch).map(|b| q_per_critic[argmin[b]][b][0]).collect();
        let mut dqda = Array2::zeros((batch, act_dim));
        for (ci, cache_c) in caches.iter().enumerate() {
            if !argmin.iter().any(|&m| m == ci) {
                continue;
            }
            let dq: Vec<Vec<f64>> = (0..batch)
                .map(|b| vec![if argmin[b] == ci { 1.0 } else { 0.0 }])
                .collect();
            let mut dacts = Vec::new();
            self.critics[ci].backward(cache_c, &dq, None, Some(&mut dacts));
            for b in 0..batch {
                if argmin[b] == ci {
                    for d in 0..act_dim {
                        dqda[[b, d]] = dacts[b][[0, d]];
                    }
                }
            }
        }
        Ok((q_min, dqda))
    }

    /// Applies the policy gradient given the sampled actions' values `q`
    /// and value-gradients `dqda`, one optimizer step.
    fn apply_policy_step(
        &mut self,
        prep: PolicyPrep,
        q: &[f64],
        dqda: &Array2<f64>,
    ) -> Result<PolicyUpdateInfo, TrainError> {
        let batch = prep.actions.nrows();
        let act_dim = prep.actions.ncols();
        let alpha = self.alpha();
        let loss = (0..batch)
            .map(|b| alpha * prep.log_probs[b] - q[b])
            .sum::<f64>()
            / batch as f64;
        if !loss.is_finite() || loss.abs() > DIVERGENCE_GUARD {
            return Err(TrainError::Diverged {
                update: self.schedule.updates_done(),
                loss,
            });
        }
        // Gradients on the policy head outputs. The Gaussian part of
        // log pi contributes -1 per log-std coordinate; the squash
        // correction and the value path flow through u.
        let inv_b = 1.0 / batch as f64;
        let mut dmean = Array2::zeros((batch, act_dim));
        let mut dlog_std = Array2::zeros((batch, act_dim));
        for b in 0..batch {
            for d in 0..act_dim {
                let a = prep.actions[[b, d]];
                let g_u = inv_b * (alpha * 2.0 * a - dqda[[b, d]] * (1.0 - a * a));
                dmean[[b, d]] = g_u;
                dlog_std[[b, d]] =
                    inv_b * (-alpha) + g_u * (prep.u[[b, d]] - prep.mean[[b, d]]);
            }
        }
        let mut grads = self.policy.clone();
        crate::nets::zero_params(&mut grads);
        self.policy
            .backward_batch(&prep.cache, &dmean.view(), &dlog_std.view(), Some(&mut grads));
        self.policy_opt.step(&mut self.policy, &grads);

        let mean_log_prob = prep.log_probs.iter().sum::<f64>() / batch as f64;
        Ok(PolicyUpdateInfo {
            loss,
            mean_log_prob,
        })
    }

    /// Temperature update toward the target entropy: one Adam step on
    /// `log alpha` for the loss `-alpha (log pi + target_entropy)`.
    pub fn temperature_update(&mut self, mean_log_prob: f64) -> f64 {
        let alpha = self.alpha();
        let loss = -alpha * (mean_log_prob + self.target_entropy);
        let grad = -alpha * (mean_log_prob + self.target_entropy);
        let a = &mut self.alpha_adam;
        a.step += 1;
        a.m = 0.9 * a.m + 0.1 * grad;
        a.v = 0.999 * a.v + 0.001 * grad * grad;
        let mhat = a.m / (1.0 - 0.9f64.powi(a.step as i32));
        let vhat = a.v / (1.0 - 0.999f64.powi(a.step as i32));
        self.log_alpha -= self.lr_alpha * mhat / (vhat.sqrt() + 1e-8);
        loss
    }

    /// Gradient of the temperature loss with respect to `log alpha`
    /// (exposed for the stationarity test).
    pub fn temperature_gradient(&self, mean_log_prob: f64) -> f64 {
        -self.alpha() * (mean_log_prob + self.target_entropy)
    }

    /// Checkpoint all learned modules.
    pub fn save(&self, w: impl std::io::Write) -> Result<(), crate::nets::CheckpointError> {
        let mut modules: Vec<(String, &dyn NamedParams)> = Vec::new();
        for (i, c) in self.critics.iter().enumerate() {
            modules.push((format!("critic{i}"), c));
        }
        for (i, c) in self.target_critics.iter().enumerate() {
            modules.push((format!("target_critic{i}"), c));
        }
        modules.push(("policy".to_string(), &self.policy));
        let with_names: Vec<(&str, &dyn NamedParams)> = modules
            .iter()
            .map(|(n, p)| (n.as_str(), *p))
            .collect();
        crate::nets::save_checkpoint(w, &with_names)
    }

    /// Restores all learned modules from a checkpoint written by
    /// [`Self::save`] for an identically configured learner.
    pub fn load(&mut self, r: impl std::io::Read) -> Result<(), crate::nets::CheckpointError> {
        let mut text = Vec::new();
        let mut reader = r;
        use std::io::Read as _;
        reader.read_to_end(&mut text)?;
        let mut names: Vec<String> = Vec::new();
        for i in 0..self.critics.len() {
            names.push(format!("critic{i}"));
        }
        for i in 0..self.target_critics.len() {
            names.push(format!("target_critic{i}"));
        }
        names.push("policy".to_string());
        let mut modules: Vec<(&str, &mut dyn NamedParams)> = Vec::new();
        let (critics, rest) = (&mut self.critics, &mut self.target_critics);
        for (i, c) in critics.iter_mut().enumerate() {
            let _ = i;
            modules.push((names[modules.len()].as_str(), c));
        }
        for c in rest.iter_mut() {
            modules.push((names[modules.len()].as_str(), c));
        }
        modules.push((names[names.len() - 1].as_str(), &mut self.policy));
        crate::nets::load_checkpoint(&text[..], &mut modules)
    }
}

fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests;
