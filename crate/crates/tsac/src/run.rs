//! End-to-end training runs: data collection alternating with update
//! phases, periodic deterministic evaluation, and a self-describing run
//! directory (config snapshot, metrics CSV, checkpoints).
//!
//! One collection phase gathers `windows_per_step * segment_length`
//! transitions (continuing across episode boundaries through the segment
//! writer), then the update budget `utd * collected` is spent in iterations
//! of `critic_updates` critic steps followed by `policy_updates`
//! policy/temperature steps, so the policy lags the critic by their ratio.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};
use crate::envs::{make_env, Env, EnvError};
use crate::evalstats::{bootstrap_ci, iqm};
use crate::learner::{Learner, LearnerConfig, TrainError};
use crate::metrics::{MetricsError, MetricsRow, MetricsWriter};
use crate::nets::{CheckpointError, CriticConfig, PolicyConfig};
use crate::replay::{ReplayBuffer, ReplayError};
use crate::rng::{derive_seed, substream, Stream};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Final numbers of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub final_iqm_return: f64,
    pub final_iqm_success: f64,
    pub metrics_path: PathBuf,
}

/// Environment rollout state for the collector: owns the env, tracks the
/// live observation, and reseeds episodes from the env stream.
struct Rollout {
    env: Box<dyn Env>,
    obs: Vec<f64>,
    seed_rng: ChaCha8Rng,
}

impl Rollout {
    fn new(cfg: &RunConfig) -> Result<Self, RunError> {
        let mut env = make_env(&cfg.env, cfg.reward)?;
        let mut seed_rng = substream(cfg.seed, Stream::Env);
        let obs = env.reset(seed_rng.random()).observation;
        Ok(Self { env, obs, seed_rng })
    }

    /// One transition under `action`; appends to the buffer and advances or
    /// resets the episode.
    fn step(
        &mut self,
        action: &[f64],
        buffer: &mut ReplayBuffer,
    ) -> Result<Option<u64>, RunError> {
        let out = self.env.step(action)?;
        let committed =
            buffer.append_transition(&self.obs, action, out.reward, out.done, &out.state.observation)?;
        self.obs = if out.done {
            self.env.reset(self.seed_rng.random()).observation
        } else {
            out.state.observation
        };
        Ok(committed)
    }
}

/// Builds the learner sized for the environment in the config.
pub fn build_learner(cfg: &RunConfig) -> Result<Learner, RunError> {
    let probe = make_env(&cfg.env, cfg.reward)?;
    let spec = probe.spec();
    Ok(Learner::new(LearnerConfig {
        critic: CriticConfig {
            backbone: cfg.parsed_backbone(),
            obs_dim: spec.obs_dim,
            act_dim: spec.act_dim,
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads,
            dims_per_head: cfg.dims_per_head,
            ffn_hidden: cfg.ffn_hidden,
            n_max: cfg.l_max,
            pre_norm: cfg.pre_norm,
        },
        policy: PolicyConfig {
            obs_dim: spec.obs_dim,
            act_dim: spec.act_dim,
            hidden: [cfg.policy_hidden, cfg.policy_hidden],
            log_std_init: cfg.log_std_init,
        },
        gamma: cfg.gamma,
        target_mode: cfg.parsed_target_mode(),
        lr_critic: cfg.lr_critic,
        lr_policy: cfg.lr_policy,
        lr_alpha: cfg.lr_alpha,
        weight_decay: cfg.weight_decay,
        twin_critic: cfg.twin_critic,
        averaged_target_mode: cfg.averaged_target,
        n_action_samples: cfg.n_action_samples,
        target_entropy: cfg.resolved_target_entropy(spec.act_dim),
        alpha_init: cfg.alpha_init,
        seed: cfg.seed,
    }))
}

/// Deterministic evaluation rollouts; per-episode seeds depend only on the
/// master seed and the evaluation index, never on training draw order.
pub fn evaluate(
    cfg: &RunConfig,
    learner: &Learner,
    eval_index: u64,
) -> Result<(Vec<f64>, Vec<bool>), RunError> {
    let mut env = make_env(&cfg.env, cfg.reward)?;
    let eval_root = derive_seed(cfg.seed, Stream::Eval as u64);
    let mut returns = Vec::with_capacity(cfg.eval_episodes);
    let mut successes = Vec::with_capacity(cfg.eval_episodes);
    for ep in 0..cfg.eval_episodes {
        let seed = derive_seed(eval_root, eval_index * 100_000 + ep as u64);
        let mut obs = env.reset(seed).observation;
        let mut ret = 0.0;
        loop {
            let action = learner.greedy_action(&obs)?;
            let out = env.step(&action)?;
            ret += out.reward;
            obs = out.state.observation;
            if out.done {
                successes.push(out.success);
                break;
            }
        }
        returns.push(ret);
    }
    Ok((returns, successes))
}

struct LossTracker {
    critic_sum: f64,
    critic_n: u64,
    policy_sum: f64,
    policy_n: u64,
}

impl LossTracker {
    fn new() -> Self {
        Self {
            critic_sum: 0.0,
            critic_n: 0,
            policy_sum: 0.0,
            policy_n: 0,
        }
    }

    fn means_and_reset(&mut self) -> (f64, f64) {
        let c = if self.critic_n > 0 {
            self.critic_sum / self.critic_n as f64
        } else {
            0.0
        };
        let p = if self.policy_n > 0 {
            self.policy_sum / self.policy_n as f64
        } else {
            0.0
        };
        *self = Self::new();
        (c, p)
    }
}

/// Runs training to completion, writing `config.cfg`, `metrics.csv`, and
/// checkpoints under `out_dir`. On divergence the last parameters are
/// checkpointed before the error propagates.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let snapshot = format!(
        "# tsac {} run configuration snapshot\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.snapshot()
    );
    fs::write(out_dir.join("config.cfg"), snapshot)?;

    let spec = make_env(&cfg.env, cfg.reward)?.spec();
    let mut rollout = Rollout::new(cfg)?;
    let mut buffer = ReplayBuffer::new(
        cfg.capacity_segments,
        cfg.segment_length,
        spec.obs_dim,
        spec.act_dim,
    );
    let mut learner = build_learner(cfg)?;
    let mut replay_rng = substream(cfg.seed, Stream::Replay);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = MetricsWriter::new(fs::File::create(&metrics_path)?)?;
    let mut losses = LossTracker::new();

    let phase_len = (cfg.windows_per_step * cfg.segment_length) as u64;
    let mut steps = 0u64;
    let mut update_credit = 0.0f64;
    let mut next_eval = cfg.eval_interval;
    let mut next_checkpoint = if cfg.checkpoint_interval > 0 {
        cfg.checkpoint_interval
    } else {
        u64::MAX
    };
    let mut eval_index = 0u64;
    let mut last: Option<(f64, f64)> = None;

    let result = (|| -> Result<(), RunError> {
        while steps < cfg.total_steps {
            // Collection phase.
            let to_collect = phase_len.min(cfg.total_steps - steps);
            for _ in 0..to_collect {
                let action = if steps < cfg.learning_starts {
                    learner.uniform_action(spec.act_dim)
                } else {
                    learner.sample_action(&rollout.obs.clone())?
                };
                rollout.step(&action, &mut buffer)?;
                steps += 1;
            }

            // Update phase.
            if steps >= cfg.learning_starts && !buffer.is_empty() {
                update_credit += cfg.utd * to_collect as f64;
                while update_credit >= cfg.critic_updates as f64 {
                    update_credit -= cfg.critic_updates as f64;
                    for _ in 0..cfg.critic_updates {
                        let windows = buffer.sample_windows(
                            cfg.batch_size,
                            cfg.l_min,
                            cfg.l_max,
                            &mut replay_rng,
                        )?;
                        let info = learner.critic_update(&windows)?;
                        losses.critic_sum += info.loss;
                        losses.critic_n += 1;
                    }
                    for _ in 0..cfg.policy_updates {
                        let states = sample_state_batch(
                            &buffer,
                            cfg.batch_size,
                            spec.obs_dim,
                            &mut replay_rng,
                        )?;
                        let info = learner.policy_update(&states)?;
                        losses.policy_sum += info.loss;
                        losses.policy_n += 1;
                        if steps >= cfg.temperature_warmup {
                            learner.temperature_update(info.mean_log_prob);
                        }
                    }
                }
            }

            while steps >= next_eval {
                let row = emit_eval(cfg, &learner, &mut metrics, &mut losses, steps, eval_index)?;
                last = Some(row);
                eval_index += 1;
                next_eval += cfg.eval_interval;
            }
            while steps >= next_checkpoint {
                let file = fs::File::create(out_dir.join(format!("checkpoint_{steps}.json")))?;
                learner.save(file)?;
                next_checkpoint += cfg.checkpoint_interval;
            }
        }
        Ok(())
    })();

    if let Err(err) = result {
        // Preserve the state that produced the failure for inspection.
        if let Ok(file) = fs::File::create(out_dir.join("checkpoint_diverged.json")) {
            let _ = learner.save(file);
        }
        return Err(err);
    }

    // Guarantee a final evaluation row at the last step.
    if last.is_none() || next_eval != cfg.total_steps + cfg.eval_interval {
        let row = emit_eval(cfg, &learner, &mut metrics, &mut losses, steps, eval_index)?;
        last = Some(row);
    }
    let file = fs::File::create(out_dir.join("checkpoint_final.json"))?;
    learner.save(file)?;

    let (final_iqm_return, final_iqm_success) = last.expect("at least one evaluation");
    Ok(RunSummary {
        steps,
        final_iqm_return,
        final_iqm_success,
        metrics_path,
    })
}

fn emit_eval(
    cfg: &RunConfig,
    learner: &Learner,
    metrics: &mut MetricsWriter<fs::File>,
    losses: &mut LossTracker,
    steps: u64,
    eval_index: u64,
) -> Result<(f64, f64), RunError> {
    let (returns, successes) = evaluate(cfg, learner, eval_index)?;
    let iqm_return = iqm(&returns).expect("eval_episodes >= 1");
    let success_vals: Vec<f64> = successes.iter().map(|s| f64::from(u8::from(*s))).collect();
    let iqm_success = iqm(&success_vals).expect("eval_episodes >= 1");
    let (ci_lo, ci_hi) = if returns.len() >= 2 {
        bootstrap_ci(
            &returns,
            400,
            0.95,
            derive_seed(cfg.seed, 0xC1_0000 + eval_index),
        )
        .expect("enough values and resamples")
    } else {
        (iqm_return, iqm_return)
    };
    let (critic_loss, policy_loss) = losses.means_and_reset();
    metrics.append(&MetricsRow {
        step: steps,
        seed: cfg.seed,
        iqm_return,
        iqm_success,
        ci_lo,
        ci_hi,
        critic_loss,
        policy_loss,
        alpha: learner.alpha(),
    })?;
    Ok((iqm_return, iqm_success))
}

/// A batch of start states for policy updates, drawn as one-step windows.
fn sample_state_batch(
    buffer: &ReplayBuffer,
    batch: usize,
    obs_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>, ReplayError> {
    let windows = buffer.sample_windows(batch, 1, 1, rng)?;
    let mut states = Array2::zeros((batch, obs_dim));
    for (b, w) in windows.iter().enumerate() {
        states.row_mut(b).assign(&w.states.row(0));
    }
    Ok(states)
}

/// Batch-freshness instrumentation: runs `phases` collect/update rounds
/// with a fixed per-phase update budget and reports how sampling covered
/// each phase's freshly collected transitions.
#[derive(Debug)]
pub struct FreshnessReport {
    /// Fraction of sampled windows that came from the current phase's
    /// fresh segments, averaged over phases.
    pub fresh_batch_ratio: f64,
    /// Total fresh transitions never covered by any sampled window during
    /// their phase.
    pub never_sampled_fresh: u64,
}

pub fn freshness_probe(
    cfg: &RunConfig,
    phases: usize,
    updates_per_phase: usize,
) -> Result<FreshnessReport, RunError> {
    let spec = make_env(&cfg.env, cfg.reward)?.spec();
    let mut rollout = Rollout::new(cfg)?;
    let mut buffer = ReplayBuffer::new(
        cfg.capacity_segments,
        cfg.segment_length,
        spec.obs_dim,
        spec.act_dim,
    );
    let mut learner = build_learner(cfg)?;
    let mut replay_rng = substream(cfg.seed, Stream::Replay);
    let phase_len = cfg.windows_per_step * cfg.segment_length;

    let mut fresh_hits = 0u64;
    let mut total_draws = 0u64;
    let mut never_sampled_fresh = 0u64;
    for _ in 0..phases {
        let mut fresh_ids = HashSet::new();
        for _ in 0..phase_len {
            let action = learner.uniform_action(spec.act_dim);
            if let Some(id) = rollout.step(&action, &mut buffer)? {
                fresh_ids.insert(id);
            }
        }
        // Fresh transition coverage per phase: mark window spans.
        let mut covered: std::collections::HashMap<u64, Vec<bool>> = fresh_ids
            .iter()
            .map(|id| (*id, vec![false; cfg.segment_length]))
            .collect();
        for _ in 0..updates_per_phase {
            let windows =
                buffer.sample_windows(cfg.batch_size, cfg.l_min, cfg.l_max, &mut replay_rng)?;
            for w in &windows {
                total_draws += 1;
                if fresh_ids.contains(&w.segment_id) {
                    fresh_hits += 1;
                    let flags = covered.get_mut(&w.segment_id).expect("fresh id");
                    for t in w.start..w.start + w.horizon {
                        flags[t] = true;
                    }
                }
            }
        }
        never_sampled_fresh += covered
            .values()
            .flat_map(|flags| flags.iter())
            .filter(|c| !**c)
            .count() as u64;
    }
    Ok(FreshnessReport {
        fresh_batch_ratio: fresh_hits as f64 / total_draws as f64,
        never_sampled_fresh,
    })
}
