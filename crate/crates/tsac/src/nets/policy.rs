//! Squashed-Gaussian policy.
//!
//! Two dense hidden layers with layer normalization applied before the
//! nonlinearity, then separate mean and log-std heads. Actions are
//! `tanh(mean + std * eps)` with the exact change-of-variables correction in
//! the log-probability. The log-std head starts as a constant: zero weights
//! with its bias at `log_std_init`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use std::cell::Cell;

use super::params::NamedParams;
use super::primitives::{leaky_relu, leaky_relu_backward, softplus, LayerNorm, LayerNormCache, Linear};
use super::NetError;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: [usize; 2],
    pub log_std_init: f64,
}

/// Squashed-Gaussian head for one state: the pre-squash mean and the
/// clamped log standard deviation.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Array1<f64>,
    pub log_std: Array1<f64>,
}

pub struct GaussianPolicy {
    config: PolicyConfig,
    l1: Linear,
    ln1: LayerNorm,
    l2: Linear,
    ln2: LayerNorm,
    mean_head: Linear,
    log_std_head: Linear,
    /// Density evaluations of externally supplied actions; the training
    /// loop asserts this never moves during critic updates.
    external_density_evals: Cell<u64>,
}

impl Clone for GaussianPolicy {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            l1: self.l1.clone(),
            ln1: self.ln1.clone(),
            l2: self.l2.clone(),
            ln2: self.ln2.clone(),
            mean_head: self.mean_head.clone(),
            log_std_head: self.log_std_head.clone(),
            external_density_evals: Cell::new(self.external_density_evals.get()),
        }
    }
}

pub struct PolicyCache {
    states: Array2<f64>,
    ln1: LayerNormCache,
    norm1: Array2<f64>,
    act1: Array2<f64>,
    ln2: LayerNormCache,
    norm2: Array2<f64>,
    act2: Array2<f64>,
    /// Unclamped log-std output, for the clamp gradient gate.
    log_std_raw: Array2<f64>,
}

impl GaussianPolicy {
    pub fn new(config: PolicyConfig, rng: &mut impl Rng) -> Self {
        let l1 = Linear::new(config.obs_dim, config.hidden[0], true, rng);
        let ln1 = LayerNorm::new(config.hidden[0]);
        let l2 = Linear::new(config.hidden[0], config.hidden[1], true, rng);
        let ln2 = LayerNorm::new(config.hidden[1]);
        let mean_head = Linear::new(config.hidden[1], config.act_dim, true, rng);
        // Constant initial log-std: zero weights, bias at the init value.
        let mut log_std_head = Linear::new(config.hidden[1], config.act_dim, true, rng);
        log_std_head.weight.fill(0.0);
        log_std_head
            .bias
            .as_mut()
            .expect("log-std head has a bias")
            .fill(config.log_std_init);
        Self {
            config,
            l1,
            ln1,
            l2,
            ln2,
            mean_head,
            log_std_head,
            external_density_evals: Cell::new(0),
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn external_density_evals(&self) -> u64 {
        self.external_density_evals.get()
    }

    /// Means and clamped log-stds for a batch of states.
    pub fn forward_batch(
        &self,
        states: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, PolicyCache), NetError> {
        if states.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFiniteInput);
        }
        let pre1 = self.l1.forward(states);
        let (norm1, ln1) = self.ln1.forward(&pre1.view());
        let act1 = leaky_relu(&norm1);
        let pre2 = self.l2.forward(&act1.view());
        let (norm2, ln2) = self.ln2.forward(&pre2.view());
        let act2 = leaky_relu(&norm2);
        let mean = self.mean_head.forward(&act2.view());
        let log_std_raw = self.log_std_head.forward(&act2.view());
        let log_std = log_std_raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let cache = PolicyCache {
            states: states.to_owned(),
            ln1,
            norm1,
            act1,
            ln2,
            norm2,
            act2,
            log_std_raw,
        };
        Ok((mean, log_std, cache))
    }

    /// Head for a single state.
    pub fn forward(&self, state: &[f64]) -> Result<GaussianHead, NetError> {
        let states = Array2::from_shape_vec((1, state.len()), state.to_vec())
            .expect("shape by construction");
        let (mean, log_std, _) = self.forward_batch(&states.view())?;
        Ok(GaussianHead {
            mean: mean.row(0).to_owned(),
            log_std: log_std.row(0).to_owned(),
        })
    }

    /// Draws a squashed sample and its exact log-probability.
    pub fn sample(&self, head: &GaussianHead, rng: &mut impl Rng) -> (Vec<f64>, f64) {
        let mut action = Vec::with_capacity(head.mean.len());
        let mut u = Vec::with_capacity(head.mean.len());
        for d in 0..head.mean.len() {
            let eps = standard_normal(rng);
            let ud = head.mean[d] + head.log_std[d].exp() * eps;
            u.push(ud);
            action.push(ud.tanh());
        }
        let lp = log_prob_of_pre_tanh(&u, &head.mean, &head.log_std);
        (action, lp)
    }

    /// Evaluation-mode action: the squashed mean.
    pub fn deterministic_action(&self, head: &GaussianHead) -> Vec<f64> {
        head.mean.iter().map(|m| m.tanh()).collect()
    }

    /// Log-density of an externally supplied action. Counted: the training
    /// loop never calls this for replayed actions, and asserts so.
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64, NetError> {
        self.external_density_evals
            .set(self.external_density_evals.get() + 1);
        let head = self.forward(state)?;
        let u: Vec<f64> = action
            .iter()
            .map(|a| atanh_clamped(*a))
            .collect();
        Ok(log_prob_of_pre_tanh(&u, &head.mean, &head.log_std))
    }

    /// Backpropagates per-element gradients on the mean and the clamped
    /// log-std into parameter gradients. Gradients are gated to zero where
    /// the clamp was active.
    pub fn backward_batch(
        &self,
        cache: &PolicyCache,
        dmean: &ArrayView2<f64>,
        dlog_std: &ArrayView2<f64>,
        mut grads: Option<&mut GaussianPolicy>,
    ) {
        let mut dlog_std_raw = dlog_std.to_owned();
        dlog_std_raw.zip_mut_with(&cache.log_std_raw, |d, &raw| {
            if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                *d = 0.0;
            }
        });
        let mut dact2 = self.mean_head.backward(
            &cache.act2.view(),
            dmean,
            grads.as_deref_mut().map(|g| &mut g.mean_head),
        );
        dact2 += &self.log_std_head.backward(
            &cache.act2.view(),
            &dlog_std_raw.view(),
            grads.as_deref_mut().map(|g| &mut g.log_std_head),
        );
        let dnorm2 = leaky_relu_backward(&cache.norm2, &dact2.view());
        let dpre2 = self.ln2.backward(
            &cache.ln2,
            &dnorm2.view(),
            grads.as_deref_mut().map(|g| &mut g.ln2),
        );
        let dact1 = self.l2.backward(
            &cache.act1.view(),
            &dpre2.view(),
            grads.as_deref_mut().map(|g| &mut g.l2),
        );
        let dnorm1 = leaky_relu_backward(&cache.norm1, &dact1.view());
        let dpre1 = self.ln1.backward(
            &cache.ln1,
            &dnorm1.view(),
            grads.as_deref_mut().map(|g| &mut g.ln1),
        );
        self.l1.backward(
            &cache.states.view(),
            &dpre1.view(),
            grads.as_deref_mut().map(|g| &mut g.l1),
        );
    }
}

/// Exact squashed-Gaussian log-density given the pre-squash sample.
///
/// `log N(u; mean, std) - sum_d log(1 - tanh(u_d)^2)`, with the squash
/// correction in the stable form `2 (ln 2 - u - softplus(-2u))`.
pub fn log_prob_of_pre_tanh(u: &[f64], mean: &Array1<f64>, log_std: &Array1<f64>) -> f64 {
    let mut lp = 0.0;
    for d in 0..u.len() {
        let std = log_std[d].exp();
        let z = (u[d] - mean[d]) / std;
        lp += -0.5 * z * z - log_std[d] - HALF_LN_2PI;
        lp -= 2.0 * (std::f64::consts::LN_2 - u[d] - softplus(-2.0 * u[d]));
    }
    lp
}

fn atanh_clamped(a: f64) -> f64 {
    let a = a.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    0.5 * ((1.0 + a) / (1.0 - a)).ln()
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl NamedParams for GaussianPolicy {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.l1.visit("l1", f);
        self.ln1.visit("ln1", f);
        self.l2.visit("l2", f);
        self.ln2.visit("ln2", f);
        self.mean_head.visit("mean_head", f);
        self.log_std_head.visit("log_std_head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut("l1", f);
        self.ln1.visit_mut("ln1", f);
        self.l2.visit_mut("l2", f);
        self.ln2.visit_mut("ln2", f);
        self.mean_head.visit_mut("mean_head", f);
        self.log_std_head.visit_mut("log_std_head", f);
    }
}
