//! Critic backbones and the squashed-Gaussian policy.
//!
//! All networks run in `f64` with hand-written backward passes: training is
//! bit-for-bit reproducible, causality checks can demand exact equality, and
//! every analytic gradient is verified against central finite differences in
//! the test suite.

mod mlp;
mod params;
mod policy;
mod primitives;
mod recurrent;
mod transformer;

pub use mlp::{MlpCache, MlpConcatConfig, MlpConcatCritic};
pub use params::{
    hard_copy, load_checkpoint, max_param_diff, param_count, polyak_update, save_checkpoint,
    zero_params, AdamW, CheckpointError, NamedParams,
};
pub use policy::{
    log_prob_of_pre_tanh, GaussianHead, GaussianPolicy, PolicyCache, PolicyConfig, LOG_STD_MAX,
    LOG_STD_MIN,
};
pub use primitives::{LayerNorm, Linear};
pub use recurrent::{CellKind, RecurrentCache, RecurrentConfig, RecurrentCritic};
pub use transformer::{TransformerCache, TransformerConfig, TransformerCritic};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("window horizon {n} exceeds the critic's maximum {n_max}")]
    HorizonTooLong { n: usize, n_max: usize },
    #[error("window must contain at least one action")]
    EmptyWindow,
    #[error("non-finite network input")]
    NonFiniteInput,
    #[error("this critic consumes fixed-length windows of {expected} actions, got {got}")]
    FixedHorizonMismatch { got: usize, expected: usize },
}

/// One critic input: a start state and the window of replayed actions.
#[derive(Clone, Copy)]
pub struct WindowInput<'a> {
    pub state: &'a [f64],
    pub actions: ArrayView2<'a, f64>,
}

/// Which network the critic uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Transformer,
    Gru,
    Lstm,
    MlpConcat,
}

impl std::str::FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "gru" => Ok(Self::Gru),
            "lstm" => Ok(Self::Lstm),
            "mlp_concat" => Ok(Self::MlpConcat),
            other => Err(format!(
                "unknown backbone `{other}` (transformer, gru, lstm, mlp_concat)"
            )),
        }
    }
}

/// Shared sizing for every backbone. The model width is
/// `num_heads * dims_per_head`; recurrent cells use it as their hidden
/// size and the MLP uses `ffn_hidden` for its two hidden layers.
#[derive(Debug, Clone)]
pub struct CriticConfig {
    pub backbone: Backbone,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dims_per_head: usize,
    pub ffn_hidden: usize,
    pub n_max: usize,
    pub pre_norm: bool,
}

/// A critic of any backbone, with one forward/backward interface.
pub enum Critic {
    Transformer(TransformerCritic),
    Gru(RecurrentCritic),
    Lstm(RecurrentCritic),
    MlpConcat(MlpConcatCritic),
}

pub enum CriticForwardCache {
    Transformer(TransformerCache),
    Recurrent(RecurrentCache),
    Mlp(MlpCache),
}

impl Clone for Critic {
    fn clone(&self) -> Self {
        match self {
            Critic::Transformer(c) => Critic::Transformer(c.clone()),
            Critic::Gru(c) => Critic::Gru(c.clone()),
            Critic::Lstm(c) => Critic::Lstm(c.clone()),
            Critic::MlpConcat(c) => Critic::MlpConcat(c.clone()),
        }
    }
}

pub fn build_critic(config: &CriticConfig, rng: &mut impl Rng) -> Critic {
    match config.backbone {
        Backbone::Transformer => Critic::Transformer(TransformerCritic::new(
            TransformerConfig {
                obs_dim: config.obs_dim,
                act_dim: config.act_dim,
                num_layers: config.num_layers,
                num_heads: config.num_heads,
                dims_per_head: config.dims_per_head,
                ffn_hidden: config.ffn_hidden,
                n_max: config.n_max,
                pre_norm: config.pre_norm,
            },
            rng,
        )),
        Backbone::Gru | Backbone::Lstm => {
            let kind = if config.backbone == Backbone::Gru {
                CellKind::Gru
            } else {
                CellKind::Lstm
            };
            Critic::Gru(RecurrentCritic::new(
                RecurrentConfig {
                    kind,
                    obs_dim: config.obs_dim,
                    act_dim: config.act_dim,
                    hidden: config.num_heads * config.dims_per_head,
                    num_layers: config.num_layers,
                    n_max: config.n_max,
                },
                rng,
            ))
        }
        Backbone::MlpConcat => Critic::MlpConcat(MlpConcatCritic::new(
            MlpConcatConfig {
                obs_dim: config.obs_dim,
                act_dim: config.act_dim,
                fixed_n: config.n_max,
                hidden: config.ffn_hidden,
            },
            rng,
        )),
    }
}

impl Critic {
    /// Prefix-conditioned Q-values for each window (one per action for the
    /// causal backbones; a single scalar for the fixed-horizon MLP).
    pub fn forward(
        &self,
        windows: &[WindowInput],
    ) -> Result<(Vec<Vec<f64>>, CriticForwardCache), NetError> {
        match self {
            Critic::Transformer(c) => {
                let (q, cache) = c.forward(windows)?;
                Ok((q, CriticForwardCache::Transformer(cache)))
            }
            Critic::Gru(c) | Critic::Lstm(c) => {
                let (q, cache) = c.forward(windows)?;
                Ok((q, CriticForwardCache::Recurrent(cache)))
            }
            Critic::MlpConcat(c) => {
                let (q, cache) = c.forward(windows)?;
                Ok((q, CriticForwardCache::Mlp(cache)))
            }
        }
    }

    pub fn q_values(
        &self,
        state: &[f64],
        actions: &ArrayView2<f64>,
    ) -> Result<Vec<f64>, NetError> {
        match self {
            Critic::Transformer(c) => c.q_values(state, actions),
            Critic::Gru(c) | Critic::Lstm(c) => c.q_values(state, actions),
            Critic::MlpConcat(c) => c.q_values(state, actions),
        }
    }

    /// Backward pass; `grads` must be a zeroed clone of this critic.
    pub fn backward(
        &self,
        cache: &CriticForwardCache,
        dq: &[Vec<f64>],
        grads: Option<&mut Critic>,
        dactions: Option<&mut Vec<Array2<f64>>>,
    ) {
        match (self, cache) {
            (Critic::Transformer(c), CriticForwardCache::Transformer(cc)) => {
                let g = grads.map(|g| match g {
                    Critic::Transformer(g) => g,
                    _ => panic!("gradient storage backbone mismatch"),
                });
                c.backward(cc, dq, g, dactions);
            }
            (Critic::Gru(c) | Critic::Lstm(c), CriticForwardCache::Recurrent(cc)) => {
                let g = grads.map(|g| match g {
                    Critic::Gru(g) | Critic::Lstm(g) => g,
                    _ => panic!("gradient storage backbone mismatch"),
                });
                c.backward(cc, dq, g, dactions);
            }
            (Critic::MlpConcat(c), CriticForwardCache::Mlp(cc)) => {
                let g = grads.map(|g| match g {
                    Critic::MlpConcat(g) => g,
                    _ => panic!("gradient storage backbone mismatch"),
                });
                c.backward(cc, dq, g, dactions);
            }
            _ => panic!("forward cache does not match critic backbone"),
        }
    }

    /// A zeroed clone, used as gradient storage.
    pub fn zeros_like(&self) -> Critic {
        let mut g = self.clone();
        zero_params(&mut g);
        g
    }

    pub fn n_max(&self) -> usize {
        match self {
            Critic::Transformer(c) => c.config().n_max,
            Critic::Gru(c) | Critic::Lstm(c) => c.config().n_max,
            Critic::MlpConcat(c) => c.config().fixed_n,
        }
    }
}

impl NamedParams for Critic {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Critic::Transformer(c) => c.visit(f),
            Critic::Gru(c) | Critic::Lstm(c) => c.visit(f),
            Critic::MlpConcat(c) => c.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Critic::Transformer(c) => c.visit_mut(f),
            Critic::Gru(c) | Critic::Lstm(c) => c.visit_mut(f),
            Critic::MlpConcat(c) => c.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests;
