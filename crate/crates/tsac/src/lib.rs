//! T-SAC: Soft Actor-Critic with a sequence-conditioned critic.
//!
//! The critic is a small causal Transformer (GRU/LSTM/MLP backbones are
//! available for ablations) that ingests a state followed by a short window
//! of replayed actions and predicts one Q-value per realized action prefix.
//! Each prefix is supervised by its own n-step return, so no importance
//! sampling over replayed actions is ever needed; gradients are averaged
//! across horizons instead of averaging the targets themselves.
//!
//! The crate is organized as a small laboratory around that idea:
//!
//! - [`envs`]: toy continuous-control tasks (dense and sparse rewards) that
//!   train in minutes and admit brute-force value checks.
//! - [`replay`]: segment-structured replay with cross-episode stitching,
//!   action masks, and uniform window sampling.
//! - [`nets`]: the critic backbones and the squashed-Gaussian policy, with
//!   hand-written forward/backward passes in `f64` so training is bit-for-bit
//!   reproducible and gradients can be checked against finite differences.
//! - [`learner`]: the training loop — multi-horizon critic updates, SAC-style
//!   policy/temperature updates, and both target schedules (Polyak and
//!   hard-freeze with cached bootstrap values).
//! - [`analysis`]: closed forms for the variance-reduction and window
//!   reuse/coverage results that motivate the design, each paired with an
//!   enumeration or Monte-Carlo oracle.
//! - [`evalstats`]: IQM and bootstrap confidence intervals for reporting.
//! - [`config`], [`metrics`], [`plot`], [`run`]: experiment plumbing used by
//!   the `tsac` binary.

pub mod analysis;
pub mod analysis_verify;
pub mod config;
pub mod envs;
pub mod evalstats;
pub mod learner;
pub mod metrics;
pub mod nets;
pub mod plot;
pub mod replay;
pub mod rng;
pub mod run;
