//! Fixed-horizon MLP critic over the flattened `(s, a_1..a_n)` input.
//!
//! The contrast case for the causal backbones: because the whole action
//! block is consumed at once, its single output depends on every action in
//! the window, so the value of a short prefix "peeks" at later actions.
//! Only usable with a fixed window length.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::params::NamedParams;
use super::primitives::{leaky_relu, leaky_relu_backward, Linear};
use super::{NetError, WindowInput};

#[derive(Debug, Clone)]
pub struct MlpConcatConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// The one window length this critic accepts.
    pub fixed_n: usize,
    pub hidden: usize,
}

#[derive(Clone)]
pub struct MlpConcatCritic {
    config: MlpConcatConfig,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

pub struct MlpCache {
    inputs: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

impl MlpConcatCritic {
    pub fn new(config: MlpConcatConfig, rng: &mut impl Rng) -> Self {
        let in_dim = config.obs_dim + config.fixed_n * config.act_dim;
        let l1 = Linear::new(in_dim, config.hidden, true, rng);
        let l2 = Linear::new(config.hidden, config.hidden, true, rng);
        let out = Linear::new(config.hidden, 1, true, rng);
        Self {
            config,
            l1,
            l2,
            out,
        }
    }

    pub fn config(&self) -> &MlpConcatConfig {
        &self.config
    }

    /// One scalar per window (returned as a length-1 vector to share the
    /// critic interface).
    pub fn forward(
        &self,
        windows: &[WindowInput],
    ) -> Result<(Vec<Vec<f64>>, MlpCache), NetError> {
        let in_dim = self.config.obs_dim + self.config.fixed_n * self.config.act_dim;
        let mut inputs = Array2::zeros((windows.len(), in_dim));
        for (b, w) in windows.iter().enumerate() {
            if w.actions.nrows() != self.config.fixed_n {
                return Err(NetError::FixedHorizonMismatch {
                    got: w.actions.nrows(),
                    expected: self.config.fixed_n,
                });
            }
            if w.state.iter().any(|v| !v.is_finite())
                || w.actions.iter().any(|v| !v.is_finite())
            {
                return Err(NetError::NonFiniteInput);
            }
            let mut row = inputs.row_mut(b);
            for (i, v) in w.state.iter().enumerate() {
                row[i] = *v;
            }
            for (j, v) in w.actions.iter().enumerate() {
                row[self.config.obs_dim + j] = *v;
            }
        }
        let pre1 = self.l1.forward(&inputs.view());
        let act1 = leaky_relu(&pre1);
        let pre2 = self.l2.forward(&act1.view());
        let act2 = leaky_relu(&pre2);
        let q_mat = self.out.forward(&act2.view());
        let q = (0..windows.len()).map(|b| vec![q_mat[[b, 0]]]).collect();
        Ok((
            q,
            MlpCache {
                inputs,
                pre1,
                act1,
                pre2,
                act2,
            },
        ))
    }

    pub fn q_values(
        &self,
        state: &[f64],
        actions: &ArrayView2<f64>,
    ) -> Result<Vec<f64>, NetError> {
        let (mut q, _) = self.forward(&[WindowInput {
            state,
            actions: actions.view(),
        }])?;
        Ok(q.pop().expect("one window in, one out"))
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        dq: &[Vec<f64>],
        mut grads: Option<&mut MlpConcatCritic>,
        dactions: Option<&mut Vec<Array2<f64>>>,
    ) {
        let mut dy = Array2::zeros((cache.inputs.nrows(), 1));
        for (b, d) in dq.iter().enumerate() {
            dy[[b, 0]] = d[0];
        }
        let dact2 = self.out.backward(
            &cache.act2.view(),
            &dy.view(),
            grads.as_deref_mut().map(|g| &mut g.out),
        );
        let dpre2 = leaky_relu_backward(&cache.pre2, &dact2.view());
        let dact1 = self.l2.backward(
            &cache.act1.view(),
            &dpre2.view(),
            grads.as_deref_mut().map(|g| &mut g.l2),
        );
        let dpre1 = leaky_relu_backward(&cache.pre1, &dact1.view());
        let dinputs = self.l1.backward(
            &cache.inputs.view(),
            &dpre1.view(),
            grads.as_deref_mut().map(|g| &mut g.l1),
        );
        if let Some(out) = dactions {
            out.clear();
            for b in 0..cache.inputs.nrows() {
                let mut da = Array2::zeros((self.config.fixed_n, self.config.act_dim));
                for n in 0..self.config.fixed_n {
                    for c in 0..self.config.act_dim {
                        da[[n, c]] =
                            dinputs[[b, self.config.obs_dim + n * self.config.act_dim + c]];
                    }
                }
                out.push(da);
            }
        }
    }
}

impl NamedParams for MlpConcatCritic {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.l1.visit("l1", f);
        self.l2.visit("l2", f);
        self.out.visit("out", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut("l1", f);
        self.l2.visit_mut("l2", f);
        self.out.visit_mut("out", f);
    }
}
