//! Named-parameter plumbing shared by all networks: visitation in a fixed
//! order, Polyak/hard target updates, the AdamW optimizer, and checkpoint
//! save/load keyed by module path.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has {got} values, expected {expected}")]
    LengthMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
}

/// Networks expose their parameters as named flat slices, visited in a
/// deterministic order.
pub trait NamedParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

/// Total number of scalar parameters.
pub fn param_count(net: &impl NamedParams) -> usize {
    let mut n = 0;
    net.visit(&mut |_, s| n += s.len());
    n
}

/// Zeroes every parameter (used to turn a clone into gradient storage).
pub fn zero_params(net: &mut impl NamedParams) {
    net.visit_mut(&mut |_, s| s.fill(0.0));
}

fn snapshot(net: &impl NamedParams) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    net.visit(&mut |_, s| out.push(s.to_vec()));
    out
}

/// Soft target update `target <- tau * online + (1 - tau) * target`.
pub fn polyak_update<T: NamedParams>(target: &mut T, online: &T, tau: f64) {
    let src = snapshot(online);
    let mut idx = 0;
    target.visit_mut(&mut |_, dst| {
        for (d, s) in dst.iter_mut().zip(&src[idx]) {
            *d = tau * s + (1.0 - tau) * *d;
        }
        idx += 1;
    });
}

/// Exact copy `target <- online`.
pub fn hard_copy<T: NamedParams>(target: &mut T, online: &T) {
    let src = snapshot(online);
    let mut idx = 0;
    target.visit_mut(&mut |_, dst| {
        dst.copy_from_slice(&src[idx]);
        idx += 1;
    });
}

/// Largest absolute difference between two parameter sets of the same shape.
pub fn max_param_diff<T: NamedParams>(a: &T, b: &T) -> f64 {
    let src = snapshot(b);
    let mut idx = 0;
    let mut worst = 0.0f64;
    a.visit(&mut |_, s| {
        for (x, y) in s.iter().zip(&src[idx]) {
            worst = worst.max((x - y).abs());
        }
        idx += 1;
    });
    worst
}

/// Adam with decoupled weight decay over the flattened parameter vector.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One optimizer step; `grads` must have the same layout as `params`.
    pub fn step<T: NamedParams>(&mut self, params: &mut T, grads: &T) {
        self.step += 1;
        let g = snapshot(grads);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut idx = 0;
        let mut offset = 0;
        params.visit_mut(&mut |_, p| {
            let gs = &g[idx];
            for (i, x) in p.iter_mut().enumerate() {
                let o = offset + i;
                self.m[o] = self.beta1 * self.m[o] + (1.0 - self.beta1) * gs[i];
                self.v[o] = self.beta2 * self.v[o] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = self.m[o] / bc1;
                let vhat = self.v[o] / bc2;
                *x -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
            offset += p.len();
            idx += 1;
        });
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    modules: BTreeMap<String, Vec<f64>>,
}

const FORMAT_TAG: &str = "tsac-checkpoint-v1";

/// Serializes named modules into a self-describing JSON container keyed by
/// `module_prefix.param_path`.
pub fn save_checkpoint(
    mut w: impl Write,
    modules: &[(&str, &dyn NamedParams)],
) -> Result<(), CheckpointError> {
    let mut map = BTreeMap::new();
    for (prefix, net) in modules {
        net.visit(&mut |name, s| {
            map.insert(format!("{prefix}.{name}"), s.to_vec());
        });
    }
    let file = CheckpointFile {
        format: FORMAT_TAG.to_string(),
        modules: map,
    };
    serde_json::to_writer(&mut w, &file)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(())
}

/// Restores named modules from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    mut r: impl Read,
    modules: &mut [(&str, &mut dyn NamedParams)],
) -> Result<(), CheckpointError> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if file.format != FORMAT_TAG {
        return Err(CheckpointError::Malformed(format!(
            "unknown format tag `{}`",
            file.format
        )));
    }
    for (prefix, net) in modules {
        let mut err = None;
        net.visit_mut(&mut |name, s| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}.{name}");
            match file.modules.get(&key) {
                None => err = Some(CheckpointError::MissingParam(key)),
                Some(vals) if vals.len() != s.len() => {
                    err = Some(CheckpointError::LengthMismatch {
                        name: key,
                        got: vals.len(),
                        expected: s.len(),
                    })
                }
                Some(vals) => s.copy_from_slice(vals),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(())
}
