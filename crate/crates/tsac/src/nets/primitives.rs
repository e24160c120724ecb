//! Dense-layer building blocks with explicit backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Fan-in uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fanin_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// A dense map `y = x W^T + b` over batches of row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = fanin_uniform(out_dim, in_dim, rng);
        let bias = bias.then(|| {
            let bound = 1.0 / (in_dim as f64).sqrt();
            Array1::from_shape_simple_fn(out_dim, || rng.random_range(-bound..bound))
        });
        Self { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// `(batch, in) -> (batch, out)`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        grads: Option<&mut Linear>,
    ) -> Array2<f64> {
        if let Some(g) = grads {
            g.weight += &dy.t().dot(x);
            if let Some(db) = &mut g.bias {
                *db += &dy.sum_axis(Axis(0));
            }
        }
        dy.dot(&self.weight)
    }
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

/// Forward cache: normalized rows and reciprocal standard deviations.
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut rstd = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / dim;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &normalized * &self.gain + &self.shift;
        (out, LayerNormCache { normalized, rstd })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &ArrayView2<f64>,
        grads: Option<&mut LayerNorm>,
    ) -> Array2<f64> {
        let dim = dy.ncols() as f64;
        if let Some(g) = grads {
            for (dy_row, n_row) in dy.rows().into_iter().zip(cache.normalized.rows()) {
                for i in 0..dy.ncols() {
                    g.gain[i] += dy_row[i] * n_row[i];
                    g.shift[i] += dy_row[i];
                }
            }
        }
        let mut dx = Array2::zeros(dy.raw_dim());
        for (r, (dy_row, n_row)) in dy.rows().into_iter().zip(cache.normalized.rows()).enumerate() {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for i in 0..dy.ncols() {
                let dxhat = dy_row[i] * self.gain[i];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * n_row[i];
            }
            mean_dxhat /= dim;
            mean_dxhat_xhat /= dim;
            for i in 0..dy.ncols() {
                let dxhat = dy_row[i] * self.gain[i];
                dx[[r, i]] = cache.rstd[r] * (dxhat - mean_dxhat - n_row[i] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl Linear {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice().unwrap());
        if let Some(b) = &self.bias {
            f(&format!("{prefix}.bias"), b.as_slice().unwrap());
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().unwrap(),
        );
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b.as_slice_mut().unwrap());
        }
    }
}

impl LayerNorm {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.gain"), self.gain.as_slice().unwrap());
        f(&format!("{prefix}.shift"), self.shift.as_slice().unwrap());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.gain"), self.gain.as_slice_mut().unwrap());
        f(
            &format!("{prefix}.shift"),
            self.shift.as_slice_mut().unwrap(),
        );
    }
}

/// Elementwise leaky rectifier.
pub fn leaky_relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Gradient through the leaky rectifier given its pre-activation input.
pub fn leaky_relu_backward(pre: &Array2<f64>, dy: &ArrayView2<f64>) -> Array2<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Sinusoidal positional encodings: row `pos`, interleaved sin/cos pairs.
pub fn sinusoidal_encoding(max_positions: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_positions, dim));
    for pos in 0..max_positions {
        for i in 0..dim / 2 {
            let rate = (pos as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, 2 * i]] = rate.sin();
            pe[[pos, 2 * i + 1]] = rate.cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let rate = (pos as f64) / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[pos, dim - 1]] = rate.sin();
        }
    }
    pe
}
