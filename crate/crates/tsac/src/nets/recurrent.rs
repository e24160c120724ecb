//! GRU and LSTM critic backbones (ablations for the Transformer critic).
//!
//! Tokens are embedded exactly as in the Transformer (separate bias-free
//! state/action embeddings, no positional encodings — the recurrence itself
//! carries order), run through a stack of recurrent cells, and a bias-free
//! linear head reads the hidden state at each action token. Causality holds
//! by construction: the hidden state after token `i` has seen tokens
//! `0..=i` only.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use super::params::NamedParams;
use super::primitives::{sigmoid, Linear};
use super::{NetError, WindowInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Gru => &["reset", "update", "candidate"],
            CellKind::Lstm => &["input", "forget", "cell", "output"],
        }
    }
}

/// One recurrent layer: per-gate input and hidden maps.
#[derive(Debug, Clone)]
struct Cell {
    input_maps: Vec<Linear>,
    hidden_maps: Vec<Linear>,
}

impl Cell {
    fn new(kind: CellKind, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let gates = kind.gates();
        Self {
            input_maps: (0..gates)
                .map(|_| Linear::new(in_dim, hidden, true, rng))
                .collect(),
            hidden_maps: (0..gates)
                .map(|_| Linear::new(hidden, hidden, true, rng))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecurrentConfig {
    pub kind: CellKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub n_max: usize,
}

pub struct RecurrentCritic {
    config: RecurrentConfig,
    embed_state: Linear,
    embed_action: Linear,
    cells: Vec<Cell>,
    head: Linear,
}

impl Clone for RecurrentCritic {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed_state: self.embed_state.clone(),
            embed_action: self.embed_action.clone(),
            cells: self.cells.clone(),
            head: self.head.clone(),
        }
    }
}

/// Per-step, per-layer forward state saved for backpropagation through time.
struct StepCache {
    /// Layer input at this step.
    x: Array1<f64>,
    h_prev: Array1<f64>,
    /// Gate activations, in [`CellKind::gate_names`] order.
    gates: Vec<Array1<f64>>,
    /// GRU: the hidden-path candidate pre-gating `W_hn h + b_hn`.
    /// LSTM: the new cell state.
    aux: Array1<f64>,
    /// LSTM only: previous cell state and `tanh(c_new)`.
    c_prev: Array1<f64>,
    tanh_c: Array1<f64>,
    h_new: Array1<f64>,
}

pub struct RecurrentCache {
    /// `steps[w][t][layer]`.
    steps: Vec<Vec<Vec<StepCache>>>,
    states_mat: Array2<f64>,
    actions: Vec<Array2<f64>>,
}

fn lin_vec(l: &Linear, x: &ArrayView1<f64>) -> Array1<f64> {
    let mut y = l.weight.dot(x);
    if let Some(b) = &l.bias {
        y += b;
    }
    y
}

/// dW += outer(dy, x); db += dy; returns W^T dy.
fn lin_vec_backward(
    l: &Linear,
    x: &ArrayView1<f64>,
    dy: &ArrayView1<f64>,
    grads: Option<&mut Linear>,
) -> Array1<f64> {
    if let Some(g) = grads {
        for (r, dyr) in dy.iter().enumerate() {
            for (c, xc) in x.iter().enumerate() {
                g.weight[[r, c]] += dyr * xc;
            }
        }
        if let Some(b) = &mut g.bias {
            for (r, dyr) in dy.iter().enumerate() {
                b[r] += dyr;
            }
        }
    }
    l.weight.t().dot(dy)
}

impl RecurrentCritic {
    pub fn new(config: RecurrentConfig, rng: &mut impl Rng) -> Self {
        assert!(config.num_layers >= 1);
        let embed_state = Linear::new(config.obs_dim, config.hidden, false, rng);
        let embed_action = Linear::new(config.act_dim, config.hidden, false, rng);
        let cells = (0..config.num_layers)
            .map(|_| Cell::new(config.kind, config.hidden, config.hidden, rng))
            .collect();
        let head = Linear::new(config.hidden, 1, false, rng);
        Self {
            config,
            embed_state,
            embed_action,
            cells,
            head,
        }
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    fn cell_step(&self, cell: &Cell, x: &Array1<f64>, h: &Array1<f64>, c: &Array1<f64>) -> StepCache {
        match self.config.kind {
            CellKind::Gru => {
                let r = (lin_vec(&cell.input_maps[0], &x.view())
                    + lin_vec(&cell.hidden_maps[0], &h.view()))
                .mapv(sigmoid);
                let z = (lin_vec(&cell.input_maps[1], &x.view())
                    + lin_vec(&cell.hidden_maps[1], &h.view()))
                .mapv(sigmoid);
                let hn = lin_vec(&cell.hidden_maps[2], &h.view());
                let n = (lin_vec(&cell.input_maps[2], &x.view()) + &r * &hn).mapv(f64::tanh);
                let h_new = (1.0 - &z) * &n + &z * h;
                StepCache {
                    x: x.clone(),
                    h_prev: h.clone(),
                    gates: vec![r, z, n],
                    aux: hn,
                    c_prev: Array1::zeros(0),
                    tanh_c: Array1::zeros(0),
                    h_new,
                }
            }
            CellKind::Lstm => {
                let gate = |idx: usize| {
                    lin_vec(&cell.input_maps[idx], &x.view())
                        + lin_vec(&cell.hidden_maps[idx], &h.view())
                };
                let i = gate(0).mapv(sigmoid);
                let f = gate(1).mapv(sigmoid);
                let g = gate(2).mapv(f64::tanh);
                let o = gate(3).mapv(sigmoid);
                let c_new = &f * c + &i * &g;
                let tanh_c = c_new.mapv(f64::tanh);
                let h_new = &o * &tanh_c;
                StepCache {
                    x: x.clone(),
                    h_prev: h.clone(),
                    gates: vec![i, f, g, o],
                    aux: c_new,
                    c_prev: c.clone(),
                    tanh_c,
                    h_new,
                }
            }
        }
    }

    pub fn forward(
        &self,
        windows: &[WindowInput],
    ) -> Result<(Vec<Vec<f64>>, RecurrentCache), NetError> {
        let hidden = self.config.hidden;
        let mut states_mat = Array2::zeros((windows.len(), self.config.obs_dim));
        let mut all_steps = Vec::with_capacity(windows.len());
        let mut actions = Vec::with_capacity(windows.len());
        let mut q = Vec::with_capacity(windows.len());
        for (b, w) in windows.iter().enumerate() {
            let n = w.actions.nrows();
            if n == 0 {
                return Err(NetError::EmptyWindow);
            }
            if n > self.config.n_max {
                return Err(NetError::HorizonTooLong {
                    n,
                    n_max: self.config.n_max,
                });
            }
            if w.state.iter().any(|v| !v.is_finite())
                || w.actions.iter().any(|v| !v.is_finite())
            {
                return Err(NetError::NonFiniteInput);
            }
            states_mat.row_mut(b).assign(&ndarray::aview1(w.state));
            actions.push(w.actions.to_owned());

            let mut h = vec![Array1::zeros(hidden); self.cells.len()];
            let mut c = vec![Array1::zeros(hidden); self.cells.len()];
            let mut window_steps = Vec::with_capacity(n + 1);
            let mut q_w = Vec::with_capacity(n);
            for t in 0..=n {
                let mut x = if t == 0 {
                    self.embed_state.weight.dot(&ndarray::aview1(w.state))
                } else {
                    self.embed_action.weight.dot(&w.actions.row(t - 1))
                };
                let mut layer_caches = Vec::with_capacity(self.cells.len());
                for (l, cell) in self.cells.iter().enumerate() {
                    let step = self.cell_step(cell, &x, &h[l], &c[l]);
                    h[l] = step.h_new.clone();
                    if self.config.kind == CellKind::Lstm {
                        c[l] = step.aux.clone();
                    }
                    x = step.h_new.clone();
                    layer_caches.push(step);
                }
                if t > 0 {
                    q_w.push(self.head.weight.row(0).dot(&h[self.cells.len() - 1]));
                }
                window_steps.push(layer_caches);
            }
            q.push(q_w);
            all_steps.push(window_steps);
        }
        Ok((
            q,
            RecurrentCache {
                steps: all_steps,
                states_mat,
                actions,
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
        cache: &RecurrentCache,
        dq: &[Vec<f64>],
        mut grads: Option<&mut RecurrentCritic>,
        mut dactions: Option<&mut Vec<Array2<f64>>>,
    ) {
        if let Some(out) = dactions.as_deref_mut() {
            out.clear();
            for acts in &cache.actions {
                out.push(Array2::zeros(acts.raw_dim()));
            }
        }
        let hidden = self.config.hidden;
        let layers = self.cells.len();
        for (w, window_steps) in cache.steps.iter().enumerate() {
            let n = window_steps.len() - 1;
            let mut dh = vec![Array1::<f64>::zeros(hidden); layers];
            let mut dc = vec![Array1::<f64>::zeros(hidden); layers];
            for t in (0..=n).rev() {
                // Head contribution at action tokens.
                if t > 0 {
                    let g = dq[w][t - 1];
                    let top = &window_steps[t][layers - 1];
                    if let Some(gr) = grads.as_deref_mut() {
                        for (col, hv) in top.h_new.iter().enumerate() {
                            gr.head.weight[[0, col]] += g * hv;
                        }
                    }
                    for (col, wv) in self.head.weight.row(0).iter().enumerate() {
                        dh[layers - 1][col] += g * wv;
                    }
                }
                // Walk down the stack; dx of layer l feeds dh of layer l-1.
                let mut dx_down: Option<Array1<f64>> = None;
                for l in (0..layers).rev() {
                    if let Some(dx) = dx_down.take() {
                        dh[l] += &dx;
                    }
                    let step = &window_steps[t][l];
                    let (dx, dh_prev, dc_prev) = self.cell_backward(
                        l,
                        step,
                        &dh[l],
                        &dc[l],
                        grads.as_deref_mut(),
                    );
                    dh[l] = dh_prev;
                    dc[l] = dc_prev;
                    dx_down = Some(dx);
                }
                let dx0 = dx_down.expect("at least one layer");
                // Embedding gradients for this token.
                if t == 0 {
                    let s = cache.states_mat.row(w);
                    if let Some(gr) = grads.as_deref_mut() {
                        for (r, dv) in dx0.iter().enumerate() {
                            for (c2, sv) in s.iter().enumerate() {
                                gr.embed_state.weight[[r, c2]] += dv * sv;
                            }
                        }
                    }
                } else {
                    let a = cache.actions[w].row(t - 1);
                    if let Some(gr) = grads.as_deref_mut() {
                        for (r, dv) in dx0.iter().enumerate() {
                            for (c2, av) in a.iter().enumerate() {
                                gr.embed_action.weight[[r, c2]] += dv * av;
                            }
                        }
                    }
                    if let Some(out) = dactions.as_deref_mut() {
                        let da = self.embed_action.weight.t().dot(&dx0);
                        out[w].row_mut(t - 1).assign(&da);
                    }
                }
            }
        }
    }

    fn cell_backward(
        &self,
        layer: usize,
        step: &StepCache,
        dh_new: &Array1<f64>,
        dc_new_in: &Array1<f64>,
        grads: Option<&mut RecurrentCritic>,
    ) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let cell = &self.cells[layer];
        let mut gcell = grads.map(|g| &mut g.cells[layer]);
        match self.config.kind {
            CellKind::Gru => {
                let (r, z, n) = (&step.gates[0], &step.gates[1], &step.gates[2]);
                let hn = &step.aux;
                // h' = (1 - z) n + z h
                let dz = dh_new * &(&step.h_prev - n);
                let dn = dh_new * &(1.0 - z);
                let mut dh_prev = dh_new * z;
                let da_n = &dn * &n.mapv(|v| 1.0 - v * v);
                let dr = &da_n * hn;
                let dhn = &da_n * r;
                let da_r = &dr * &r.mapv(|v| v * (1.0 - v));
                let da_z = &dz * &z.mapv(|v| v * (1.0 - v));
                let mut dx = lin_vec_backward(
                    &cell.input_maps[0],
                    &step.x.view(),
                    &da_r.view(),
                    gcell.as_deref_mut().map(|c| &mut c.input_maps[0]),
                );
                dx += &lin_vec_backward(
                    &cell.input_maps[1],
                    &step.x.view(),
                    &da_z.view(),
                    gcell.as_deref_mut().map(|c| &mut c.input_maps[1]),
                );
                dx += &lin_vec_backward(
                    &cell.input_maps[2],
                    &step.x.view(),
                    &da_n.view(),
                    gcell.as_deref_mut().map(|c| &mut c.input_maps[2]),
                );
                dh_prev += &lin_vec_backward(
                    &cell.hidden_maps[0],
                    &step.h_prev.view(),
                    &da_r.view(),
                    gcell.as_deref_mut().map(|c| &mut c.hidden_maps[0]),
                );
                dh_prev += &lin_vec_backward(
                    &cell.hidden_maps[1],
                    &step.h_prev.view(),
                    &da_z.view(),
                    gcell.as_deref_mut().map(|c| &mut c.hidden_maps[1]),
                );
                dh_prev += &lin_vec_backward(
                    &cell.hidden_maps[2],
                    &step.h_prev.view(),
                    &dhn.view(),
                    gcell.as_deref_mut().map(|c| &mut c.hidden_maps[2]),
                );
                (dx, dh_prev, Array1::zeros(0))
            }
            CellKind::Lstm => {
                let (i, f, g, o) = (
                    &step.gates[0],
                    &step.gates[1],
                    &step.gates[2],
                    &step.gates[3],
                );
                let mut dc = dc_new_in.clone();
                let d_o = dh_new * &step.tanh_c;
                dc += &(dh_new * o * &step.tanh_c.mapv(|v| 1.0 - v * v));
                let d_f = &dc * &step.c_prev;
                let d_i = &dc * g;
                let d_g = &dc * i;
                let dc_prev = &dc * f;
                let da = [
                    &d_i * &i.mapv(|v| v * (1.0 - v)),
                    &d_f * &f.mapv(|v| v * (1.0 - v)),
                    &d_g * &g.mapv(|v| 1.0 - v * v),
                    &d_o * &o.mapv(|v| v * (1.0 - v)),
                ];
                let mut dx = Array1::zeros(step.x.len());
                let mut dh_prev = Array1::zeros(step.h_prev.len());
                for (idx, da_gate) in da.iter().enumerate() {
                    dx += &lin_vec_backward(
                        &cell.input_maps[idx],
                        &step.x.view(),
                        &da_gate.view(),
                        gcell.as_deref_mut().map(|c| &mut c.input_maps[idx]),
                    );
                    dh_prev += &lin_vec_backward(
                        &cell.hidden_maps[idx],
                        &step.h_prev.view(),
                        &da_gate.view(),
                        gcell.as_deref_mut().map(|c| &mut c.hidden_maps[idx]),
                    );
                }
                (dx, dh_prev, dc_prev)
            }
        }
    }
}

impl NamedParams for RecurrentCritic {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.embed_state.visit("embed_state", f);
        self.embed_action.visit("embed_action", f);
        let names = self.config.kind.gate_names();
        for (l, cell) in self.cells.iter().enumerate() {
            for (g, lin) in cell.input_maps.iter().enumerate() {
                lin.visit(&format!("cell{l}.input_{}", names[g]), f);
            }
            for (g, lin) in cell.hidden_maps.iter().enumerate() {
                lin.visit(&format!("cell{l}.hidden_{}", names[g]), f);
            }
        }
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.embed_state.visit_mut("embed_state", f);
        self.embed_action.visit_mut("embed_action", f);
        let names = self.config.kind.gate_names();
        for (l, cell) in self.cells.iter_mut().enumerate() {
            for (g, lin) in cell.input_maps.iter_mut().enumerate() {
                lin.visit_mut(&format!("cell{l}.input_{}", names[g]), f);
            }
            for (g, lin) in cell.hidden_maps.iter_mut().enumerate() {
                lin.visit_mut(&format!("cell{l}.hidden_{}", names[g]), f);
            }
        }
        self.head.visit_mut("head", f);
    }
}
