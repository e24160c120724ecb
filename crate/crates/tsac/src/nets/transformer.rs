//! The causal Transformer critic.
//!
//! A window `(s_t, a_t, ..., a_{t+n-1})` becomes a token sequence: the state
//! token at position 0 (its own linear embedding, no bias), then one token
//! per action (a second embedding, no bias), all with sinusoidal positional
//! encodings added. A stack of masked multi-head self-attention blocks with
//! residual Add&Norm follows; attention at token `i` reads tokens `<= i`
//! only, so the output at action token `i` depends on exactly the prefix
//! `(s_t, a_t, ..., a_{t+i-1})`. A bias-free linear head turns each action
//! token into one scalar, giving the `n` prefix-conditioned Q-values. The
//! state token is never read by the head. No dropout anywhere.
//!
//! Batches of windows with different horizons are packed row-wise into one
//! token matrix so the dense maps run as single matrix products; attention
//! and normalization stay row- or window-local, which keeps every window's
//! output bit-for-bit independent of its batch neighbors.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::params::NamedParams;
use super::primitives::{
    leaky_relu, leaky_relu_backward, sinusoidal_encoding, LayerNorm, LayerNormCache, Linear,
};
use super::{NetError, WindowInput};

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dims_per_head: usize,
    /// Width of the position-wise feed-forward hidden layer.
    pub ffn_hidden: usize,
    /// Maximum number of action tokens per window.
    pub n_max: usize,
    /// Add&Norm placement; `false` is the post-norm original convention.
    pub pre_norm: bool,
}

impl TransformerConfig {
    pub fn model_dim(&self) -> usize {
        self.num_heads * self.dims_per_head
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_attn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ln_ffn: LayerNorm,
}

impl Block {
    fn new(dim: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(dim, dim, true, rng),
            wk: Linear::new(dim, dim, true, rng),
            wv: Linear::new(dim, dim, true, rng),
            wo: Linear::new(dim, dim, true, rng),
            ln_attn: LayerNorm::new(dim),
            ffn_in: Linear::new(dim, ffn_hidden, true, rng),
            ffn_out: Linear::new(ffn_hidden, dim, true, rng),
            ln_ffn: LayerNorm::new(dim),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        self.ln_attn.visit(&format!("{prefix}.ln_attn"), f);
        self.ffn_in.visit(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit(&format!("{prefix}.ffn_out"), f);
        self.ln_ffn.visit(&format!("{prefix}.ln_ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        self.ln_attn.visit_mut(&format!("{prefix}.ln_attn"), f);
        self.ffn_in.visit_mut(&format!("{prefix}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{prefix}.ffn_out"), f);
        self.ln_ffn.visit_mut(&format!("{prefix}.ln_ffn"), f);
    }
}

pub struct TransformerCritic {
    config: TransformerConfig,
    embed_state: Linear,
    embed_action: Linear,
    blocks: Vec<Block>,
    head: Linear,
    /// Constant `(n_max + 1) x dim` table.
    pos: Array2<f64>,
}

impl Clone for TransformerCritic {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed_state: self.embed_state.clone(),
            embed_action: self.embed_action.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
            pos: self.pos.clone(),
        }
    }
}

struct BlockCache {
    /// Input tokens to the block.
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Causal softmax weights per (window, head), lower-triangular.
    probs: Vec<Array2<f64>>,
    /// Concatenated per-head context (input to the output projection).
    ctx: Array2<f64>,
    ln_attn: LayerNormCache,
    /// Input to the feed-forward sublayer.
    x1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ln_ffn: LayerNormCache,
    output: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct TransformerCache {
    /// Token row offset of each window.
    offsets: Vec<usize>,
    /// Tokens per window (horizon + 1).
    tokens_per_window: Vec<usize>,
    states_mat: Array2<f64>,
    actions_mat: Array2<f64>,
    blocks: Vec<BlockCache>,
    /// Output tokens of the final block (input to the head).
    final_tokens: Array2<f64>,
}

impl TransformerCritic {
    pub fn new(config: TransformerConfig, rng: &mut impl Rng) -> Self {
        assert!(config.num_layers >= 1, "critic needs at least one layer");
        let dim = config.model_dim();
        let embed_state = Linear::new(config.obs_dim, dim, false, rng);
        let embed_action = Linear::new(config.act_dim, dim, false, rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block::new(dim, config.ffn_hidden, rng))
            .collect();
        let head = Linear::new(dim, 1, false, rng);
        let pos = sinusoidal_encoding(config.n_max + 1, dim);
        Self {
            config,
            embed_state,
            embed_action,
            blocks,
            head,
            pos,
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Q-values for a batch of windows plus the cache for [`Self::backward`].
    pub fn forward(
        &self,
        windows: &[WindowInput],
    ) -> Result<(Vec<Vec<f64>>, TransformerCache), NetError> {
        let dim = self.config.model_dim();
        let mut offsets = Vec::with_capacity(windows.len());
        let mut tokens_per_window = Vec::with_capacity(windows.len());
        let mut total = 0;
        let mut total_actions = 0;
        for w in windows {
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
            offsets.push(total);
            tokens_per_window.push(n + 1);
            total += n + 1;
            total_actions += n;
        }

        let mut states_mat = Array2::zeros((windows.len(), self.config.obs_dim));
        let mut actions_mat = Array2::zeros((total_actions, self.config.act_dim));
        let mut arow = 0;
        for (b, w) in windows.iter().enumerate() {
            states_mat
                .row_mut(b)
                .assign(&ndarray::aview1(w.state));
            for r in 0..w.actions.nrows() {
                actions_mat.row_mut(arow).assign(&w.actions.row(r));
                arow += 1;
            }
        }

        // Embed and interleave into the packed token matrix, adding the
        // positional encodings.
        let es = self.embed_state.forward(&states_mat.view());
        let ea = self.embed_action.forward(&actions_mat.view());
        let mut tokens = Array2::zeros((total, dim));
        let mut arow = 0;
        for (b, &off) in offsets.iter().enumerate() {
            let n = tokens_per_window[b] - 1;
            {
                let mut row = tokens.row_mut(off);
                row.assign(&es.row(b));
                row += &self.pos.row(0);
            }
            for j in 0..n {
                let mut row = tokens.row_mut(off + 1 + j);
                row.assign(&ea.row(arow));
                row += &self.pos.row(1 + j);
                arow += 1;
            }
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut x = tokens;
        for block in &self.blocks {
            let cache = self.block_forward(block, x, &offsets, &tokens_per_window);
            x = cache.output.clone();
            block_caches.push(cache);
        }

        let qs_all = self.head.forward(&x.view());
        let mut q = Vec::with_capacity(windows.len());
        for (b, &off) in offsets.iter().enumerate() {
            let n = tokens_per_window[b] - 1;
            q.push((0..n).map(|i| qs_all[[off + 1 + i, 0]]).collect());
        }
        Ok((
            q,
            TransformerCache {
                offsets,
                tokens_per_window,
                states_mat,
                actions_mat,
                blocks: block_caches,
                final_tokens: x,
            },
        ))
    }

    /// Convenience single-window forward.
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

    fn block_forward(
        &self,
        block: &Block,
        input: Array2<f64>,
        offsets: &[usize],
        tokens_per_window: &[usize],
    ) -> BlockCache {
        let heads = self.config.num_heads;
        let dh = self.config.dims_per_head;
        let scale = 1.0 / (dh as f64).sqrt();

        // Pre-norm reads the normalized input; post-norm attends to the raw
        // input and normalizes after the residual.
        let (attn_in, pre_ln_attn) = if self.config.pre_norm {
            let (normed, c) = block.ln_attn.forward(&input.view());
            (normed, Some(c))
        } else {
            (input.clone(), None)
        };
        let q = block.wq.forward(&attn_in.view());
        let k = block.wk.forward(&attn_in.view());
        let v = block.wv.forward(&attn_in.view());

        let mut ctx = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(offsets.len() * heads);
        for (w, &off) in offsets.iter().enumerate() {
            let nw = tokens_per_window[w];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Array2::zeros((nw, nw));
                for i in 0..nw {
                    // Causal: query i attends to keys 0..=i only.
                    let qi = q.slice(s![off + i, cols.clone()]);
                    let mut row_max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = k.slice(s![off + j, cols.clone()]);
                        let score = qi.dot(&kj) * scale;
                        p[[i, j]] = score;
                        row_max = row_max.max(score);
                    }
                    let mut denom = 0.0;
                    for j in 0..=i {
                        let e = (p[[i, j]] - row_max).exp();
                        p[[i, j]] = e;
                        denom += e;
                    }
                    for j in 0..=i {
                        p[[i, j]] /= denom;
                        let weight = p[[i, j]];
                        let vj = v.slice(s![off + j, cols.clone()]);
                        let mut ci = ctx.slice_mut(s![off + i, cols.clone()]);
                        ci.scaled_add(weight, &vj);
                    }
                }
                probs.push(p);
            }
        }

        let o = block.wo.forward(&ctx.view());
        let (x1, ln_attn, ffn_in_mat, pre_ln_ffn);
        if self.config.pre_norm {
            x1 = &input + &o;
            ln_attn = pre_ln_attn.expect("set in pre-norm branch");
            let (normed, c) = block.ln_ffn.forward(&x1.view());
            ffn_in_mat = normed;
            pre_ln_ffn = Some(c);
        } else {
            let r1 = &input + &o;
            let (normed, c) = block.ln_attn.forward(&r1.view());
            x1 = normed;
            ln_attn = c;
            ffn_in_mat = x1.clone();
            pre_ln_ffn = None;
        }

        let ffn_pre = block.ffn_in.forward(&ffn_in_mat.view());
        let ffn_act = leaky_relu(&ffn_pre);
        let f2 = block.ffn_out.forward(&ffn_act.view());
        let (output, ln_ffn) = if self.config.pre_norm {
            (&x1 + &f2, pre_ln_ffn.expect("set in pre-norm branch"))
        } else {
            let r2 = &x1 + &f2;
            block.ln_ffn.forward(&r2.view())
        };

        BlockCache {
            input,
            q,
            k,
            v,
            probs,
            ctx,
            ln_attn,
            x1,
            ffn_pre,
            ffn_act,
            ln_ffn,
            output,
        }
    }

    /// Backward pass for a batch.
    ///
    /// `dq[w][i]` is the loss gradient on the i-th Q-value of window `w`.
    /// Parameter gradients accumulate into `grads` (a zeroed clone of the
    /// critic) when given; gradients with respect to the window actions are
    /// written into `dactions` when given (one `n x act_dim` array per
    /// window, overwritten).
    pub fn backward(
        &self,
        cache: &TransformerCache,
        dq: &[Vec<f64>],
        mut grads: Option<&mut TransformerCritic>,
        dactions: Option<&mut Vec<Array2<f64>>>,
    ) {
        let total = cache.final_tokens.nrows();

        // Head: scalar per action token; state tokens get zero gradient.
        let mut dy = Array2::zeros((total, 1));
        for (w, &off) in cache.offsets.iter().enumerate() {
            for (i, g) in dq[w].iter().enumerate() {
                dy[[off + 1 + i, 0]] = *g;
            }
        }
        let mut dtokens = self.head.backward(
            &cache.final_tokens.view(),
            &dy.view(),
            grads.as_deref_mut().map(|g| &mut g.head),
        );

        for (idx, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[idx];
            dtokens = self.block_backward(
                block,
                bc,
                dtokens,
                &cache.offsets,
                &cache.tokens_per_window,
                idx,
                &mut grads,
            );
        }

        // Embeddings: split the token gradient back into state and action
        // rows (positional encodings are constant).
        let b = cache.offsets.len();
        let mut dstates = Array2::zeros((b, self.config.model_dim()));
        let mut dacts = Array2::zeros((cache.actions_mat.nrows(), self.config.model_dim()));
        let mut arow = 0;
        for (w, &off) in cache.offsets.iter().enumerate() {
            let n = cache.tokens_per_window[w] - 1;
            dstates.row_mut(w).assign(&dtokens.row(off));
            for j in 0..n {
                dacts.row_mut(arow).assign(&dtokens.row(off + 1 + j));
                arow += 1;
            }
        }
        let dact_inputs = self.embed_action.backward(
            &cache.actions_mat.view(),
            &dacts.view(),
            grads.as_deref_mut().map(|g| &mut g.embed_action),
        );
        self.embed_state.backward(
            &cache.states_mat.view(),
            &dstates.view(),
            grads.as_deref_mut().map(|g| &mut g.embed_state),
        );
        if let Some(out) = dactions {
            out.clear();
            let mut arow = 0;
            for (w, _) in cache.offsets.iter().enumerate() {
                let n = cache.tokens_per_window[w] - 1;
                out.push(dact_inputs.slice(s![arow..arow + n, ..]).to_owned());
                arow += n;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        block: &Block,
        bc: &BlockCache,
        dout: Array2<f64>,
        offsets: &[usize],
        tokens_per_window: &[usize],
        idx: usize,
        grads: &mut Option<&mut TransformerCritic>,
    ) -> Array2<f64> {
        let heads = self.config.num_heads;
        let dh = self.config.dims_per_head;
        let scale = 1.0 / (dh as f64).sqrt();

        // Post-norm: dout passes back through ln_ffn into the residual sum
        // x1 + ffn(x1). Pre-norm: dout is already the residual gradient.
        let (dx1_plus, dffn_path) = if self.config.pre_norm {
            (dout.clone(), dout)
        } else {
            let g = grads.as_deref_mut().map(|gc| &mut gc.blocks[idx].ln_ffn);
            let dr2 = block.ln_ffn.backward(&bc.ln_ffn, &dout.view(), g);
            (dr2.clone(), dr2)
        };

        // Feed-forward sublayer.
        let ffn_input = if self.config.pre_norm {
            // Normalized x1 was the FFN input.
            &bc.ln_ffn.normalized * &block.ln_ffn.gain + &block.ln_ffn.shift
        } else {
            bc.x1.clone()
        };
        let dffn_out = self.linear_backward_into(
            grads,
            idx,
            LinearSlot::FfnOut,
            &bc.ffn_act.view(),
            &dffn_path.view(),
        );
        let dffn_pre = leaky_relu_backward(&bc.ffn_pre, &dffn_out.view());
        let dffn_in = self.linear_backward_into(
            grads,
            idx,
            LinearSlot::FfnIn,
            &ffn_input.view(),
            &dffn_pre.view(),
        );

        let mut dx1 = dx1_plus;
        if self.config.pre_norm {
            let g = grads
                .as_deref_mut()
                .map(|gc| &mut gc.blocks[idx].ln_ffn);
            dx1 += &block.ln_ffn.backward(&bc.ln_ffn, &dffn_in.view(), g);
        } else {
            dx1 += &dffn_in;
        }

        // Attention sublayer.
        let (dresidual, dattn_out) = if self.config.pre_norm {
            (dx1.clone(), dx1)
        } else {
            let g = grads
                .as_deref_mut()
                .map(|gc| &mut gc.blocks[idx].ln_attn);
            let dr1 = block.ln_attn.backward(&bc.ln_attn, &dx1.view(), g);
            (dr1.clone(), dr1)
        };

        let dctx = self.linear_backward_into(
            grads,
            idx,
            LinearSlot::Wo,
            &bc.ctx.view(),
            &dattn_out.view(),
        );

        let mut dq_mat = Array2::zeros(bc.q.raw_dim());
        let mut dk_mat = Array2::zeros(bc.k.raw_dim());
        let mut dv_mat = Array2::zeros(bc.v.raw_dim());
        for (w, &off) in offsets.iter().enumerate() {
            let nw = tokens_per_window[w];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &bc.probs[w * heads + h];
                for i in 0..nw {
                    let dctx_i = dctx.slice(s![off + i, cols.clone()]);
                    // dP and the softmax Jacobian, rows are independent.
                    let mut dscore = vec![0.0; i + 1];
                    let mut inner = 0.0;
                    for j in 0..=i {
                        let vj = bc.v.slice(s![off + j, cols.clone()]);
                        let dp = dctx_i.dot(&vj);
                        dscore[j] = dp;
                        inner += dp * p[[i, j]];
                    }
                    for j in 0..=i {
                        let ds = p[[i, j]] * (dscore[j] - inner) * scale;
                        let kj = bc.k.slice(s![off + j, cols.clone()]);
                        let qi = bc.q.slice(s![off + i, cols.clone()]);
                        {
                            let mut dqi = dq_mat.slice_mut(s![off + i, cols.clone()]);
                            dqi.scaled_add(ds, &kj);
                        }
                        {
                            let mut dkj = dk_mat.slice_mut(s![off + j, cols.clone()]);
                            dkj.scaled_add(ds, &qi);
                        }
                        {
                            let weight = p[[i, j]];
                            let mut dvj = dv_mat.slice_mut(s![off + j, cols.clone()]);
                            dvj.scaled_add(weight, &dctx_i);
                        }
                    }
                }
            }
        }

        let attn_input = if self.config.pre_norm {
            &bc.ln_attn.normalized * &block.ln_attn.gain + &block.ln_attn.shift
        } else {
            bc.input.clone()
        };
        let mut dattn_in = self.linear_backward_into(
            grads,
            idx,
            LinearSlot::Wq,
            &attn_input.view(),
            &dq_mat.view(),
        );
        dattn_in += &self.linear_backward_into(
            grads,
            idx,
            LinearSlot::Wk,
            &attn_input.view(),
            &dk_mat.view(),
        );
        dattn_in += &self.linear_backward_into(
            grads,
            idx,
            LinearSlot::Wv,
            &attn_input.view(),
            &dv_mat.view(),
        );

        if self.config.pre_norm {
            let g = grads
                .as_deref_mut()
                .map(|gc| &mut gc.blocks[idx].ln_attn);
            let mut dinput = block.ln_attn.backward(&bc.ln_attn, &dattn_in.view(), g);
            dinput += &dresidual;
            dinput
        } else {
            let mut dinput = dresidual;
            dinput += &dattn_in;
            dinput
        }
    }

    fn linear_backward_into(
        &self,
        grads: &mut Option<&mut TransformerCritic>,
        idx: usize,
        slot: LinearSlot,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
    ) -> Array2<f64> {
        let lin = slot.pick(&self.blocks[idx]);
        let g = grads
            .as_deref_mut()
            .map(|gc| slot.pick_mut(&mut gc.blocks[idx]));
        lin.backward(x, dy, g)
    }
}

#[derive(Clone, Copy)]
enum LinearSlot {
    Wq,
    Wk,
    Wv,
    Wo,
    FfnIn,
    FfnOut,
}

impl LinearSlot {
    fn pick(self, b: &Block) -> &Linear {
        match self {
            LinearSlot::Wq => &b.wq,
            LinearSlot::Wk => &b.wk,
            LinearSlot::Wv => &b.wv,
            LinearSlot::Wo => &b.wo,
            LinearSlot::FfnIn => &b.ffn_in,
            LinearSlot::FfnOut => &b.ffn_out,
        }
    }

    fn pick_mut(self, b: &mut Block) -> &mut Linear {
        match self {
            LinearSlot::Wq => &mut b.wq,
            LinearSlot::Wk => &mut b.wk,
            LinearSlot::Wv => &mut b.wv,
            LinearSlot::Wo => &mut b.wo,
            LinearSlot::FfnIn => &mut b.ffn_in,
            LinearSlot::FfnOut => &mut b.ffn_out,
        }
    }
}

impl NamedParams for TransformerCritic {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.embed_state.visit("embed_state", f);
        self.embed_action.visit("embed_action", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), f);
        }
        self.head.visit("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.embed_state.visit_mut("embed_state", f);
        self.embed_action.visit_mut("embed_action", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
        self.head.visit_mut("head", f);
    }
}
