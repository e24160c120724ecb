use super::*;
use crate::rng::{substream, Stream};
use ndarray::{Array1, Array2};
use rand::Rng;

fn tiny_config(backbone: Backbone) -> CriticConfig {
    CriticConfig {
        backbone,
        obs_dim: 3,
        act_dim: 2,
        num_layers: 2,
        num_heads: 2,
        dims_per_head: 3,
        ffn_hidden: 8,
        n_max: 4,
        pre_norm: false,
    }
}

fn random_window(rng: &mut impl Rng, obs_dim: usize, act_dim: usize, n: usize) -> (Vec<f64>, Array2<f64>) {
    let state: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions = Array2::from_shape_simple_fn((n, act_dim), || rng.random_range(-1.0..1.0));
    (state, actions)
}

fn build(backbone: Backbone, seed: u64) -> Critic {
    let mut rng = substream(seed, Stream::NetsInit);
    build_critic(&tiny_config(backbone), &mut rng)
}

#[test]
fn causal_backbones_ignore_future_actions_bit_exactly() {
    for backbone in [Backbone::Transformer, Backbone::Gru, Backbone::Lstm] {
        let critic = build(backbone, 5);
        let mut rng = substream(9, Stream::PolicySampling);
        let (state, actions) = random_window(&mut rng, 3, 2, 4);
        let base = critic.q_values(&state, &actions.view()).unwrap();
        assert_eq!(base.len(), 4);
        for j in 0..4 {
            let mut perturbed = actions.clone();
            perturbed[[j, 0]] += 0.37;
            perturbed[[j, 1]] -= 0.21;
            let q = critic.q_values(&state, &perturbed.view()).unwrap();
            for (i, (a, b)) in base.iter().zip(&q).enumerate() {
                // Output i is the 1-based horizon i+1, which consumes
                // actions 0..=i; it is independent of action j iff i < j.
                if i < j {
                    assert_eq!(
                        a.to_bits(),
                        b.to_bits(),
                        "{backbone:?}: q[{i}] changed when perturbing action {j}"
                    );
                }
            }
            // The first prefix containing the perturbed action must react.
            assert_ne!(base[j], q[j], "{backbone:?}: no sensitivity at {j}");
        }
    }
}

#[test]
fn mlp_concat_exhibits_causal_leakage() {
    let mut cfg = tiny_config(Backbone::MlpConcat);
    cfg.n_max = 4;
    let mut rng = substream(5, Stream::NetsInit);
    let critic = build_critic(&cfg, &mut rng);
    let (state, actions) = random_window(&mut rng, 3, 2, 4);
    let base = critic.q_values(&state, &actions.view()).unwrap();
    assert_eq!(base.len(), 1);
    let mut perturbed = actions.clone();
    perturbed[[2, 0]] += 0.5;
    let q = critic.q_values(&state, &perturbed.view()).unwrap();
    assert_ne!(base[0], q[0], "flattened critic must see future actions");
    // Variable horizons are rejected.
    let short = actions.slice(ndarray::s![0..2, ..]);
    assert!(matches!(
        critic.q_values(&state, &short),
        Err(NetError::FixedHorizonMismatch { got: 2, expected: 4 })
    ));
}

#[test]
fn batch_results_are_independent_of_batch_composition() {
    let critic = build(Backbone::Transformer, 7);
    let mut rng = substream(13, Stream::PolicySampling);
    let (s1, a1) = random_window(&mut rng, 3, 2, 3);
    let (s2, a2) = random_window(&mut rng, 3, 2, 4);
    let (s3, a3) = random_window(&mut rng, 3, 2, 1);
    let alone = critic.q_values(&s2, &a2.view()).unwrap();
    let (batched, _) = critic
        .forward(&[
            WindowInput { state: &s1, actions: a1.view() },
            WindowInput { state: &s2, actions: a2.view() },
            WindowInput { state: &s3, actions: a3.view() },
        ])
        .unwrap();
    for (a, b) in alone.iter().zip(&batched[1]) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // Duplicated inputs give identical rows.
    let (dup, _) = critic
        .forward(&[
            WindowInput { state: &s1, actions: a1.view() },
            WindowInput { state: &s1, actions: a1.view() },
        ])
        .unwrap();
    assert_eq!(dup[0], dup[1]);
}

#[test]
fn input_validation() {
    let critic = build(Backbone::Transformer, 1);
    let mut rng = substream(2, Stream::PolicySampling);
    let (state, actions) = random_window(&mut rng, 3, 2, 5);
    assert!(matches!(
        critic.q_values(&state, &actions.view()),
        Err(NetError::HorizonTooLong { n: 5, n_max: 4 })
    ));
    let empty = Array2::zeros((0, 2));
    assert!(matches!(
        critic.q_values(&state, &empty.view()),
        Err(NetError::EmptyWindow)
    ));
    let mut bad = actions.slice(ndarray::s![0..2, ..]).to_owned();
    bad[[0, 0]] = f64::NAN;
    assert!(matches!(
        critic.q_values(&state, &bad.view()),
        Err(NetError::NonFiniteInput)
    ));
}

/// Independent plain-`f64` recomputation of the Transformer forward pass for
/// a 1-layer, 1-head critic with every linear weight and bias set to the
/// same constant. Follows the architecture definition directly: separate
/// bias-free embeddings, sinusoidal positions, causal single-head attention,
/// post-norm Add&Norm, leaky-relu feed-forward, bias-free scalar head.
mod scalar_oracle {
    pub const DH: usize = 4;
    pub const FFN: usize = 6;
    const EPS: f64 = 1e-5;
    const SLOPE: f64 = 0.01;

    fn pe(pos: usize, d: usize) -> f64 {
        let i = d / 2;
        let rate = pos as f64 / 10_000f64.powf(2.0 * i as f64 / DH as f64);
        if d % 2 == 0 {
            rate.sin()
        } else {
            rate.cos()
        }
    }

    fn lin_const(c: f64, x: &[f64], out_dim: usize, bias: bool) -> Vec<f64> {
        let s: f64 = x.iter().sum();
        vec![c * s + if bias { c } else { 0.0 }; out_dim]
    }

    fn layer_norm(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + EPS).sqrt();
        x.iter().map(|v| (v - mean) * r).collect()
    }

    pub fn forward(c: f64, state: &[f64], actions: &[Vec<f64>]) -> Vec<f64> {
        let n = actions.len();
        // Tokens: embedded state then actions, plus positions.
        let mut tokens: Vec<Vec<f64>> = Vec::new();
        let es = lin_const(c, state, DH, false);
        tokens.push((0..DH).map(|d| es[d] + pe(0, d)).collect());
        for (j, a) in actions.iter().enumerate() {
            let ea = lin_const(c, a, DH, false);
            tokens.push((0..DH).map(|d| ea[d] + pe(1 + j, d)).collect());
        }
        // Single head attention with causal masking.
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| lin_const(c, t, DH, true)).collect();
        let k = q.clone();
        let v = q.clone();
        let scale = 1.0 / (DH as f64).sqrt();
        let mut ctx = vec![vec![0.0; DH]; n + 1];
        for i in 0..=n {
            let mut scores: Vec<f64> = (0..=i)
                .map(|j| {
                    let dot: f64 = (0..DH).map(|d| q[i][d] * k[j][d]).sum();
                    dot * scale
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                denom += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let p = s / denom;
                for d in 0..DH {
                    ctx[i][d] += p * v[j][d];
                }
            }
        }
        // Output projection, residual, post-norm.
        let mut x1 = Vec::new();
        for i in 0..=n {
            let o = lin_const(c, &ctx[i], DH, true);
            let r: Vec<f64> = (0..DH).map(|d| tokens[i][d] + o[d]).collect();
            x1.push(layer_norm(&r));
        }
        // Feed-forward with leaky relu, residual, post-norm.
        let mut out = Vec::new();
        for i in 0..=n {
            let f1 = lin_const(c, &x1[i], FFN, true);
            let h: Vec<f64> = f1
                .iter()
                .map(|v| if *v > 0.0 { *v } else { SLOPE * v })
                .collect();
            let f2 = lin_const(c, &h, DH, true);
            let r: Vec<f64> = (0..DH).map(|d| x1[i][d] + f2[d]).collect();
            out.push(layer_norm(&r));
        }
        // Bias-free scalar head at action tokens only.
        (1..=n)
            .map(|i| out[i].iter().map(|v| c * v).sum())
            .collect()
    }
}

#[test]
fn transformer_matches_independent_scalar_recomputation() {
    let cfg = CriticConfig {
        backbone: Backbone::Transformer,
        obs_dim: 3,
        act_dim: 2,
        num_layers: 1,
        num_heads: 1,
        dims_per_head: scalar_oracle::DH,
        ffn_hidden: scalar_oracle::FFN,
        n_max: 4,
        pre_norm: false,
    };
    let mut rng = substream(0, Stream::NetsInit);
    let mut critic = build_critic(&cfg, &mut rng);
    let c = 0.03;
    critic.visit_mut(&mut |name, s| {
        if name.ends_with(".gain") {
            s.fill(1.0);
        } else if name.ends_with(".shift") {
            s.fill(0.0);
        } else {
            s.fill(c);
        }
    });
    let state = vec![0.4, -0.2, 0.9];
    let actions =
        Array2::from_shape_vec((2, 2), vec![0.3, -0.5, 0.8, 0.1]).unwrap();
    let got = critic.q_values(&state, &actions.view()).unwrap();
    let expected = scalar_oracle::forward(
        c,
        &state,
        &[vec![0.3, -0.5], vec![0.8, 0.1]],
    );
    assert_eq!(got.len(), 2);
    for (g, e) in got.iter().zip(&expected) {
        assert!(
            (g - e).abs() < 1e-12,
            "forward mismatch: {got:?} vs {expected:?}"
        );
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks
// ---------------------------------------------------------------------------

fn flatten(net: &impl NamedParams) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit(&mut |_, s| out.extend_from_slice(s));
    out
}

fn perturb(net: &mut impl NamedParams, global_idx: usize, delta: f64) {
    let mut seen = 0;
    net.visit_mut(&mut |_, s| {
        if global_idx >= seen && global_idx < seen + s.len() {
            s[global_idx - seen] += delta;
        }
        seen += s.len();
    });
}

/// Central finite differences against analytic gradients; returns the worst
/// relative error.
fn max_fd_error(
    mut eval: impl FnMut(&Critic) -> f64,
    critic: &mut Critic,
    analytic: &[f64],
) -> f64 {
    let mut worst = 0.0f64;
    let n = analytic.len();
    assert!(n <= 10_000, "gradient check is meant for small nets");
    for idx in 0..n {
        let h = 1e-5;
        perturb(critic, idx, h);
        let up = eval(critic);
        perturb(critic, idx, -2.0 * h);
        let down = eval(critic);
        perturb(critic, idx, h);
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[idx].abs()).max(1e-4);
        worst = worst.max((fd - analytic[idx]).abs() / denom);
    }
    worst
}

fn critic_loss(critic: &Critic, windows: &[WindowInput], coeffs: &[Vec<f64>]) -> f64 {
    let (q, _) = critic.forward(windows).unwrap();
    q.iter()
        .zip(coeffs)
        .map(|(qs, cs)| qs.iter().zip(cs).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn critic_gradcheck(backbone: Backbone, pre_norm: bool) -> f64 {
    let mut cfg = tiny_config(backbone);
    cfg.pre_norm = pre_norm;
    if backbone == Backbone::MlpConcat {
        cfg.n_max = 3;
    }
    let mut rng = substream(21, Stream::NetsInit);
    let mut critic = build_critic(&cfg, &mut rng);
    let mut drng = substream(22, Stream::PolicySampling);
    let (s1, a1) = random_window(&mut drng, 3, 2, 3);
    let n2 = if backbone == Backbone::MlpConcat { 3 } else { 2 };
    let (s2, a2) = random_window(&mut drng, 3, 2, n2);
    let windows = [
        WindowInput { state: &s1, actions: a1.view() },
        WindowInput { state: &s2, actions: a2.view() },
    ];
    let coeffs: Vec<Vec<f64>> = windows
        .iter()
        .map(|w| {
            let outs = if backbone == Backbone::MlpConcat { 1 } else { w.actions.nrows() };
            (0..outs).map(|_| drng.random_range(-1.0..1.0)).collect()
        })
        .collect();

    let (_, cache) = critic.forward(&windows).unwrap();
    let mut grads = critic.zeros_like();
    critic.backward(&cache, &coeffs, Some(&mut grads), None);
    let analytic = flatten(&grads);
    max_fd_error(
        |c| critic_loss(c, &windows, &coeffs),
        &mut critic,
        &analytic,
    )
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let err = critic_gradcheck(Backbone::Transformer, false);
    assert!(err < 1e-3, "post-norm relative error {err}");
    let err = critic_gradcheck(Backbone::Transformer, true);
    assert!(err < 1e-3, "pre-norm relative error {err}");
}

#[test]
fn recurrent_gradients_match_finite_differences() {
    let err = critic_gradcheck(Backbone::Gru, false);
    assert!(err < 1e-3, "gru relative error {err}");
    let err = critic_gradcheck(Backbone::Lstm, false);
    assert!(err < 1e-3, "lstm relative error {err}");
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let err = critic_gradcheck(Backbone::MlpConcat, false);
    assert!(err < 1e-3, "mlp relative error {err}");
}

#[test]
fn action_input_gradients_match_finite_differences() {
    let critic = build(Backbone::Transformer, 31);
    let mut drng = substream(32, Stream::PolicySampling);
    let (s, a) = random_window(&mut drng, 3, 2, 3);
    let coeffs = vec![vec![0.7, -0.4, 1.1]];
    let windows = [WindowInput { state: &s, actions: a.view() }];
    let (_, cache) = critic.forward(&windows).unwrap();
    let mut dactions = Vec::new();
    critic.backward(&cache, &coeffs, None, Some(&mut dactions));
    let h = 1e-6;
    for r in 0..3 {
        for c in 0..2 {
            let mut up = a.clone();
            up[[r, c]] += h;
            let mut down = a.clone();
            down[[r, c]] -= h;
            let qu = critic.q_values(&s, &up.view()).unwrap();
            let qd = critic.q_values(&s, &down.view()).unwrap();
            let lu: f64 = qu.iter().zip(&coeffs[0]).map(|(x, y)| x * y).sum();
            let ld: f64 = qd.iter().zip(&coeffs[0]).map(|(x, y)| x * y).sum();
            let fd = (lu - ld) / (2.0 * h);
            let got = dactions[0][[r, c]];
            assert!(
                (fd - got).abs() / fd.abs().max(got.abs()).max(1e-4) < 1e-3,
                "action grad mismatch at ({r},{c}): {fd} vs {got}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

fn tiny_policy(log_std_init: f64, seed: u64) -> GaussianPolicy {
    let mut rng = substream(seed, Stream::NetsInit);
    GaussianPolicy::new(
        PolicyConfig {
            obs_dim: 3,
            act_dim: 2,
            hidden: [8, 8],
            log_std_init,
        },
        &mut rng,
    )
}

#[test]
fn log_std_initializes_to_constant() {
    let policy = tiny_policy(-5.0, 3);
    let mut rng = substream(4, Stream::PolicySampling);
    for _ in 0..5 {
        let state: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = policy.forward(&state).unwrap();
        for d in 0..2 {
            assert_eq!(head.log_std[d], -5.0);
        }
    }
}

#[test]
fn near_deterministic_policy_collapses_to_squashed_mean() {
    let policy = tiny_policy(-18.0, 5);
    let mut rng = substream(6, Stream::PolicySampling);
    let state = vec![0.2, -0.7, 0.4];
    let head = policy.forward(&state).unwrap();
    let det = policy.deterministic_action(&head);
    for _ in 0..10 {
        let (a, _) = policy.sample(&head, &mut rng);
        for d in 0..2 {
            assert!((a[d] - det[d]).abs() < 1e-6);
            assert!(a[d] > -1.0 && a[d] < 1.0);
        }
    }
    for (ad, md) in det.iter().zip(head.mean.iter()) {
        assert_eq!(*ad, md.tanh());
    }
}

#[test]
fn log_prob_matches_cdf_finite_difference() {
    // d/da of the squashed CDF Phi((atanh(a) - mean) / std) is the density;
    // statrs provides the high-accuracy Phi.
    use statrs::distribution::{ContinuousCDF, Normal};
    let mut rng = substream(7, Stream::NetsInit);
    let policy = GaussianPolicy::new(
        PolicyConfig {
            obs_dim: 2,
            act_dim: 1,
            hidden: [8, 8],
            log_std_init: -0.4,
        },
        &mut rng,
    );
    let mut drng = substream(8, Stream::PolicySampling);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    for trial in 0..100 {
        let state: Vec<f64> = (0..2).map(|_| drng.random_range(-1.0..1.0)).collect();
        let head = policy.forward(&state).unwrap();
        let (mu, sigma) = (head.mean[0], head.log_std[0].exp());
        // Points within two standard deviations keep the density healthy.
        let t = drng.random_range(-2.0..2.0);
        let a = (mu + sigma * t).tanh();
        let h = 1e-6;
        let cdf = |x: f64| gauss.cdf((atanh(x) - mu) / sigma);
        let fd_pdf = (cdf(a + h) - cdf(a - h)) / (2.0 * h);
        let pdf = policy.log_prob(&state, &[a]).unwrap().exp();
        let rel = (fd_pdf - pdf).abs() / pdf;
        assert!(rel < 1e-4, "trial {trial}: fd {fd_pdf} vs analytic {pdf}");
    }
    assert_eq!(policy.external_density_evals(), 100);
}

fn atanh(x: f64) -> f64 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

#[test]
fn density_integrates_to_one_in_1d() {
    let mut rng = substream(11, Stream::NetsInit);
    let policy = GaussianPolicy::new(
        PolicyConfig {
            obs_dim: 2,
            act_dim: 1,
            hidden: [8, 8],
            log_std_init: -0.6,
        },
        &mut rng,
    );
    let mut drng = substream(12, Stream::PolicySampling);
    for _ in 0..3 {
        let state: Vec<f64> = (0..2).map(|_| drng.random_range(-1.0..1.0)).collect();
        // Simpson's rule over the open interval.
        let n = 20_000;
        let lo = -1.0 + 1e-9;
        let hi = 1.0 - 1e-9;
        let dx = (hi - lo) / n as f64;
        let f = |a: f64| policy.log_prob(&state, &[a]).unwrap().exp();
        let mut integral = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * dx;
            integral += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        integral *= dx / 3.0;
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }
}

#[test]
fn sampled_log_prob_agrees_with_external_density() {
    let policy = tiny_policy(-0.3, 13);
    let mut rng = substream(14, Stream::PolicySampling);
    for _ in 0..20 {
        let state: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = policy.forward(&state).unwrap();
        let (a, lp) = policy.sample(&head, &mut rng);
        let external = policy.log_prob(&state, &a).unwrap();
        assert!((lp - external).abs() < 1e-6, "{lp} vs {external}");
    }
}

#[test]
fn policy_gradients_match_finite_differences() {
    let mut policy = tiny_policy(-0.5, 15);
    let mut drng = substream(16, Stream::PolicySampling);
    let states = Array2::from_shape_simple_fn((3, 3), || drng.random_range(-1.0..1.0));
    let dmean = Array2::from_shape_simple_fn((3, 2), || drng.random_range(-1.0..1.0));
    let dlog_std = Array2::from_shape_simple_fn((3, 2), || drng.random_range(-1.0..1.0));

    let loss = |p: &GaussianPolicy| {
        let (mean, log_std, _) = p.forward_batch(&states.view()).unwrap();
        (&mean * &dmean).sum() + (&log_std * &dlog_std).sum()
    };
    let (_, _, cache) = policy.forward_batch(&states.view()).unwrap();
    let mut grads = policy.clone();
    zero_params(&mut grads);
    policy.backward_batch(&cache, &dmean.view(), &dlog_std.view(), Some(&mut grads));
    let analytic = flatten(&grads);

    let mut worst = 0.0f64;
    for idx in 0..analytic.len() {
        let h = 1e-5;
        perturb(&mut policy, idx, h);
        let up = loss(&policy);
        perturb(&mut policy, idx, -2.0 * h);
        let down = loss(&policy);
        perturb(&mut policy, idx, h);
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[idx].abs()).max(1e-4);
        worst = worst.max((fd - analytic[idx]).abs() / denom);
    }
    assert!(worst < 1e-3, "policy gradient relative error {worst}");
}

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

#[test]
fn zero_weight_lstm_outputs_zero() {
    let mut critic = build(Backbone::Lstm, 17);
    critic.visit_mut(&mut |_, s| s.fill(0.0));
    let mut rng = substream(18, Stream::PolicySampling);
    let (s, a) = random_window(&mut rng, 3, 2, 3);
    let q = critic.q_values(&s, &a.view()).unwrap();
    assert_eq!(q, vec![0.0, 0.0, 0.0]);
}

#[test]
fn polyak_and_hard_copy() {
    let online = build(Backbone::Transformer, 19);
    let mut target = build(Backbone::Transformer, 20);
    let frozen = target.clone();
    polyak_update(&mut target, &online, 0.0);
    assert_eq!(max_param_diff(&target, &frozen), 0.0, "tau=0 must freeze");
    polyak_update(&mut target, &online, 1.0);
    assert_eq!(max_param_diff(&target, &online), 0.0, "tau=1 is a hard copy");
    let mut target2 = build(Backbone::Transformer, 20);
    hard_copy(&mut target2, &online);
    assert_eq!(max_param_diff(&target2, &online), 0.0);
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let mut critic = build(Backbone::Transformer, 23);
    let target = flatten(&critic);
    let goal: Vec<f64> = target.iter().map(|v| v + 0.05).collect();
    let mut opt = AdamW::new(5e-3, 0.0, param_count(&critic));
    let mut grads = critic.zeros_like();
    for _ in 0..400 {
        // grad of 0.5 ||theta - goal||^2
        let current = flatten(&critic);
        let mut idx = 0;
        grads.visit_mut(&mut |_, s| {
            for v in s.iter_mut() {
                *v = current[idx] - goal[idx];
                idx += 1;
            }
        });
        opt.step(&mut critic, &grads);
    }
    let end = flatten(&critic);
    let err: f64 = end
        .iter()
        .zip(&goal)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "AdamW failed to fit: {err}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let critic = build(Backbone::Transformer, 25);
    let policy = tiny_policy(-1.0, 26);
    let mut bytes = Vec::new();
    save_checkpoint(
        &mut bytes,
        &[("critic", &critic as &dyn NamedParams), ("policy", &policy)],
    )
    .unwrap();
    let mut critic2 = build(Backbone::Transformer, 27);
    let mut policy2 = tiny_policy(-2.0, 28);
    load_checkpoint(
        &bytes[..],
        &mut [
            ("critic", &mut critic2 as &mut dyn NamedParams),
            ("policy", &mut policy2),
        ],
    )
    .unwrap();
    assert_eq!(max_param_diff(&critic2, &critic), 0.0);
    assert_eq!(max_param_diff(&policy2, &policy), 0.0);
    // Wrong module prefix is a hard error.
    let mut other = build(Backbone::Transformer, 29);
    let res = load_checkpoint(&bytes[..], &mut [("critic2", &mut other as &mut dyn NamedParams)]);
    assert!(matches!(res, Err(CheckpointError::MissingParam(_))));
}

#[test]
fn named_params_have_stable_unique_names() {
    for backbone in [Backbone::Transformer, Backbone::Gru, Backbone::Lstm, Backbone::MlpConcat] {
        let critic = build(backbone, 30);
        let mut names = Vec::new();
        critic.visit(&mut |n, _| names.push(n.to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "{backbone:?} has duplicate names");
        assert!(param_count(&critic) > 0);
    }
}
