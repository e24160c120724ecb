//! Closed-form variance and window-statistics results, with oracles.
//!
//! Three families of results justify training the critic on averaged
//! multi-horizon targets sampled from short windows:
//!
//! 1. target-side variance under an equicorrelation model — how much the
//!    triangular average of n-step returns shrinks reward and bootstrap
//!    variance ([`reward_ratio`], [`bootstrap_ratio`], [`kappa_star`]);
//! 2. gradient-side variance — averaging per-horizon gradients of a
//!    shared-weights critic ([`averaged_grad_variance`],
//!    [`effective_sample_size`], [`uniform_weights_check`]);
//! 3. window sampling statistics over a stored segment — expected bootstrap
//!    reuse, state coverage, and the sparse-reward amplification factor
//!    ([`expected_reuse`], [`coverage_probability`], [`sparse_amplification`]).
//!
//! Every closed form here is paired with an independent oracle: exhaustive
//! enumeration where the outcome space is finite ([`enumerate_windows`]),
//! Monte Carlo where it is not ([`oracle`]). Enumeration is authoritative;
//! Monte-Carlo agreement is judged in standard errors.
//!
//! Conventions: segments are indexed by states `1..=N`; a sampled window
//! draws a start `p` uniformly from `{1..N}` and a length `l` uniformly from
//! `{l_min..l_max}`, and is truncated at the segment end, `q = min(p+l-1, N)`.
//! A window contributes one TD update per interior state `i in p..q`, each
//! bootstrapping at state `q`.

use rand::Rng;
use thiserror::Error;

/// Errors from model validation and oracle execution.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("kappa_star is undefined for N=1 (C^2 equals S1)")]
    KappaStarUndefined,
    #[error("Monte-Carlo oracle needs at least 1000 trials, got {0}")]
    TooFewTrials(usize),
    #[error("unknown formula id `{0}`")]
    UnknownFormula(String),
    #[error("index j={j} outside segment 1..={n}")]
    IndexOutOfRange { j: usize, n: usize },
}

/// Parameters of the equicorrelated reward/bootstrap model.
///
/// Rewards have variance `sigma2` and common pairwise correlation `rho`;
/// bootstrap values have variance `tau2` and common pairwise correlation
/// `kappa`. `n` is the horizon and `gamma` the discount.
#[derive(Debug, Clone, Copy)]
pub struct VarianceModel {
    pub n: usize,
    pub gamma: f64,
    pub rho: f64,
    pub kappa: f64,
    pub sigma2: f64,
    pub tau2: f64,
}

impl VarianceModel {
    pub fn new(
        n: usize,
        gamma: f64,
        rho: f64,
        kappa: f64,
        sigma2: f64,
        tau2: f64,
    ) -> Result<Self, AnalysisError> {
        if n == 0 {
            return Err(AnalysisError::InvalidModel("N must be >= 1".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(AnalysisError::InvalidModel(format!(
                "gamma must be in (0, 1], got {gamma}"
            )));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(AnalysisError::InvalidModel(format!(
                "rho must be in [0, 1), got {rho}"
            )));
        }
        if !(0.0..=1.0).contains(&kappa) {
            return Err(AnalysisError::InvalidModel(format!(
                "kappa must be in [0, 1], got {kappa}"
            )));
        }
        if sigma2 < 0.0 || tau2 < 0.0 {
            return Err(AnalysisError::InvalidModel(
                "variances must be nonnegative".into(),
            ));
        }
        Ok(Self {
            n,
            gamma,
            rho,
            kappa,
            sigma2,
            tau2,
        })
    }
}

/// Window-sampling setup over a segment of `n` states.
#[derive(Debug, Clone, Copy)]
pub struct WindowModel {
    /// Segment length in states.
    pub n: usize,
    pub l_min: usize,
    pub l_max: usize,
}

impl WindowModel {
    pub fn new(n: usize, l_min: usize, l_max: usize) -> Result<Self, AnalysisError> {
        if n == 0 || l_min == 0 || l_min > l_max || l_max > n {
            return Err(AnalysisError::InvalidModel(format!(
                "need 1 <= l_min <= l_max <= N, got l_min={l_min}, l_max={l_max}, N={n}"
            )));
        }
        Ok(Self { n, l_min, l_max })
    }

    /// Number of admissible window lengths.
    pub fn delta(&self) -> usize {
        self.l_max - self.l_min + 1
    }

    /// Mean window length `E[L]` under the uniform draw.
    pub fn mean_length(&self) -> f64 {
        (self.l_min + self.l_max) as f64 / 2.0
    }
}

/// The four geometric sums used throughout: `S0 = sum gamma^{2k}` and
/// `T0 = sum gamma^k` over `k = 0..N-1`, `S1 = sum gamma^{2i}` and
/// `C = sum gamma^i` over `i = 1..N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricSums {
    pub s0: f64,
    pub t0: f64,
    pub s1: f64,
    pub c: f64,
}

/// Evaluates the geometric sums in closed form, with the `gamma = 1` limits
/// (all equal to `N`) handled analytically rather than by perturbation.
pub fn geometric_sums(n: usize, gamma: f64) -> GeometricSums {
    let nf = n as f64;
    if gamma == 1.0 {
        return GeometricSums {
            s0: nf,
            t0: nf,
            s1: nf,
            c: nf,
        };
    }
    let g2 = gamma * gamma;
    let s0 = (1.0 - g2.powi(n as i32)) / (1.0 - g2);
    let t0 = (1.0 - gamma.powi(n as i32)) / (1.0 - gamma);
    GeometricSums {
        s0,
        t0,
        s1: g2 * s0,
        c: gamma * t0,
    }
}

/// Triangular weights `w_k = ((N-k)/N) gamma^k` for `k = 0..N-1`, together
/// with `A = sum w_k^2` and `B = (sum w_k)^2 - A`.
pub fn triangular_weights(n: usize, gamma: f64) -> (Vec<f64>, f64, f64) {
    let nf = n as f64;
    let mut w = Vec::with_capacity(n);
    let mut pow = 1.0;
    for k in 0..n {
        w.push(((n - k) as f64 / nf) * pow);
        pow *= gamma;
    }
    let a: f64 = w.iter().map(|x| x * x).sum();
    let sum: f64 = w.iter().sum();
    let b = sum * sum - a;
    (w, a, b)
}

/// Reward-side variance ratio of the single N-step reward sum over its
/// triangular average: `R = (S0 + rho (T0^2 - S0)) / (A + rho B)`.
///
/// Lies in `[1, 4)` for every valid model; tends to 4 as `N` grows at
/// `gamma = 1` and back to 1 for any fixed `gamma < 1`.
pub fn reward_ratio(model: &VarianceModel) -> f64 {
    let g = geometric_sums(model.n, model.gamma);
    let (_, a, b) = triangular_weights(model.n, model.gamma);
    (g.s0 + model.rho * (g.t0 * g.t0 - g.s0)) / (a + model.rho * b)
}

/// Bootstrap-side variance ratio
/// `R_B = N^2 gamma^{2N} / (S1 + kappa (C^2 - S1))`.
///
/// Decreasing in `kappa`; averaging reduces bootstrap variance (`R_B >= 1`)
/// exactly when `kappa <= kappa_star`.
pub fn bootstrap_ratio(model: &VarianceModel) -> f64 {
    let g = geometric_sums(model.n, model.gamma);
    let nf = model.n as f64;
    let num = nf * nf * model.gamma.powi(2 * model.n as i32);
    num / (g.s1 + model.kappa * (g.c * g.c - g.s1))
}

/// Correlation threshold `kappa_star = (N^2 gamma^{2N} - S1) / (C^2 - S1)`
/// below which averaging reduces bootstrap variance.
///
/// Undefined at `N = 1`, where `C^2 = S1` and the average is the single term.
pub fn kappa_star(n: usize, gamma: f64) -> Result<f64, AnalysisError> {
    if n == 1 {
        return Err(AnalysisError::KappaStarUndefined);
    }
    let g = geometric_sums(n, gamma);
    let nf = n as f64;
    Ok((nf * nf * gamma.powi(2 * n as i32) - g.s1) / (g.c * g.c - g.s1))
}

/// Effective sample size of `n` equicorrelated gradient contributions:
/// `n_eff = n / (1 + (n-1) rho_w)`.
pub fn effective_sample_size(n: usize, rho_w: f64) -> f64 {
    let nf = n as f64;
    nf / (1.0 + (nf - 1.0) * rho_w)
}

/// Variance of the uniform average of `n` equicorrelated gradients:
/// `Var = sigma2_w (1 + (n-1) rho_w) / n`, with floor `rho_w sigma2_w`.
pub fn averaged_grad_variance(n: usize, rho_w: f64, sigma2_w: f64) -> f64 {
    sigma2_w / effective_sample_size(n, rho_w)
}

/// Result of the uniform-weights optimality check.
#[derive(Debug, Clone)]
pub struct UniformWeightsReport {
    /// Variance of the uniform average.
    pub uniform_variance: f64,
    /// Smallest variance found over the random unbiased weight vectors.
    pub best_random_variance: f64,
    /// Number of random vectors that (strictly) beat the uniform weights.
    pub violations: usize,
    pub trials: usize,
}

/// Variance of `sum alpha_i g_i` under the exchangeable covariance
/// `sigma2 [(1-rho) I + rho 1 1^T]`, for weights summing to one.
pub fn weighted_variance(alpha: &[f64], rho_w: f64, sigma2_w: f64) -> f64 {
    let sq: f64 = alpha.iter().map(|a| a * a).sum();
    let sum: f64 = alpha.iter().sum();
    sigma2_w * ((1.0 - rho_w) * sq + rho_w * sum * sum)
}

/// Checks that no random unbiased weight vector achieves lower variance than
/// the uniform weights under the exchangeable covariance.
pub fn uniform_weights_check(
    n: usize,
    rho_w: f64,
    sigma2_w: f64,
    trials: usize,
    rng: &mut impl Rng,
) -> UniformWeightsReport {
    let uniform = vec![1.0 / n as f64; n];
    let uniform_variance = weighted_variance(&uniform, rho_w, sigma2_w);
    let mut best = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..trials {
        // Random real weights re-centered to sum to one.
        let mut alpha: Vec<f64> = (0..n)
            .map(|_| rng.random::<f64>() * 2.0 - 0.5)
            .collect();
        let excess = (1.0 - alpha.iter().sum::<f64>()) / n as f64;
        for a in &mut alpha {
            *a += excess;
        }
        let v = weighted_variance(&alpha, rho_w, sigma2_w);
        if v < best {
            best = v;
        }
        if v < uniform_variance {
            violations += 1;
        }
    }
    UniformWeightsReport {
        uniform_variance,
        best_random_variance: best,
        violations,
        trials,
    }
}

/// Expected number of TD updates bootstrapping at state `j` per sampled
/// window.
///
/// Interior states follow a ramp that plateaus at
/// `(l_min + l_max - 2) / (2N)` once `j >= l_max`; the last state `j = N`
/// collects extra reuse from truncated windows ([`reuse_last`]).
pub fn expected_reuse(j: usize, wm: &WindowModel) -> Result<f64, AnalysisError> {
    if j == 0 || j > wm.n {
        return Err(AnalysisError::IndexOutOfRange { j, n: wm.n });
    }
    if j == wm.n {
        return Ok(reuse_last(wm));
    }
    let nf = wm.n as f64;
    let delta = wm.delta() as f64;
    let (lo, hi) = (wm.l_min, wm.l_max);
    Ok(if j < lo {
        0.0
    } else if j < hi {
        ((j - lo + 1) as f64 * (j + lo - 2) as f64) / (2.0 * nf * delta)
    } else {
        (lo + hi - 2) as f64 / (2.0 * nf)
    })
}

/// Expected reuse at the segment end `j = N`, where truncation concentrates
/// bootstraps:
/// `(1/N) sum_{h=1}^{l_min} (h-1)
///  + (1/(N Delta)) sum_{h=l_min+1}^{l_max} (h-1)(l_max - h + 1)`.
///
/// For `l_min = 1` this collapses to `(l_max^2 - 1) / (6N)`.
pub fn reuse_last(wm: &WindowModel) -> f64 {
    let nf = wm.n as f64;
    let delta = wm.delta() as f64;
    let first: usize = (1..=wm.l_min).map(|h| h - 1).sum();
    let second: usize = (wm.l_min + 1..=wm.l_max)
        .map(|h| (h - 1) * (wm.l_max - h + 1))
        .sum();
    first as f64 / nf + second as f64 / (nf * delta)
}

/// Probability that state `j` falls inside the sampled window `[p, q]`:
/// `(1/(N Delta)) sum_{p=1}^{j} [l_max - max(l_min, j-p+1) + 1]_+`.
pub fn coverage_probability(j: usize, wm: &WindowModel) -> Result<f64, AnalysisError> {
    if j == 0 || j > wm.n {
        return Err(AnalysisError::IndexOutOfRange { j, n: wm.n });
    }
    let mut count = 0usize;
    for p in 1..=j {
        let need = (j - p + 1).max(wm.l_min);
        if wm.l_max >= need {
            count += wm.l_max - need + 1;
        }
    }
    Ok(count as f64 / (wm.n as f64 * wm.delta() as f64))
}

/// Ramp/plateau closed form of the coverage probability for `l_min = 1`:
/// a ramp `(1/N)(j - j(j-1)/(2m))` for `j <= m = l_max`, then the plateau
/// `(m+1)/(2N)`.
pub fn coverage_probability_lmin1(j: usize, m: usize, n: usize) -> f64 {
    let (jf, mf, nf) = (j as f64, m as f64, n as f64);
    if j <= m {
        (jf - jf * (jf - 1.0) / (2.0 * mf)) / nf
    } else {
        (mf + 1.0) / (2.0 * nf)
    }
}

/// Sparse-reward accounting for a window sampler.
#[derive(Debug, Clone, Copy)]
pub struct SparseAmplification {
    /// Expected number of updates per window whose target contains the
    /// terminal reward (equals the reuse at `j = N`).
    pub expected_count: f64,
    /// That count divided by the `1/N` rate of uniform 1-step TD.
    pub amplification: f64,
}

/// Expected count of terminal-reward-bearing updates per window and its
/// amplification over uniform 1-step TD. Grows roughly like `l_max^2 / 6`
/// when `l_min = 1`.
pub fn sparse_amplification(wm: &WindowModel) -> SparseAmplification {
    let expected_count = reuse_last(wm);
    SparseAmplification {
        expected_count,
        amplification: expected_count * wm.n as f64,
    }
}

/// Exact mean over `j` of the expected reuse:
/// `(E[L] - 1)/N - E[L(L-1)] / (2 N^2)`.
///
/// The first term is the plateau-level rate at which reuse scales with the
/// mean window length; the second is the loss to truncation at the segment
/// end and vanishes as `N` grows. [`enumerate_windows`] reproduces this
/// value exactly.
pub fn mean_reuse(wm: &WindowModel) -> f64 {
    let nf = wm.n as f64;
    let el = wm.mean_length();
    let el2: f64 = (wm.l_min..=wm.l_max)
        .map(|l| (l * (l - 1)) as f64)
        .sum::<f64>()
        / wm.delta() as f64;
    (el - 1.0) / nf - el2 / (2.0 * nf * nf)
}

/// Truncation-free plateau rate `(E[L] - 1) / N` that [`mean_reuse`]
/// approaches as the segment grows.
pub fn mean_reuse_asymptote(wm: &WindowModel) -> f64 {
    (wm.mean_length() - 1.0) / wm.n as f64
}

/// Exact per-state window statistics from exhaustive enumeration of all
/// `(p, l)` draws. Authoritative oracle for the closed forms above.
#[derive(Debug, Clone)]
pub struct WindowEnumeration {
    /// `reuse[j-1]` = expected updates bootstrapping at state `j`.
    pub reuse: Vec<f64>,
    /// `coverage[j-1]` = probability that state `j` lies in the window.
    pub coverage: Vec<f64>,
    /// Expected updates per window whose target includes the terminal reward.
    pub terminal_reward_count: f64,
    /// Mean over `j` of the expected reuse.
    pub mean_reuse: f64,
}

/// Enumerates every `(start, length)` pair of the window sampler.
pub fn enumerate_windows(wm: &WindowModel) -> WindowEnumeration {
    let n = wm.n;
    let mut reuse = vec![0.0; n];
    let mut coverage = vec![0.0; n];
    let mut terminal = 0.0;
    for p in 1..=n {
        for l in wm.l_min..=wm.l_max {
            let q = (p + l - 1).min(n);
            let updates = (q - p) as f64;
            reuse[q - 1] += updates;
            for j in p..=q {
                coverage[j - 1] += 1.0;
            }
            if q == n {
                terminal += updates;
            }
        }
    }
    let total = (n * wm.delta()) as f64;
    for v in reuse.iter_mut().chain(coverage.iter_mut()) {
        *v /= total;
    }
    let mean_reuse = reuse.iter().sum::<f64>() / n as f64;
    WindowEnumeration {
        reuse,
        coverage,
        terminal_reward_count: terminal / total,
        mean_reuse,
    }
}

/// A quantity the oracle can estimate, with the parameters it needs.
#[derive(Debug, Clone, Copy)]
pub enum OracleTask<'a> {
    /// Reward-side variance ratio [`reward_ratio`].
    RewardRatio(&'a VarianceModel),
    /// Bootstrap-side variance ratio [`bootstrap_ratio`].
    BootstrapRatio(&'a VarianceModel),
    /// Variance of the averaged gradient [`averaged_grad_variance`].
    AveragedGradVariance { n: usize, rho_w: f64, sigma2_w: f64 },
    /// Expected reuse at state `j` (enumeration; stderr 0).
    ExpectedReuse { wm: &'a WindowModel, j: usize },
    /// Coverage probability of state `j` (enumeration; stderr 0).
    Coverage { wm: &'a WindowModel, j: usize },
    /// Expected terminal-reward-bearing updates (enumeration; stderr 0).
    SparseCount(&'a WindowModel),
}

impl<'a> OracleTask<'a> {
    /// Value of the corresponding closed form.
    pub fn closed_form(&self) -> Result<f64, AnalysisError> {
        Ok(match *self {
            OracleTask::RewardRatio(m) => reward_ratio(m),
            OracleTask::BootstrapRatio(m) => bootstrap_ratio(m),
            OracleTask::AveragedGradVariance { n, rho_w, sigma2_w } => {
                averaged_grad_variance(n, rho_w, sigma2_w)
            }
            OracleTask::ExpectedReuse { wm, j } => expected_reuse(j, wm)?,
            OracleTask::Coverage { wm, j } => coverage_probability(j, wm)?,
            OracleTask::SparseCount(wm) => sparse_amplification(wm).expected_count,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            OracleTask::RewardRatio(_) => "reward_ratio",
            OracleTask::BootstrapRatio(_) => "bootstrap_ratio",
            OracleTask::AveragedGradVariance { .. } => "averaged_grad_variance",
            OracleTask::ExpectedReuse { .. } => "expected_reuse",
            OracleTask::Coverage { .. } => "coverage",
            OracleTask::SparseCount(_) => "sparse_count",
        }
    }
}

/// Point estimate with standard error from an oracle run.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Number of batches used for batch-means standard errors.
const MC_BATCHES: usize = 50;

/// Runs the independent oracle for `task`.
///
/// Continuous models are simulated with the shared-factor construction
/// `X_k = sqrt(rho) Z + sqrt(1-rho) E_k` and judged by batch means over
/// [`MC_BATCHES`] batches; finite window statistics are enumerated exactly
/// and come back with `stderr = 0`.
pub fn oracle(
    task: OracleTask,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<McEstimate, AnalysisError> {
    match task {
        OracleTask::ExpectedReuse { wm, j } => {
            if j == 0 || j > wm.n {
                return Err(AnalysisError::IndexOutOfRange { j, n: wm.n });
            }
            let e = enumerate_windows(wm);
            Ok(McEstimate {
                estimate: e.reuse[j - 1],
                stderr: 0.0,
            })
        }
        OracleTask::Coverage { wm, j } => {
            if j == 0 || j > wm.n {
                return Err(AnalysisError::IndexOutOfRange { j, n: wm.n });
            }
            let e = enumerate_windows(wm);
            Ok(McEstimate {
                estimate: e.coverage[j - 1],
                stderr: 0.0,
            })
        }
        OracleTask::SparseCount(wm) => {
            let e = enumerate_windows(wm);
            Ok(McEstimate {
                estimate: e.terminal_reward_count,
                stderr: 0.0,
            })
        }
        OracleTask::RewardRatio(m) => {
            check_trials(trials)?;
            let weights_single: Vec<f64> = (0..m.n).map(|k| m.gamma.powi(k as i32)).collect();
            let (weights_avg, _, _) = triangular_weights(m.n, m.gamma);
            mc_variance_ratio(
                m.n,
                m.rho,
                m.sigma2.sqrt(),
                &weights_single,
                &weights_avg,
                trials,
                rng,
            )
        }
        OracleTask::BootstrapRatio(m) => {
            check_trials(trials)?;
            // Single term gamma^N Z_N vs average (1/N) sum gamma^i Z_i,
            // expressed as weight vectors over Z_1..Z_N.
            let mut weights_single = vec![0.0; m.n];
            weights_single[m.n - 1] = m.gamma.powi(m.n as i32);
            let weights_avg: Vec<f64> = (1..=m.n)
                .map(|i| m.gamma.powi(i as i32) / m.n as f64)
                .collect();
            mc_variance_ratio(
                m.n,
                m.kappa,
                m.tau2.sqrt(),
                &weights_single,
                &weights_avg,
                trials,
                rng,
            )
        }
        OracleTask::AveragedGradVariance { n, rho_w, sigma2_w } => {
            check_trials(trials)?;
            let weights = vec![1.0 / n as f64; n];
            let batches = batch_variances(n, rho_w, sigma2_w.sqrt(), &weights, trials, rng);
            Ok(batch_means(&batches))
        }
    }
}

fn check_trials(trials: usize) -> Result<(), AnalysisError> {
    if trials < 1000 {
        return Err(AnalysisError::TooFewTrials(trials));
    }
    Ok(())
}

/// Draws one equicorrelated vector into `buf`: common factor plus
/// independent noise, unit variance, pairwise correlation `corr`.
fn draw_equicorrelated(buf: &mut [f64], corr: f64, rng: &mut impl Rng) {
    let shared = standard_normal(rng) * corr.sqrt();
    let indep = (1.0 - corr).sqrt();
    for x in buf.iter_mut() {
        *x = shared + indep * standard_normal(rng);
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per draw keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-batch sample variances of `sum w_k X_k` for equicorrelated `X`.
fn batch_variances(
    n: usize,
    corr: f64,
    scale: f64,
    weights: &[f64],
    trials: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let per_batch = (trials / MC_BATCHES).max(2);
    let mut x = vec![0.0; n];
    let mut out = Vec::with_capacity(MC_BATCHES);
    for _ in 0..MC_BATCHES {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..per_batch {
            draw_equicorrelated(&mut x, corr, rng);
            let s: f64 = weights.iter().zip(&x).map(|(w, v)| w * v * scale).sum();
            sum += s;
            sumsq += s * s;
        }
        let m = per_batch as f64;
        out.push((sumsq - sum * sum / m) / (m - 1.0));
    }
    out
}

/// Batch-means estimate of a variance ratio: the same draws feed both
/// weightings, and per-batch ratios give the point estimate and stderr.
fn mc_variance_ratio(
    n: usize,
    corr: f64,
    scale: f64,
    weights_num: &[f64],
    weights_den: &[f64],
    trials: usize,
    rng: &mut impl Rng,
) -> Result<McEstimate, AnalysisError> {
    let per_batch = (trials / MC_BATCHES).max(2);
    let mut x = vec![0.0; n];
    let mut ratios = Vec::with_capacity(MC_BATCHES);
    for _ in 0..MC_BATCHES {
        let (mut sn, mut snq, mut sd, mut sdq) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..per_batch {
            draw_equicorrelated(&mut x, corr, rng);
            let a: f64 = weights_num.iter().zip(&x).map(|(w, v)| w * v * scale).sum();
            let b: f64 = weights_den.iter().zip(&x).map(|(w, v)| w * v * scale).sum();
            sn += a;
            snq += a * a;
            sd += b;
            sdq += b * b;
        }
        let m = per_batch as f64;
        let var_num = (snq - sn * sn / m) / (m - 1.0);
        let var_den = (sdq - sd * sd / m) / (m - 1.0);
        ratios.push(var_num / var_den);
    }
    Ok(batch_means(&ratios))
}

fn batch_means(batches: &[f64]) -> McEstimate {
    let b = batches.len() as f64;
    let mean = batches.iter().sum::<f64>() / b;
    let var = batches.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1.0);
    McEstimate {
        estimate: mean,
        stderr: (var / b).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn model(n: usize, gamma: f64, rho: f64, kappa: f64) -> VarianceModel {
        VarianceModel::new(n, gamma, rho, kappa, 1.0, 1.0).unwrap()
    }

    /// Direct-summation oracle for the geometric sums.
    fn geometric_sums_direct(n: usize, gamma: f64) -> GeometricSums {
        let s0 = (0..n).map(|k| gamma.powi(2 * k as i32)).sum();
        let t0 = (0..n).map(|k| gamma.powi(k as i32)).sum();
        let s1 = (1..=n).map(|i| gamma.powi(2 * i as i32)).sum();
        let c = (1..=n).map(|i| gamma.powi(i as i32)).sum();
        GeometricSums { s0, t0, s1, c }
    }

    fn assert_rel(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol * b.abs().max(1.0),
            "mismatch: {a} vs {b}"
        );
    }

    #[test]
    fn geometric_sums_match_direct_summation() {
        for &n in &[1usize, 2, 3, 7, 50, 200] {
            for &g in &[0.3, 0.5, 0.9, 0.99, 1.0] {
                let fast = geometric_sums(n, g);
                let slow = geometric_sums_direct(n, g);
                assert_rel(fast.s0, slow.s0, 1e-12);
                assert_rel(fast.t0, slow.t0, 1e-12);
                assert_rel(fast.s1, slow.s1, 1e-12);
                assert_rel(fast.c, slow.c, 1e-12);
            }
        }
    }

    #[test]
    fn geometric_sums_known_values() {
        let g = geometric_sums(3, 1.0);
        assert_eq!((g.s0, g.t0, g.s1, g.c), (3.0, 3.0, 3.0, 3.0));
        let g = geometric_sums(1, 0.7);
        assert_eq!(g.s0, 1.0);
        assert_eq!(g.t0, 1.0);
        assert_rel(g.s1, 0.49, 1e-15);
        assert_rel(g.c, 0.7, 1e-15);
        let g = geometric_sums(2, 0.5);
        assert_eq!((g.s0, g.t0, g.s1, g.c), (1.25, 1.5, 0.3125, 0.75));
    }

    #[test]
    fn triangular_weights_known_values() {
        let (w, a, b) = triangular_weights(1, 0.9);
        assert_eq!(w, vec![1.0]);
        assert_eq!((a, b), (1.0, 0.0));
        let (w, a, b) = triangular_weights(2, 1.0);
        assert_eq!(w, vec![1.0, 0.5]);
        assert_eq!(a, 1.25);
        assert_eq!(b, 1.0);
    }

    #[test]
    fn triangular_b_nonnegative() {
        let mut rng = substream(11, Stream::NetsInit);
        for _ in 0..1000 {
            let n = rng.random_range(1..=200);
            let gamma = rng.random::<f64>().clamp(1e-3, 1.0);
            let (_, _, b) = triangular_weights(n, gamma);
            assert!(b >= -1e-12, "B_gamma negative at N={n}, gamma={gamma}");
        }
    }

    #[test]
    fn reward_ratio_known_values() {
        assert_eq!(reward_ratio(&model(1, 0.9, 0.3, 0.0)), 1.0);
        assert_rel(reward_ratio(&model(2, 1.0, 0.0, 0.0)), 1.6, 1e-12);
        let r = reward_ratio(&model(10_000, 1.0, 0.5, 0.0));
        assert!((3.9..4.0).contains(&r), "R = {r}");
    }

    #[test]
    fn reward_ratio_tends_to_one_for_fixed_gamma() {
        // O(1/N) convergence with constant ~ 2 gamma / (1 - gamma): first
        // within 1% around N = 900 for gamma = 0.9, rho = 0.
        let mut prev = f64::INFINITY;
        for n in [10, 50, 100, 200, 400, 900] {
            let r = reward_ratio(&model(n, 0.9, 0.0, 0.0));
            assert!(r < prev, "not decreasing at N={n}");
            prev = r;
        }
        let r = reward_ratio(&model(900, 0.9, 0.0, 0.0));
        assert!((r - 1.0).abs() < 0.01, "R(900) = {r}");
        let r = reward_ratio(&model(2000, 0.9, 0.3, 0.0));
        assert!((r - 1.0).abs() < 0.01, "R(2000) = {r}");
    }

    #[test]
    fn bootstrap_ratio_known_values() {
        // kappa = 0 collapses to N^2 gamma^{2N} / S1.
        let m = model(3, 0.9, 0.0, 0.0);
        let g = geometric_sums(3, 0.9);
        assert_rel(bootstrap_ratio(&m), 9.0 * 0.9f64.powi(6) / g.s1, 1e-12);
        // N=2, gamma=1: R_B(0) = 2, R_B(1) = 1, kappa_star = 1.
        assert_rel(bootstrap_ratio(&model(2, 1.0, 0.0, 0.0)), 2.0, 1e-12);
        assert_rel(bootstrap_ratio(&model(2, 1.0, 0.0, 1.0)), 1.0, 1e-12);
        assert_rel(kappa_star(2, 1.0).unwrap(), 1.0, 1e-12);
        assert!(matches!(
            kappa_star(1, 0.9),
            Err(AnalysisError::KappaStarUndefined)
        ));
        // N=1 average is the single term regardless of kappa.
        assert_rel(bootstrap_ratio(&model(1, 0.77, 0.0, 0.4)), 1.0, 1e-12);
    }

    #[test]
    fn bootstrap_ratio_monotone_and_bracketed() {
        for &n in &[2usize, 3, 5, 8] {
            for &g in &[0.5, 0.9, 0.99, 1.0] {
                let sums = geometric_sums(n, g);
                let hi = (n * n) as f64 * g.powi(2 * n as i32) / sums.s1;
                let lo = (n * n) as f64 * g.powi(2 * n as i32) / (sums.c * sums.c);
                let mut prev = f64::INFINITY;
                for k in 0..=10 {
                    let kappa = k as f64 / 10.0;
                    let r = bootstrap_ratio(&model(n, g, 0.0, kappa));
                    assert!(r <= prev + 1e-12, "not decreasing at kappa={kappa}");
                    assert!(r >= lo - 1e-12 && r <= hi + 1e-12);
                    prev = r;
                }
            }
        }
    }

    #[test]
    fn effective_sample_size_known_values() {
        assert_eq!(effective_sample_size(7, 0.0), 7.0);
        assert_rel(effective_sample_size(4, 0.5), 1.6, 1e-12);
        assert_rel(averaged_grad_variance(4, 0.5, 1.0), 0.625, 1e-12);
        assert_eq!(averaged_grad_variance(1, 0.9, 2.5), 2.5);
        // Correlation-imposed floor.
        assert_rel(averaged_grad_variance(10_000, 0.3, 1.0), 0.3, 0.01);
    }

    #[test]
    fn averaged_grad_variance_monotone_in_n() {
        let mut prev = f64::INFINITY;
        for n in 1..=64 {
            let v = averaged_grad_variance(n, 0.4, 1.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn uniform_weights_are_optimal() {
        // Hand check: n=2, rho=0, alpha=(0.7, 0.3) gives 0.58 sigma^2.
        assert_rel(weighted_variance(&[0.7, 0.3], 0.0, 1.0), 0.58, 1e-12);
        let mut rng = substream(3, Stream::NetsInit);
        for &(n, rho) in &[(2usize, 0.0), (3, 0.9), (4, 0.5), (8, 0.3)] {
            let rep = uniform_weights_check(n, rho, 1.0, 1000, &mut rng);
            assert_eq!(rep.violations, 0, "n={n}, rho={rho}: {rep:?}");
            assert!(rep.best_random_variance >= rep.uniform_variance);
        }
        // The optimum attains itself.
        let u = vec![0.25; 4];
        assert_rel(
            weighted_variance(&u, 0.3, 1.0),
            averaged_grad_variance(4, 0.3, 1.0),
            1e-12,
        );
    }

    #[test]
    fn reuse_and_coverage_match_enumeration() {
        for &(n, lo, hi) in &[
            (4usize, 1usize, 3usize),
            (4, 2, 2),
            (5, 1, 5),
            (8, 2, 5),
            (8, 3, 3),
            (10, 1, 8),
            (3, 1, 1),
        ] {
            let wm = WindowModel::new(n, lo, hi).unwrap();
            let e = enumerate_windows(&wm);
            for j in 1..=n {
                assert_rel(expected_reuse(j, &wm).unwrap(), e.reuse[j - 1], 1e-12);
                assert_rel(
                    coverage_probability(j, &wm).unwrap(),
                    e.coverage[j - 1],
                    1e-12,
                );
                if lo == 1 {
                    assert_rel(
                        coverage_probability_lmin1(j, hi, n),
                        e.coverage[j - 1],
                        1e-12,
                    );
                }
            }
            assert_rel(
                sparse_amplification(&wm).expected_count,
                e.terminal_reward_count,
                1e-12,
            );
            assert_rel(mean_reuse(&wm), e.mean_reuse, 1e-12);
        }
    }

    #[test]
    fn reuse_known_values() {
        // Plateau and truncated-end values for N=4, l in {1..3}.
        let wm = WindowModel::new(4, 1, 3).unwrap();
        assert_eq!(expected_reuse(3, &wm).unwrap(), 0.25);
        assert_rel(reuse_last(&wm), 1.0 / 3.0, 1e-12);
        assert_rel(reuse_last(&wm), (9.0 - 1.0) / 24.0, 1e-12);
        // j below l_min never hosts a bootstrap.
        let wm2 = WindowModel::new(6, 3, 5).unwrap();
        assert_eq!(expected_reuse(2, &wm2).unwrap(), 0.0);
        // Amplification example: (1/3) / (1/4) = 4/3.
        assert_rel(sparse_amplification(&wm).amplification, 4.0 / 3.0, 1e-12);
        // Degenerate l_max = 1: no interior updates at all.
        let wm3 = WindowModel::new(4, 1, 1).unwrap();
        assert_eq!(reuse_last(&wm3), 0.0);
        assert_eq!(enumerate_windows(&wm3).terminal_reward_count, 0.0);
    }

    #[test]
    fn coverage_known_values() {
        let wm = WindowModel::new(4, 1, 3).unwrap();
        assert_eq!(coverage_probability(4, &wm).unwrap(), 0.5);
        // j = 1 ramp value is 1/N.
        assert_rel(coverage_probability(1, &wm).unwrap(), 0.25, 1e-12);
        // Full-window degenerate case: covered iff p <= j.
        let wm = WindowModel::new(6, 6, 6).unwrap();
        let e = enumerate_windows(&wm);
        for j in 1..=6 {
            assert_rel(e.coverage[j - 1], j as f64 / 6.0, 1e-12);
            assert_rel(coverage_probability(j, &wm).unwrap(), j as f64 / 6.0, 1e-12);
        }
    }

    #[test]
    fn mean_reuse_approaches_plateau_rate() {
        // Exact mean differs from (E[L]-1)/N by E[L(L-1)]/(2N^2), which
        // vanishes as the segment grows.
        let small = WindowModel::new(4, 1, 3).unwrap();
        assert_rel(mean_reuse(&small), 1.0 / 6.0, 1e-12);
        assert_rel(mean_reuse_asymptote(&small), 0.25, 1e-12);
        let big = WindowModel::new(4000, 1, 3).unwrap();
        let rel_gap =
            (mean_reuse(&big) - mean_reuse_asymptote(&big)).abs() / mean_reuse_asymptote(&big);
        assert!(rel_gap < 1e-3, "gap {rel_gap}");
    }

    #[test]
    fn mc_oracle_agrees_with_closed_forms() {
        let mut rng = substream(42, Stream::NetsInit);
        let cases = [
            model(2, 1.0, 0.0, 0.0),
            model(4, 0.9, 0.5, 0.3),
            model(8, 0.99, 0.3, 0.7),
        ];
        for m in &cases {
            for task in [OracleTask::RewardRatio(m), OracleTask::BootstrapRatio(m)] {
                let mc = oracle(task, 100_000, &mut rng).unwrap();
                let cf = task.closed_form().unwrap();
                assert!(
                    (mc.estimate - cf).abs() <= 4.0 * mc.stderr,
                    "{}: mc {} +- {} vs closed form {cf}",
                    task.name(),
                    mc.estimate,
                    mc.stderr
                );
            }
        }
        let task = OracleTask::AveragedGradVariance {
            n: 4,
            rho_w: 0.5,
            sigma2_w: 1.0,
        };
        let mc = oracle(task, 100_000, &mut rng).unwrap();
        assert!((mc.estimate - 0.625).abs() <= 4.0 * mc.stderr);
        assert!((mc.estimate - 0.625).abs() / 0.625 < 0.05);
    }

    #[test]
    fn oracle_rejects_too_few_trials() {
        let m = model(2, 1.0, 0.0, 0.0);
        let mut rng = substream(1, Stream::NetsInit);
        assert!(matches!(
            oracle(OracleTask::RewardRatio(&m), 10, &mut rng),
            Err(AnalysisError::TooFewTrials(10))
        ));
    }

    #[test]
    fn enumeration_oracle_via_oracle_entry_point() {
        let wm = WindowModel::new(4, 1, 3).unwrap();
        let mut rng = substream(1, Stream::NetsInit);
        let est = oracle(OracleTask::SparseCount(&wm), 1000, &mut rng).unwrap();
        assert_eq!(est.stderr, 0.0);
        assert_rel(est.estimate, 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn model_validation() {
        assert!(VarianceModel::new(0, 0.9, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(VarianceModel::new(2, 1.5, 0.0, 0.0, 1.0, 1.0).is_err());
        assert!(VarianceModel::new(2, 0.9, 1.0, 0.0, 1.0, 1.0).is_err());
        assert!(VarianceModel::new(2, 0.9, 0.0, 1.1, 1.0, 1.0).is_err());
        assert!(WindowModel::new(4, 0, 3).is_err());
        assert!(WindowModel::new(4, 2, 1).is_err());
        assert!(WindowModel::new(4, 1, 5).is_err());
    }
}
