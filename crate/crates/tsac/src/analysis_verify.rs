//! The closed-form-versus-oracle verification sweep behind `tsac verify`.
//!
//! Every formula in [`crate::analysis`] is checked against its independent
//! oracle over a parameter grid: enumeration checks must match exactly (to
//! f64 round-off), Monte-Carlo checks must land within four standard errors.
//! Bound and monotonicity properties are swept alongside.

use crate::analysis::{
    bootstrap_ratio, coverage_probability_lmin1, enumerate_windows, kappa_star, mean_reuse,
    oracle, reward_ratio, sparse_amplification, OracleTask, VarianceModel, WindowModel,
};
use crate::rng::{substream, Stream};

/// One verified check.
#[derive(Debug, Clone)]
pub struct VerifyRow {
    pub name: String,
    pub params: String,
    pub closed_form: f64,
    pub oracle: f64,
    pub stderr: f64,
    /// Discrepancy in units of the acceptance threshold (1.0 is the limit).
    pub severity: f64,
    pub pass: bool,
}

/// Result of the full sweep.
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
    pub settings: usize,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }

    pub fn max_severity(&self) -> f64 {
        self.rows.iter().map(|r| r.severity).fold(0.0, f64::max)
    }
}

const ENUM_TOL: f64 = 1e-12;

fn check_mc(name: &str, params: String, cf: f64, est: f64, stderr: f64, rows: &mut Vec<VerifyRow>) {
    // Four standard errors, with an absolute floor for near-exact cases.
    let limit = (4.0 * stderr).max(1e-9);
    let severity = (est - cf).abs() / limit;
    rows.push(VerifyRow {
        name: name.to_string(),
        params,
        closed_form: cf,
        oracle: est,
        stderr,
        severity,
        pass: severity <= 1.0,
    });
}

fn check_exact(name: &str, params: String, cf: f64, oracle_val: f64, rows: &mut Vec<VerifyRow>) {
    let scale = cf.abs().max(1.0);
    let severity = (oracle_val - cf).abs() / (ENUM_TOL * scale);
    rows.push(VerifyRow {
        name: name.to_string(),
        params,
        closed_form: cf,
        oracle: oracle_val,
        stderr: 0.0,
        severity,
        pass: severity <= 1.0,
    });
}

/// Runs the complete sweep. `mc_trials` is the Monte-Carlo sample count per
/// setting (the acceptance grid uses 1e5).
pub fn run_verification(mc_trials: usize, seed: u64) -> VerifyReport {
    let mut rng = substream(seed, Stream::NetsInit);
    let mut rows = Vec::new();
    let mut settings = 0usize;

    let ns: [usize; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 100];
    let gammas = [0.5, 0.9, 0.99, 1.0];
    let corrs = [0.0, 0.3, 0.7, 0.999];

    // Monte-Carlo lanes: reward and bootstrap variance ratios on a thinned
    // product grid, and the averaged-gradient variance.
    for (i, &n) in ns.iter().enumerate() {
        for (j, &gamma) in gammas.iter().enumerate() {
            // Rotate through the correlation grid to keep the sweep wide
            // but affordable inside the acceptance window.
            let rho = corrs[(i + j) % corrs.len()];
            let kappa = corrs[(i + 2 * j + 1) % corrs.len()];
            let m = VarianceModel::new(n, gamma, rho, kappa, 1.0, 1.0).expect("valid grid");
            settings += 1;
            let task = OracleTask::RewardRatio(&m);
            let est = oracle(task, mc_trials, &mut rng).expect("trials >= 1000");
            check_mc(
                "reward_ratio",
                format!("N={n} gamma={gamma} rho={rho}"),
                reward_ratio(&m),
                est.estimate,
                est.stderr,
                &mut rows,
            );
            let task = OracleTask::BootstrapRatio(&m);
            let est = oracle(task, mc_trials, &mut rng).expect("trials >= 1000");
            check_mc(
                "bootstrap_ratio",
                format!("N={n} gamma={gamma} kappa={kappa}"),
                bootstrap_ratio(&m),
                est.estimate,
                est.stderr,
                &mut rows,
            );
        }
    }
    for &n in &[1usize, 2, 4, 8, 16] {
        for &rho in &corrs {
            settings += 1;
            let task = OracleTask::AveragedGradVariance {
                n,
                rho_w: rho,
                sigma2_w: 1.0,
            };
            let est = oracle(task, mc_trials, &mut rng).expect("trials >= 1000");
            check_mc(
                "averaged_grad_variance",
                format!("n={n} rho_w={rho}"),
                crate::analysis::averaged_grad_variance(n, rho, 1.0),
                est.estimate,
                est.stderr,
                &mut rows,
            );
        }
    }

    // Enumeration lanes: reuse, coverage, sparse counts, mean reuse.
    let window_grids: [(usize, usize, usize); 10] = [
        (1, 1, 1),
        (2, 1, 2),
        (3, 1, 3),
        (4, 1, 3),
        (5, 2, 4),
        (6, 3, 3),
        (7, 1, 7),
        (8, 2, 5),
        (8, 1, 8),
        (100, 1, 16),
    ];
    for &(n, lo, hi) in &window_grids {
        let wm = WindowModel::new(n, lo, hi).expect("valid grid");
        let e = enumerate_windows(&wm);
        settings += 1;
        for j in [1, (n + 1) / 2, n] {
            check_exact(
                "expected_reuse",
                format!("N={n} l=[{lo},{hi}] j={j}"),
                crate::analysis::expected_reuse(j, &wm).expect("j in range"),
                e.reuse[j - 1],
                &mut rows,
            );
            check_exact(
                "coverage",
                format!("N={n} l=[{lo},{hi}] j={j}"),
                crate::analysis::coverage_probability(j, &wm).expect("j in range"),
                e.coverage[j - 1],
                &mut rows,
            );
            if lo == 1 {
                check_exact(
                    "coverage_lmin1",
                    format!("N={n} m={hi} j={j}"),
                    coverage_probability_lmin1(j, hi, n),
                    e.coverage[j - 1],
                    &mut rows,
                );
            }
        }
        check_exact(
            "sparse_count",
            format!("N={n} l=[{lo},{hi}]"),
            sparse_amplification(&wm).expected_count,
            e.terminal_reward_count,
            &mut rows,
        );
        check_exact(
            "mean_reuse",
            format!("N={n} l=[{lo},{hi}]"),
            mean_reuse(&wm),
            e.mean_reuse,
            &mut rows,
        );
    }

    // Bound sweep: 1 <= R_gamma < 4 everywhere; R_B monotone in kappa and
    // >= 1 exactly below kappa_star.
    for &n in &ns {
        for &gamma in &gammas {
            for &rho in &corrs {
                settings += 1;
                let m = VarianceModel::new(n, gamma, rho, 0.0, 1.0, 1.0).expect("valid");
                let r = reward_ratio(&m);
                rows.push(VerifyRow {
                    name: "reward_ratio_bounds".into(),
                    params: format!("N={n} gamma={gamma} rho={rho}"),
                    closed_form: r,
                    oracle: r,
                    stderr: 0.0,
                    severity: if (1.0 - 1e-12..4.0).contains(&r) { 0.0 } else { 2.0 },
                    pass: (1.0 - 1e-12..4.0).contains(&r),
                });
            }
            if n >= 2 {
                let ks = kappa_star(n, gamma).expect("N >= 2");
                let mut prev = f64::INFINITY;
                let mut ok = true;
                for &kappa in &corrs {
                    let m = VarianceModel::new(n, gamma, 0.0, kappa, 1.0, 1.0).expect("valid");
                    let rb = bootstrap_ratio(&m);
                    ok &= rb <= prev + 1e-12;
                    prev = rb;
                    // R_B >= 1 exactly when kappa <= kappa_star.
                    let expect_ge_one = kappa <= ks;
                    ok &= (rb >= 1.0 - 1e-9) == expect_ge_one
                        || (rb - 1.0).abs() < 1e-9;
                }
                rows.push(VerifyRow {
                    name: "bootstrap_ratio_monotone_and_threshold".into(),
                    params: format!("N={n} gamma={gamma}"),
                    closed_form: ks,
                    oracle: ks,
                    stderr: 0.0,
                    severity: if ok { 0.0 } else { 2.0 },
                    pass: ok,
                });
            }
        }
    }

    VerifyReport { rows, settings }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_sweep_passes() {
        let report = run_verification(20_000, 7);
        assert!(report.settings >= 50, "grid too small: {}", report.settings);
        assert!(
            report.all_pass(),
            "failures: {:?}",
            report
                .rows
                .iter()
                .filter(|r| !r.pass)
                .collect::<Vec<_>>()
        );
    }
}
