//! Evaluation statistics: interquartile means, bootstrap confidence
//! intervals, and the success-at-final-timestep scoring rule.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("iqm of an empty slice")]
    Empty,
    #[error("bootstrap needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("bootstrap needs at least 100 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("confidence must lie in (0, 1), got {0}")]
    BadConfidence(f64),
    #[error("episode record is empty")]
    TruncatedEpisode,
}

/// One recorded step of an evaluation episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStep {
    pub reward: f64,
    pub success: bool,
}

/// Scores an episode by its success flag at the final step only;
/// intermediate successes do not count.
pub fn success_at_final(episode: &[EpisodeStep]) -> Result<bool, StatsError> {
    episode
        .last()
        .map(|s| s.success)
        .ok_or(StatsError::TruncatedEpisode)
}

/// Interquartile mean: drop `floor(0.25 n)` values from each end of the
/// sorted list, then average the rest.
pub fn iqm(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let trim = sorted.len() / 4;
    let kept = &sorted[trim..sorted.len() - trim];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Percentile-bootstrap confidence interval of the IQM.
///
/// Resamples the values with replacement `n_boot` times using a fixed
/// internal stream seeded by `seed`, so the interval is reproducible.
pub fn bootstrap_ci(
    values: &[f64],
    n_boot: usize,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64), StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFewValues(values.len()));
    }
    if n_boot < 100 {
        return Err(StatsError::TooFewResamples(n_boot));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::BadConfidence(confidence));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut resample = vec![0.0; values.len()];
    for _ in 0..n_boot {
        for slot in resample.iter_mut() {
            *slot = values[rng.random_range(0..values.len())];
        }
        stats.push(iqm(&resample).expect("resample is nonempty"));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - confidence;
    Ok((
        percentile(&stats, alpha / 2.0),
        percentile(&stats, 1.0 - alpha / 2.0),
    ))
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = p * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// A per-seed learning curve on a shared step grid.
#[derive(Debug, Clone)]
pub struct RunCurve {
    pub steps: Vec<u64>,
    /// One row per seed, one column per step.
    pub per_seed: Vec<Vec<f64>>,
}

impl RunCurve {
    pub fn new(steps: Vec<u64>, per_seed: Vec<Vec<f64>>) -> Result<Self, StatsError> {
        for row in &per_seed {
            if row.len() != steps.len() {
                return Err(StatsError::TruncatedEpisode);
            }
        }
        Ok(Self { steps, per_seed })
    }

    /// Per-step values across seeds.
    pub fn column(&self, idx: usize) -> Vec<f64> {
        self.per_seed.iter().map(|row| row[idx]).collect()
    }
}

/// Cross-task aggregation: IQM per task at each step, then the plain mean
/// across tasks.
pub fn aggregate(task_curves: &[RunCurve]) -> Result<Vec<f64>, StatsError> {
    let first = task_curves.first().ok_or(StatsError::Empty)?;
    let mut out = Vec::with_capacity(first.steps.len());
    for idx in 0..first.steps.len() {
        let mut per_task = Vec::with_capacity(task_curves.len());
        for curve in task_curves {
            per_task.push(iqm(&curve.column(idx))?);
        }
        out.push(per_task.iter().sum::<f64>() / per_task.len() as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn success_counts_only_final_step() {
        let mut ep: Vec<EpisodeStep> = (0..20)
            .map(|i| EpisodeStep {
                reward: 0.0,
                success: (10..=20).contains(&i),
            })
            .collect();
        ep.last_mut().unwrap().success = false;
        assert!(!success_at_final(&ep).unwrap());
        ep.last_mut().unwrap().success = true;
        assert!(success_at_final(&ep).unwrap());
        assert!(!success_at_final(&[EpisodeStep {
            reward: 1.0,
            success: false
        }])
        .unwrap());
        assert!(matches!(
            success_at_final(&[]),
            Err(StatsError::TruncatedEpisode)
        ));
    }

    #[test]
    fn iqm_known_values() {
        assert_eq!(iqm(&[5.0, 5.0, 5.0, 5.0]).unwrap(), 5.0);
        // 1..10 trims two from each end: mean of 3..=8.
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(iqm(&v).unwrap(), 5.5);
        // n = 2 trims nothing.
        assert_eq!(iqm(&[1.0, 100.0]).unwrap(), 50.5);
        assert!(matches!(iqm(&[]), Err(StatsError::Empty)));
    }

    #[test]
    fn bootstrap_ci_degenerate_and_nested() {
        let constant = vec![3.25; 6];
        let (lo, hi) = bootstrap_ci(&constant, 500, 0.95, 9).unwrap();
        assert_eq!((lo, hi), (3.25, 3.25));

        let values = [0.1, 0.4, 0.2, 0.9, 0.5, 0.3, 0.8, 0.6];
        let (lo95, hi95) = bootstrap_ci(&values, 2000, 0.95, 7).unwrap();
        let (lo80, hi80) = bootstrap_ci(&values, 2000, 0.80, 7).unwrap();
        assert!(lo95 <= lo80 && hi80 <= hi95, "CIs not nested");
        let point = iqm(&values).unwrap();
        assert!(lo95 <= point && point <= hi95);

        assert!(bootstrap_ci(&[1.0], 500, 0.95, 0).is_err());
        assert!(bootstrap_ci(&values, 10, 0.95, 0).is_err());
        assert!(bootstrap_ci(&values, 500, 1.5, 0).is_err());
    }

    #[test]
    fn ci_width_shrinks_with_more_seeds() {
        // Average width over several draws from the same Gaussian.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut avg_width = |n: usize| {
            let mut total = 0.0;
            for rep in 0..40 {
                let vals: Vec<f64> = (0..n)
                    .map(|_| {
                        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                        let u2: f64 = rng.random();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect();
                let (lo, hi) = bootstrap_ci(&vals, 400, 0.95, rep).unwrap();
                total += hi - lo;
            }
            total / 40.0
        };
        let wide = avg_width(6);
        let narrow = avg_width(48);
        assert!(narrow < wide, "width {narrow} !< {wide}");
    }

    #[test]
    fn aggregate_is_iqm_per_task_then_mean() {
        let a = RunCurve::new(vec![0, 1], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = RunCurve::new(vec![0, 1], vec![vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let agg = aggregate(&[a, b]).unwrap();
        assert_eq!(agg, vec![(2.0 + 6.0) / 2.0, (3.0 + 7.0) / 2.0]);
    }

    proptest! {
        #[test]
        fn iqm_translation_and_scale_equivariant(
            values in proptest::collection::vec(-1e3f64..1e3, 1..40),
            a in 0.01f64..100.0,
            b in -100.0f64..100.0,
        ) {
            let base = iqm(&values).unwrap();
            let mapped: Vec<f64> = values.iter().map(|x| a * x + b).collect();
            let got = iqm(&mapped).unwrap();
            prop_assert!((got - (a * base + b)).abs() < 1e-7 * (1.0 + base.abs() * a));
        }

        #[test]
        fn iqm_permutation_invariant(
            values in proptest::collection::vec(-1e3f64..1e3, 1..40),
            swap_seed in 0u64..1000,
        ) {
            let mut shuffled = values.clone();
            // Cheap deterministic shuffle.
            let mut state = swap_seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                let j = (state >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(iqm(&values).unwrap(), iqm(&shuffled).unwrap());
        }
    }
}
