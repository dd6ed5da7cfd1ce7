//! Choosing the TV weight from healthy images and turning anomaly maps into
//! binary detections under a false-positive budget.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{masked_values, Image, LabeledImage, Mask};
use crate::prior::NormativePrior;
use crate::restoration::{detect, restore_batch, RestorationConfig, RestorationResult};

pub const DEFAULT_FPR_LIMITS: [f64; 3] = [0.01, 0.05, 0.10];

/// `0.25 * 2^k` for `k = 0..=6`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..7).map(|k| 0.25 * f64::powi(2.0, k)).collect()
}

/// Mean over images of the mean foreground `|Y - X|`.
pub fn epsilon_of(images: &[&LabeledImage], results: &[RestorationResult]) -> f64 {
    let per_image: Vec<f64> = images
        .iter()
        .zip(results)
        .map(|(img, r)| {
            let v = masked_values(&r.abs_difference, &img.foreground_mask);
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    per_image.iter().sum::<f64>() / per_image.len() as f64
}

fn check_healthy(images: &[&LabeledImage]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Argument("no healthy images given".into()));
    }
    if let Some(img) = images.iter().find(|i| !i.is_healthy()) {
        return Err(Error::Argument(format!(
            "image {}/{} has a lesion; calibration needs healthy images",
            img.subject_id, img.slice_id
        )));
    }
    Ok(())
}

/// The restoration error `epsilon(lambda)` on healthy images.
pub fn restoration_error(
    model: &NormativePrior,
    healthy: &[&LabeledImage],
    lambda: f64,
    config: &RestorationConfig,
    workers: usize,
) -> Result<f64> {
    check_healthy(healthy)?;
    let cfg = RestorationConfig {
        lambda,
        ..config.clone()
    };
    let results = restore_batch(model, healthy, &cfg, workers)?;
    Ok(epsilon_of(healthy, &results))
}

/// Epsilon values closer than this to the minimum count as ties. Once the
/// TV term pins the restoration to the observation, epsilon only reflects the
/// accuracy of the inner TV solver, which is far below this.
pub const EPSILON_TIE_TOLERANCE: f64 = 1e-6;

/// Index of the smallest `lambda` attaining the minimal `epsilon` (up to
/// [`EPSILON_TIE_TOLERANCE`]) after sorting the grid. Non-finite values never
/// win.
pub fn pick_lambda(grid: &[f64], epsilon: &[f64]) -> Result<usize> {
    if grid.is_empty() || grid.len() != epsilon.len() {
        return Err(Error::Argument("lambda grid and epsilon values must be non-empty and aligned".into()));
    }
    let min = epsilon
        .iter()
        .copied()
        .filter(|e| e.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Calibration("epsilon is non-finite at every grid point".into()));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
    Ok(order
        .into_iter()
        .find(|&i| epsilon[i].is_finite() && epsilon[i] <= min + EPSILON_TIE_TOLERANCE)
        .expect("the minimum is attained"))
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Deserialize::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub fpr_limit: f64,
    pub threshold: f64,
    /// FPR of the threshold on the calibration pool itself.
    pub achieved_fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    /// Ascending.
    pub lambda_grid: Vec<f64>,
    /// Non-finite entries (diverged restorations) are stored as `null`.
    #[serde(with = "nan_as_null")]
    pub epsilon_values: Vec<f64>,
    pub lambda_star: f64,
    /// Ordered by increasing FPR limit, so thresholds decrease.
    pub thresholds: Vec<ThresholdEntry>,
    /// Sorted foreground scores of the healthy images at `lambda_star`.
    pub healthy_score_pool: Vec<f64>,
    pub pool_summary: PoolSummary,
    pub model_checksum: String,
    pub restoration: RestorationConfig,
    pub warnings: Vec<String>,
}

impl CalibrationProfile {
    pub fn threshold_for(&self, fpr_limit: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.fpr_limit - fpr_limit).abs() < 1e-12)
            .map(|t| t.threshold)
    }

    /// Fails unless the profile was computed with `model`.
    pub fn check_model(&self, model: &NormativePrior) -> Result<()> {
        let sum = model.checksum();
        if sum != self.model_checksum {
            return Err(Error::Calibration(format!(
                "profile was calibrated for model {} but the checkpoint is {}",
                &self.model_checksum[..12.min(self.model_checksum.len())],
                &sum[..12]
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Outcome of the lambda sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSweep {
    pub grid: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub lambda_star: f64,
    pub warnings: Vec<String>,
    /// Restorations of the healthy images at `lambda_star`.
    pub results_at_star: Vec<RestorationResult>,
}

/// Evaluates `epsilon` over the grid and picks the smallest minimizer.
pub fn select_lambda(
    model: &NormativePrior,
    healthy: &[&LabeledImage],
    grid: &[f64],
    config: &RestorationConfig,
    workers: usize,
) -> Result<LambdaSweep> {
    check_healthy(healthy)?;
    if grid.is_empty() {
        return Err(Error::Argument("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Argument("lambda grid values must be finite and nonnegative".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut epsilon = Vec::with_capacity(sorted.len());
    let mut all_results = Vec::with_capacity(sorted.len());
    for &lambda in &sorted {
        let cfg = RestorationConfig {
            lambda,
            ..config.clone()
        };
        let eps = match restore_batch(model, healthy, &cfg, workers) {
            Ok(results) => {
                let e = epsilon_of(healthy, &results);
                all_results.push(Some(results));
                e
            }
            Err(Error::Restoration { iteration }) => {
                log::warn!("restoration diverged at lambda {lambda} (iteration {iteration})");
                all_results.push(None);
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        log::info!("epsilon({lambda}) = {eps:.6}");
        epsilon.push(eps);
    }
    let idx = pick_lambda(&sorted, &epsilon)?;
    let warnings = epsilon_warnings(&sorted, &epsilon, idx);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LambdaSweep {
        lambda_star: sorted[idx],
        results_at_star: all_results[idx].take().expect("finite epsilon has results"),
        grid: sorted,
        epsilon,
        warnings,
    })
}

/// Warnings about the shape of the epsilon curve.
pub fn epsilon_warnings(grid: &[f64], epsilon: &[f64], idx: usize) -> Vec<String> {
    let mut out = Vec::new();
    if grid.len() == 1 {
        out.push("lambda grid has a single value; no search was performed".to_string());
        return out;
    }
    let finite: Vec<f64> = epsilon.iter().copied().filter(|e| e.is_finite()).collect();
    let tol = EPSILON_TIE_TOLERANCE;
    let decreasing = finite.windows(2).all(|w| w[1] <= w[0] + tol);
    let increasing = finite.windows(2).all(|w| w[1] + tol >= w[0]);
    if increasing {
        out.push(format!(
            "epsilon(lambda) is monotone increasing over the grid; lambda* = {} is the smallest grid value",
            grid[idx]
        ));
    } else if decreasing {
        out.push(format!(
            "epsilon(lambda) is monotone decreasing over the grid (no interior dip); lambda* = {} is where it levels off",
            grid[idx]
        ));
    } else if idx == 0 || idx + 1 == grid.len() {
        out.push(format!("epsilon(lambda) is minimal at the grid boundary (lambda* = {})", grid[idx]));
    }
    out
}

/// Smallest pool value `T` with `#{score > T} / n <= fpr_limit`.
pub fn select_threshold(pool: &[f64], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit < 1.0) {
        return Err(Error::Argument(format!("FPR limit {fpr_limit} is outside (0, 1)")));
    }
    if pool.is_empty() {
        return Err(Error::Argument("score pool is empty".into()));
    }
    if pool.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("score pool contains non-finite values".into()));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == v {
            j += 1;
        }
        // j values are <= v, so n - j exceed it.
        if ((n - j) as f64) / (n as f64) <= fpr_limit {
            return Ok(v);
        }
        i = j;
    }
    unreachable!("the maximum is exceeded by nothing")
}

/// `score > T` on the foreground, false on the background.
pub fn threshold_map(scores: &Image, foreground: &Mask, threshold: f64) -> Mask {
    let mut out = Mask::from_elem(scores.dim(), false);
    ndarray::Zip::from(&mut out)
        .and(scores)
        .and(foreground)
        .for_each(|o, &s, &f| *o = f && s > threshold);
    out
}

/// Fraction of pool values strictly above `threshold`.
pub fn pool_fpr(pool: &[f64], threshold: f64) -> f64 {
    pool.iter().filter(|&&v| v > threshold).count() as f64 / pool.len() as f64
}

/// Global pool of foreground anomaly scores from healthy restorations.
pub fn score_pool(images: &[&LabeledImage], results: &[RestorationResult]) -> Vec<f64> {
    let mut pool: Vec<f64> = images
        .iter()
        .zip(results)
        .flat_map(|(img, r)| masked_values(&detect(r), &img.foreground_mask))
        .collect();
    pool.sort_by(f64::total_cmp);
    pool
}

fn summarize(pool: &[f64]) -> PoolSummary {
    let n = pool.len();
    PoolSummary {
        count: n,
        min: pool[0],
        max: pool[n - 1],
        mean: pool.iter().sum::<f64>() / n as f64,
        median: if n % 2 == 1 {
            pool[n / 2]
        } else {
            0.5 * (pool[n / 2 - 1] + pool[n / 2])
        },
    }
}

/// Full calibration: lambda sweep, then FPR-limited thresholds from the
/// healthy score pool at `lambda*`.
pub fn calibrate(
    model: &NormativePrior,
    healthy: &[&LabeledImage],
    grid: &[f64],
    fpr_limits: &[f64],
    config: &RestorationConfig,
    workers: usize,
) -> Result<CalibrationProfile> {
    let sweep = select_lambda(model, healthy, grid, config, workers)?;
    let pool = score_pool(healthy, &sweep.results_at_star);
    if pool.is_empty() {
        return Err(Error::Calibration("healthy images have no foreground pixels".into()));
    }
    let mut limits = fpr_limits.to_vec();
    limits.sort_by(f64::total_cmp);
    limits.dedup();
    let thresholds = limits
        .iter()
        .map(|&l| {
            let t = select_threshold(&pool, l)?;
            Ok(ThresholdEntry {
                fpr_limit: l,
                threshold: t,
                achieved_fpr: pool_fpr(&pool, t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationProfile {
        lambda_grid: sweep.grid,
        epsilon_values: sweep.epsilon,
        lambda_star: sweep.lambda_star,
        thresholds,
        pool_summary: summarize(&pool),
        healthy_score_pool: pool,
        model_checksum: model.checksum(),
        restoration: RestorationConfig {
            lambda: sweep.lambda_star,
            ..config.clone()
        },
        warnings: sweep.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_grid_is_geometric() {
        assert_eq!(default_lambda_grid(), vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn lambda_rule_examples() {
        assert_eq!(pick_lambda(&[3.0], &[0.7]).unwrap(), 0);
        let grid = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(grid[pick_lambda(&grid, &[3.0, 1.0, 1.0, 2.0]).unwrap()], 2.0);
        // Order of the grid does not matter.
        let grid = [8.0, 4.0, 2.0, 1.0];
        assert_eq!(grid[pick_lambda(&grid, &[2.0, 1.0, 1.0, 3.0]).unwrap()], 2.0);
        assert!(matches!(
            pick_lambda(&[1.0, 2.0], &[f64::NAN, f64::INFINITY]),
            Err(Error::Calibration(_))
        ));
        assert_eq!(pick_lambda(&[1.0, 2.0], &[f64::NAN, 5.0]).unwrap(), 1);
        // Differences at solver precision are ties.
        let grid = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(grid[pick_lambda(&grid, &[0.3, 3.8562e-6, 3.8561e-6, 3.8560e-6]).unwrap()], 2.0);
        assert_eq!(grid[pick_lambda(&grid, &[0.3, 2e-5, 1e-5, 3e-5]).unwrap()], 4.0);
    }

    #[test]
    fn monotone_curves_are_flagged() {
        let g = [1.0, 2.0, 3.0];
        assert_eq!(epsilon_warnings(&g, &[3.0, 2.0, 1.0], 2).len(), 1);
        assert!(epsilon_warnings(&g, &[3.0, 1.0, 2.0], 1).is_empty());
        assert_eq!(epsilon_warnings(&[1.0], &[1.0], 0).len(), 1);
    }

    #[test]
    fn threshold_examples() {
        let pool: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        assert_eq!(select_threshold(&pool, 0.10).unwrap(), 0.9);
        assert_eq!(select_threshold(&pool, 0.95).unwrap(), 0.1);
        assert!(select_threshold(&pool, 0.0).is_err());
        assert!(select_threshold(&pool, 1.0).is_err());
        assert!(select_threshold(&[], 0.1).is_err());
        // Ties: three equal maxima cannot be split.
        assert_eq!(select_threshold(&[0.0, 1.0, 1.0, 1.0], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn threshold_map_examples() {
        let scores = ndarray::array![[0.5, 0.9], [0.2, 3.0]];
        let mut fg = Mask::from_elem((2, 2), true);
        fg[[1, 1]] = false;
        assert_eq!(threshold_map(&scores, &fg, 0.5), ndarray::array![[false, true], [false, false]]);
        assert!(threshold_map(&scores, &fg, f64::INFINITY).iter().all(|&m| !m));
        assert_eq!(threshold_map(&scores, &fg, -1.0), fg);
    }

    #[test]
    fn random_pool_respects_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>().powi(3)).collect();
        let mut last = f64::INFINITY;
        for limit in DEFAULT_FPR_LIMITS {
            let t = select_threshold(&pool, limit).unwrap();
            let fpr = pool.iter().filter(|&&v| v > t).count() as f64 / pool.len() as f64;
            assert!(fpr <= limit);
            // The next lower pool value would exceed the limit.
            let below = pool.iter().copied().filter(|&v| v < t).fold(f64::NEG_INFINITY, f64::max);
            let fpr_below = pool.iter().filter(|&&v| v > below).count() as f64 / pool.len() as f64;
            assert!(fpr_below > limit);
            assert!(t < last);
            last = t;
        }
    }

    proptest! {
        #[test]
        fn achieved_fpr_never_exceeds_limit(
            pool in proptest::collection::vec(0.0f64..5.0, 1..300),
            limit in 0.001f64..0.999,
        ) {
            let t = select_threshold(&pool, limit).unwrap();
            prop_assert!(pool_fpr(&pool, t) <= limit);
            prop_assert!(pool.contains(&t));
        }

        #[test]
        fn thresholds_are_antitone(
            pool in proptest::collection::vec(0.0f64..1.0, 2..200),
            a in 0.001f64..0.999,
            b in 0.001f64..0.999,
        ) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(select_threshold(&pool, lo).unwrap() >= select_threshold(&pool, hi).unwrap());
        }
    }
}
