//! Reproducibility analytics: sample mean, sample standard deviation
//! (n−1 denominator), relative standard deviation, histograms, and
//! group comparison tables over cycling capacities and fitted circuit
//! parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eis::FitResult;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("mean is zero, rsd undefined")]
    ZeroMean,
    #[error("empty input")]
    EmptyInput,
    #[error("need at least 2 converged fits, got {0}")]
    TooFewConverged(usize),
}

/// Mean / sample std / RSD of one sample population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation, n−1 denominator.
    pub std: f64,
    /// Relative standard deviation std/mean, stored as a fraction.
    pub rsd: f64,
}

impl SampleSummary {
    /// RSD formatted as a percentage with three decimals, e.g. `1.040%`.
    pub fn rsd_percent(&self) -> String {
        format!("{:.3}%", self.rsd * 100.0)
    }
}

/// Sample mean, std (n−1) and RSD of `values`.
pub fn summarize(values: &[f64]) -> Result<SampleSummary, StatsError> {
    let n = values.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if mean == 0.0 {
        return Err(StatsError::ZeroMean);
    }
    let ss = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    let std = (ss / (n - 1) as f64).sqrt();
    Ok(SampleSummary {
        n,
        mean,
        std,
        rsd: std / mean,
    })
}

/// Equal-width histogram over `[min, max]`; the maximum value lands in the
/// last bin (right-closed final bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], n_bins: usize) -> Result<Histogram, StatsError> {
    if values.is_empty() || n_bins == 0 {
        return Err(StatsError::EmptyInput);
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Degenerate range: unit-width bins centered on the single value.
    let (lo, width) = if max > min {
        (min, (max - min) / n_bins as f64)
    } else {
        (min - 0.5, 1.0)
    };
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; n_bins];
    for &v in values {
        let mut idx = ((v - lo) / width).floor() as isize;
        if idx < 0 {
            idx = 0;
        }
        if idx as usize >= n_bins {
            idx = n_bins as isize - 1;
        }
        counts[idx as usize] += 1;
    }
    Ok(Histogram { bin_edges, counts })
}

/// Sturges' rule bin count: `ceil(log2 n) + 1`.
pub fn sturges_bins(n: usize) -> usize {
    if n <= 1 {
        return 1;
    }
    (n as f64).log2().ceil() as usize + 1
}

/// Side-by-side summaries of two groups with their RSD difference
/// (second minus first). No hypothesis testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub label_a: String,
    pub label_b: String,
    pub a: SampleSummary,
    pub b: SampleSummary,
    pub rsd_difference: f64,
}

pub fn compare_groups(
    a: &[f64],
    b: &[f64],
    labels: (&str, &str),
) -> Result<GroupComparison, StatsError> {
    let sa = summarize(a)?;
    let sb = summarize(b)?;
    Ok(GroupComparison {
        label_a: labels.0.to_string(),
        label_b: labels.1.to_string(),
        a: sa,
        b: sb,
        rsd_difference: sb.rsd - sa.rsd,
    })
}

/// Per-parameter summaries over the converged entries of a fit batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EisParamStats {
    /// (parameter name, summary) in fixed order r1, r2, r3, r4, c2, c3, c4.
    pub params: Vec<(String, SampleSummary)>,
    pub n_converged: usize,
    pub n_excluded: usize,
}

pub fn eis_param_stats(fits: &[FitResult]) -> Result<EisParamStats, StatsError> {
    let converged: Vec<&FitResult> = fits.iter().filter(|f| f.converged).collect();
    if converged.len() < 2 {
        return Err(StatsError::TooFewConverged(converged.len()));
    }
    let column = |get: &dyn Fn(&FitResult) -> f64| -> Vec<f64> {
        converged.iter().map(|f| get(f)).collect()
    };
    let mut params = Vec::new();
    let names_r = ["r1", "r2", "r3", "r4"];
    for (k, name) in names_r.iter().enumerate() {
        let vals = column(&|f: &FitResult| {
            if k == 0 {
                f.params.r1
            } else {
                f.params.arcs[k - 1].r
            }
        });
        params.push((name.to_string(), summarize(&vals)?));
    }
    for (k, name) in ["c2", "c3", "c4"].iter().enumerate() {
        let vals = column(&|f: &FitResult| f.params.arcs[k].c);
        params.push((name.to_string(), summarize(&vals)?));
    }
    Ok(EisParamStats {
        params,
        n_converged: converged.len(),
        n_excluded: fits.len() - converged.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Independent two-pass oracle written against the textbook formulas.
    fn brute_force(values: &[f64]) -> (f64, f64, f64) {
        let n = values.len() as f64;
        let mut total = 0.0;
        for v in values {
            total += v;
        }
        let mean = total / n;
        let mut ss = 0.0;
        for v in values {
            ss += (v - mean).powi(2);
        }
        let std = (ss / (n - 1.0)).sqrt();
        (mean, std, std / mean)
    }

    #[test]
    fn summarize_constant() {
        let s = summarize(&[10.0, 10.0, 10.0]).unwrap();
        assert_eq!(s.n, 3);
        assert_eq!(s.mean, 10.0);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.rsd, 0.0);
    }

    #[test]
    fn summarize_two_point() {
        // Frozen from the brute-force oracle: mean 10, s = sqrt(2).
        let s = summarize(&[9.0, 11.0]).unwrap();
        assert_relative_eq!(s.mean, 10.0);
        assert_relative_eq!(s.std, 1.414214, epsilon = 1e-6);
        assert_relative_eq!(s.rsd, 0.141421, epsilon = 1e-6);
    }

    #[test]
    fn summarize_errors() {
        assert_eq!(summarize(&[1.0]), Err(StatsError::TooFewSamples(1)));
        assert_eq!(summarize(&[-1.0, 1.0]), Err(StatsError::ZeroMean));
    }

    #[test]
    fn histogram_single_value() {
        let h = histogram(&[5.0], 1).unwrap();
        assert_eq!(h.counts, vec![1]);
        assert_eq!(h.bin_edges.len(), 2);
        assert!(h.bin_edges[0] < h.bin_edges[1]);
    }

    #[test]
    fn histogram_even_split() {
        let h = histogram(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
    }

    #[test]
    fn histogram_empty() {
        assert_eq!(histogram(&[], 4), Err(StatsError::EmptyInput));
    }

    #[test]
    fn histogram_mode_contains_mean() {
        // Monte-Carlo sanity: the mode bin of 4000 normal samples brackets
        // the distribution mean.
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(50.0, 3.0).unwrap();
        let values: Vec<f64> = (0..4000).map(|_| normal.sample(&mut rng)).collect();
        let h = histogram(&values, 20).unwrap();
        let mode = h
            .counts
            .iter()
            .enumerate()
            .max_by_key(|(_, c)| **c)
            .unwrap()
            .0;
        assert!(h.bin_edges[mode] <= 50.0 && 50.0 <= h.bin_edges[mode + 1]);
    }

    #[test]
    fn compare_identical_groups() {
        let g = [1.0, 2.0, 3.0];
        let c = compare_groups(&g, &g, ("a", "b")).unwrap();
        assert_eq!(c.rsd_difference, 0.0);
    }

    #[test]
    fn compare_reported_rsds() {
        // Two synthetic groups tuned to RSD 0.955% and 1.040%.
        let a = [100.0 - 0.955, 100.0 + 0.955];
        let b = [100.0 - 1.040, 100.0 + 1.040];
        let scale = std::f64::consts::SQRT_2;
        let a: Vec<f64> = a.iter().map(|x| 100.0 + (x - 100.0) / scale).collect();
        let b: Vec<f64> = b.iter().map(|x| 100.0 + (x - 100.0) / scale).collect();
        let c = compare_groups(&a, &b, ("manual", "automated")).unwrap();
        assert_relative_eq!(c.a.rsd, 0.00955, epsilon = 1e-6);
        assert_relative_eq!(c.b.rsd, 0.01040, epsilon = 1e-6);
        assert_relative_eq!(c.rsd_difference, 0.00085, epsilon = 1e-6);
    }

    #[test]
    fn compare_rejects_singleton() {
        assert_eq!(
            compare_groups(&[1.0], &[1.0, 2.0], ("a", "b")),
            Err(StatsError::TooFewSamples(1))
        );
    }

    #[test]
    fn rsd_percent_formatting() {
        let s = SampleSummary {
            n: 40,
            mean: 1.0,
            std: 0.00955,
            rsd: 0.00955,
        };
        assert_eq!(s.rsd_percent(), "0.955%");
    }

    proptest! {
        #[test]
        fn matches_brute_force(values in prop::collection::vec(-1e3..1e3f64, 2..64)) {
            prop_assume!(values.iter().sum::<f64>().abs() > 1e-9);
            let s = summarize(&values).unwrap();
            let (mean, std, rsd) = brute_force(&values);
            prop_assert!((s.mean - mean).abs() <= 1e-12 * mean.abs().max(1.0));
            prop_assert!((s.std - std).abs() <= 1e-12 * std.abs().max(1.0));
            prop_assert!((s.rsd - rsd).abs() <= 1e-12 * rsd.abs().max(1.0));
        }

        #[test]
        fn shift_leaves_std(values in prop::collection::vec(1.0..1e3f64, 2..64), k in -50.0..50.0f64) {
            let shifted: Vec<f64> = values.iter().map(|v| v + k).collect();
            let s0 = summarize(&values).unwrap();
            if let Ok(s1) = summarize(&shifted) {
                prop_assert!((s1.std - s0.std).abs() <= 1e-9 * s0.std.max(1.0));
                prop_assert!((s1.mean - (s0.mean + k)).abs() <= 1e-9 * s0.mean.abs().max(1.0));
            }
        }

        #[test]
        fn scale_leaves_rsd(values in prop::collection::vec(1.0..1e3f64, 2..64), lambda in 0.01..100.0f64) {
            let scaled: Vec<f64> = values.iter().map(|v| v * lambda).collect();
            let s0 = summarize(&values).unwrap();
            let s1 = summarize(&scaled).unwrap();
            prop_assert!((s1.rsd - s0.rsd).abs() <= 1e-9 * s0.rsd.max(1e-9));
        }

        #[test]
        fn histogram_conserves_count(values in prop::collection::vec(-1e3..1e3f64, 1..128), bins in 1usize..24) {
            let h = histogram(&values, bins).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
            prop_assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
