//! Nonparametric statistics for model comparison, plus small numeric
//! helpers shared by the measurement-style tests.

use crate::error::{Error, Result};

/// How a Wilcoxon p-value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Full enumeration of the sign-flip distribution (used for n <= 25).
    Exact,
    /// Normal approximation with tie and continuity correction.
    NormalApprox,
}

#[derive(Debug, Clone)]
pub struct WilcoxonResult {
    /// Sum of the ranks of positive differences (W+).
    pub w_statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    pub method: WilcoxonMethod,
}

const EXACT_LIMIT: usize = 25;
pub const MIN_PAIRS: usize = 5;

/// Paired two-sided Wilcoxon signed-rank test.
///
/// Zero differences are dropped; ties among `|difference|` receive average
/// ranks. With 25 or fewer usable pairs the p-value comes from the exact
/// sign-flip distribution, otherwise from the normal approximation with
/// continuity correction and tie-adjusted variance.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let n = prepare(x, y)?.len();
    let method = if n <= EXACT_LIMIT {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    };
    wilcoxon_signed_rank_with(x, y, method)
}

/// Same test with the p-value method pinned (used to compare the exact
/// distribution against the approximation).
pub fn wilcoxon_signed_rank_with(
    x: &[f64],
    y: &[f64],
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    let diffs = prepare(x, y)?;
    let n = diffs.len();
    let ranks = average_ranks(&diffs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let p_value = match method {
        WilcoxonMethod::Exact => exact_two_sided_p(&ranks, w_plus),
        WilcoxonMethod::NormalApprox => normal_two_sided_p(&ranks, w_plus),
    };
    Ok(WilcoxonResult {
        w_statistic: w_plus,
        p_value,
        n_used: n,
    method,
    })
}

fn prepare(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Numeric(
            "wilcoxon: all paired differences are zero".into(),
        ));
    }
    if diffs.len() < MIN_PAIRS {
        return Err(Error::Numeric(format!(
            "wilcoxon needs at least {MIN_PAIRS} nonzero differences, got {}",
            diffs.len()
        )));
    }
    Ok(diffs)
}

/// 1-based ranks of `|diffs|` with ties replaced by their average rank.
fn average_ranks(diffs: &[f64]) -> Vec<f64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        diffs[a]
            .abs()
            .partial_cmp(&diffs[b].abs())
            .expect("finite differences")
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p. The sign-flip distribution of W+ is enumerated by a
/// subset-sum count over the doubled ranks (doubling turns the half-integer
/// average ranks into integers); the distribution is symmetric, so the
/// two-sided p doubles the smaller tail.
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = r2.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &r2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let patterns = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let lower: u64 = counts[..=w2].iter().sum();
    let upper: u64 = counts[w2..].iter().sum();
    let tail = lower.min(upper) as f64 / patterns;
    (2.0 * tail).min(1.0)
}

/// Normal approximation: `W+ ~ N(S/2, sum(r_i^2)/4)` where `S` is the rank
/// total; using the realized ranks makes the variance tie-adjusted. A 0.5
/// continuity correction shrinks the deviation.
fn normal_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let s: f64 = ranks.iter().sum();
    let mu = s / 2.0;
    let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    let dev = ((w_plus - mu).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    (2.0 * standard_normal_cdf(-z)).min(1.0)
}

// ── Normal distribution helpers ─────────────────────────────────────────

/// Standard normal CDF via the Zelen & Severo polynomial (Abramowitz &
/// Stegun 26.2.17); absolute error below 7.5e-8.
pub fn standard_normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - standard_normal_cdf(-x);
    }
    let t = 1.0 / (1.0 + 0.2316419 * x);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - pdf * poly
}

/// Standard normal quantile via Acklam's rational approximation
/// (relative error below 1.15e-9 on (0, 1)).
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -standard_normal_quantile(1.0 - p)
    }
}

/// Ordinary least squares on `(x, y)` points; returns `(slope, r_squared)`.
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use approx::assert_abs_diff_eq;

    /// Brute force: all 2^n sign assignments over the realized ranks.
    fn enumeration_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
        let n = ranks.len();
        let mut le = 0u64;
        let mut ge = 0u64;
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if w <= w_plus + 1e-12 {
                le += 1;
            }
            if w >= w_plus - 1e-12 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64) / total).min(1.0)
    }

    #[test]
    fn identical_samples_error() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(wilcoxon_signed_rank(&x, &x).is_err());
    }

    #[test]
    fn too_few_nonzero_differences_error() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 2.0, 3.0, 4.0, 5.5];
        assert!(wilcoxon_signed_rank(&x, &y).is_err());
    }

    #[test]
    fn five_positive_differences_give_one_sixteenth() {
        // All five differences positive: W+ = 15, the most extreme of the
        // 32 sign patterns. One-sided exact p = 1/32, two-sided = 1/16.
        let x = [2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [1.0, 1.5, 2.0, 2.5, 3.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert_eq!(r.w_statistic, 15.0);
        assert_abs_diff_eq!(r.p_value, 1.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_matches_full_enumeration_n10() {
        let mut rng = SeededRng::new(42);
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let r = wilcoxon_signed_rank(&x, &y).unwrap();
            let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let ranks = average_ranks(&diffs);
            let want = enumeration_two_sided_p(&ranks, r.w_statistic);
            assert_abs_diff_eq!(r.p_value, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_handles_tied_magnitudes() {
        let x = [3.0, 3.0, 5.0, 1.0, 2.0, 4.0];
        let y = [1.0, 1.0, 1.0, 2.0, 4.0, 1.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let ranks = average_ranks(&diffs);
        let want = enumeration_two_sided_p(&ranks, r.w_statistic);
        assert_abs_diff_eq!(r.p_value, want, epsilon = 1e-12);
    }

    #[test]
    fn approximation_close_to_exact_at_n20() {
        let mut rng = SeededRng::new(7);
        for _ in 0..10 {
            let x: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..20).map(|_| 0.3 + rng.normal()).collect();
            let exact = wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::Exact).unwrap();
            let approx =
                wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::NormalApprox).unwrap();
            assert!(
                (exact.p_value - approx.p_value).abs() < 0.01,
                "exact {} vs approx {}",
                exact.p_value,
                approx.p_value
            );
        }
    }

    #[test]
    fn large_n_uses_normal_approximation() {
        let mut rng = SeededRng::new(8);
        let x: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApprox);
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_abs_diff_eq!(standard_normal_cdf(0.0), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(standard_normal_cdf(1.96), 0.9750021049, epsilon = 1e-7);
        assert_abs_diff_eq!(standard_normal_cdf(-1.0), 0.1586552539, epsilon = 1e-7);
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for &p in &[0.001, 0.025, 0.3, 0.5, 0.8, 0.975, 0.999] {
            let z = standard_normal_quantile(p);
            assert_abs_diff_eq!(standard_normal_cdf(z), p, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(standard_normal_quantile(0.975), 1.959964, epsilon = 1e-5);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 + 2.0 * i as f64)).collect();
        let (slope, r2) = linear_fit(&pts);
        assert_abs_diff_eq!(slope, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-12);
    }
}
