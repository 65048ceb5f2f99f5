//! Small statistics helpers for experiment aggregation and tests.

use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two
/// values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Critical value of the chi-squared distribution: the quantile at
/// `1 - significance`.
pub fn chi_square_critical(dof: usize, significance: f64) -> f64 {
    ChiSquared::new(dof as f64).unwrap().inverse_cdf(1.0 - significance)
}

/// One-sided paired t-test p-value for the hypothesis `mean(a - b) > 0`.
///
/// Returns 1.0 when the difference is degenerate (all-equal pairs) and
/// not positive.
pub fn paired_t_test_greater(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired test needs equal-length samples");
    let n = a.len();
    assert!(n >= 2, "paired test needs at least two pairs");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let s = std_dev(&diffs);
    if s == 0.0 {
        return if m > 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / (s / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
    1.0 - dist.cdf(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((std_dev(&v) - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(std_dev(&[7.0]), 0.0);
    }

    #[test]
    fn chi_square_critical_known_value() {
        // 0.99 quantile at 3 degrees of freedom is 11.345 (standard table)
        let c = chi_square_critical(3, 0.01);
        assert!((c - 11.345).abs() < 0.01, "got {c}");
    }

    #[test]
    fn paired_test_detects_clear_difference() {
        let a = [0.9, 0.92, 0.91, 0.93, 0.9, 0.94, 0.92, 0.91, 0.9, 0.93];
        let b = [0.8, 0.82, 0.81, 0.83, 0.8, 0.84, 0.82, 0.81, 0.8, 0.83];
        assert!(paired_t_test_greater(&a, &b) < 1e-6);
        assert!(paired_t_test_greater(&b, &a) > 0.999);
    }

    #[test]
    fn degenerate_pairs() {
        let a = [1.0, 1.0, 1.0];
        let b = [0.5, 0.5, 0.5];
        assert_eq!(paired_t_test_greater(&a, &b), 0.0);
        assert_eq!(paired_t_test_greater(&a, &a.clone()), 1.0);
    }
}
