//! Scalar math routed through `libm` so the crate stays `no_std` and results
//! do not depend on the platform's libm.

#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline(always)]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline(always)]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline(always)]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline(always)]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline(always)]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline(always)]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// ln(1 + e^x) without overflow for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Logistic function, stable on both tails.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Sum in a fixed pairwise (tree) order. Deterministic and far less prone to
/// cancellation drift than a running sum; metric accumulation goes through
/// this so results are independent of any future evaluation-order changes.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for i in -40..=40 {
            let x = i as f64 * 0.5;
            let naive = ln(1.0 + exp(x));
            assert!((softplus(x) - naive).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn softplus_stable_at_extremes() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-800.0) < 1e-300);
    }

    #[test]
    fn sigmoid_symmetry() {
        for i in -30..=30 {
            let x = i as f64 * 0.7;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let v: alloc::vec::Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 500500.0);
    }
}
