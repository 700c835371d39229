//! Scalar special functions used by the likelihood and crowd layers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Derivative of the digamma function.
///
/// Shifts the argument above 10 with the recurrence ψ'(x) = ψ'(x+1) + 1/x², then
/// applies the asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x²) + Σ B_{2k} / x^{2k+1}
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                + inv2
                    * (-1.0 / 30.0
                        + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0)))));
    acc + series
}

/// Log of the multivariate beta function, log Γ(αᵢ) summed minus log Γ(Σ αᵢ).
pub fn ln_multivariate_beta(alpha: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = alpha.clone().sum();
    alpha.map(ln_gamma).sum::<f64>() - ln_gamma(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digamma_recurrence_is_exact_at_integers() {
        assert!((digamma(2.0) - digamma(1.0) - 1.0).abs() < 1e-13);
        assert!((digamma(4.0) - digamma(3.0) - 1.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn trigamma_matches_known_values() {
        // ψ'(1) = π²/6, ψ'(1/2) = π²/2
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-11);
    }

    #[test]
    fn trigamma_is_the_derivative_of_digamma() {
        for &x in &[0.03f64, 0.4, 1.7, 5.5, 13.0, 250.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            let rel = (fd - trigamma(x)).abs() / trigamma(x);
            assert!(rel < 1e-6, "x={x} fd={fd} tri={}", trigamma(x));
        }
    }

    #[test]
    fn normal_cdf_symmetry() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        for &z in &[0.3, 1.0, 2.5, 7.0] {
            assert!((norm_cdf(z) + norm_cdf(-z) - 1.0).abs() < 1e-14);
        }
    }
}
