//! Robust-max multi-class likelihood evaluated by Gauss-Hermite quadrature.
//!
//! Under independent Gaussian marginals `f_j ~ N(μ_j, v_j)` the probability
//! that class `k` holds the argmax is a one-dimensional integral over `f_k`:
//!
//! ```text
//! P(k = argmax) = ∫ N(f; μ_k, v_k) ∏_{j≠k} Φ((f − μ_j)/√v_j) df
//! ```
//!
//! which is evaluated with the physicists' Gauss-Hermite rule after the
//! substitution `f = μ_k + √(2 v_k)·x`. The robust-max likelihood assigns
//! `1−ε` to the argmax class and `ε/(K−1)` to every other class, so both the
//! variational expectation and the predictive class probability are affine in
//! this argmax probability.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvgpcrError};
use crate::special::{norm_cdf, norm_pdf};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_QUADRATURE_POINTS: usize = 20;
pub const MAX_QUADRATURE_POINTS: usize = 128;

/// Gauss-Hermite nodes and weights for the weight function `e^{−x²}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[g(X)]` for `X ~ N(mean, var)`.
    pub fn gaussian_expectation(&self, mean: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * var).sqrt();
        let s: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * g(mean + scale * x))
            .sum();
        s / PI.sqrt()
    }
}

/// Gauss-Hermite rule of order `h`, computed by Newton iteration on the
/// orthonormal Hermite recurrence.
pub fn gauss_hermite(h: usize) -> Result<QuadratureRule> {
    if !(2..=MAX_QUADRATURE_POINTS).contains(&h) {
        return Err(SvgpcrError::InvalidConfig(format!(
            "quadrature order must be in 2..={MAX_QUADRATURE_POINTS}, got {h}"
        )));
    }
    let n = h;
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0_f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    x.reverse();
    w.reverse();
    Ok(QuadratureRule {
        nodes: x,
        weights: w,
    })
}

/// Probability that `f_k` is the largest of independent Gaussians.
pub fn prob_argmax(means: &[f64], variances: &[f64], k: usize, rule: &QuadratureRule) -> f64 {
    let kk = means.len();
    let sd_k = (2.0 * variances[k]).sqrt();
    let inv_sd: Vec<f64> = variances.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut total = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let f = means[k] + sd_k * x;
        let mut prod = 1.0;
        for j in 0..kk {
            if j != k {
                prod *= norm_cdf((f - means[j]) * inv_sd[j]);
            }
        }
        total += w * prod;
    }
    total / PI.sqrt()
}

/// Argmax probabilities for one instance together with their derivatives.
///
/// `d_mean[(k, j)] = ∂p_k/∂μ_j` and `d_var[(k, j)] = ∂p_k/∂v_j`.
#[derive(Debug, Clone)]
pub struct ArgmaxJacobian {
    pub probs: Vec<f64>,
    pub d_mean: DMatrix<f64>,
    pub d_var: DMatrix<f64>,
}

/// Argmax probabilities and their exact derivatives through the quadrature
/// formula (nodes held fixed).
pub fn prob_argmax_jacobian(means: &[f64], variances: &[f64], rule: &QuadratureRule) -> ArgmaxJacobian {
    let kk = means.len();
    let inv_sqrt_pi = 1.0 / PI.sqrt();
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let mut probs = vec![0.0; kk];
    let mut d_mean = DMatrix::zeros(kk, kk);
    let mut d_var = DMatrix::zeros(kk, kk);
    let mut z = vec![0.0; kk];
    let mut cdf = vec![1.0; kk];
    let mut pdf = vec![0.0; kk];
    let mut prefix = vec![1.0; kk + 1];
    let mut suffix = vec![1.0; kk + 1];
    for k in 0..kk {
        let scale_k = (2.0 * variances[k]).sqrt();
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let wq = w * inv_sqrt_pi;
            let f = means[k] + scale_k * x;
            for j in 0..kk {
                if j == k {
                    cdf[j] = 1.0;
                    pdf[j] = 0.0;
                    z[j] = 0.0;
                } else {
                    z[j] = (f - means[j]) / sd[j];
                    cdf[j] = norm_cdf(z[j]);
                    pdf[j] = norm_pdf(z[j]);
                }
            }
            for j in 0..kk {
                prefix[j + 1] = prefix[j] * cdf[j];
            }
            for j in (0..kk).rev() {
                suffix[j] = suffix[j + 1] * cdf[j];
            }
            probs[k] += wq * prefix[kk];
            // df/dv_k at this node
            let df_dvk = x / scale_k;
            for j in 0..kk {
                if j == k {
                    continue;
                }
                // ∂(∏Φ)/∂z_j
                let g = wq * prefix[j] * suffix[j + 1] * pdf[j];
                let inv = 1.0 / sd[j];
                d_mean[(k, k)] += g * inv;
                d_mean[(k, j)] -= g * inv;
                d_var[(k, k)] += g * inv * df_dvk;
                d_var[(k, j)] -= g * z[j] / (2.0 * variances[j]);
            }
        }
    }
    ArgmaxJacobian {
        probs,
        d_mean,
        d_var,
    }
}

/// Robust-max likelihood with fixed label-noise level ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustMax {
    epsilon: f64,
    num_classes: usize,
    rule: QuadratureRule,
}

impl RobustMax {
    pub fn new(num_classes: usize, epsilon: f64, quadrature_points: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(SvgpcrError::InvalidConfig(format!(
                "robust-max needs at least 2 classes, got {num_classes}"
            )));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(SvgpcrError::InvalidConfig(format!(
                "robust-max epsilon must be in (0, 1), got {epsilon}"
            )));
        }
        Ok(Self {
            epsilon,
            num_classes,
            rule: gauss_hermite(quadrature_points)?,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    /// `log(1−ε)`, the log-likelihood of the argmax class.
    pub fn log_hit(&self) -> f64 {
        (-self.epsilon).ln_1p()
    }

    /// `log(ε/(K−1))`, the log-likelihood of any other class.
    pub fn log_miss(&self) -> f64 {
        (self.epsilon / (self.num_classes as f64 - 1.0)).ln()
    }

    fn check_shapes(&self, means: &DMatrix<f64>, variances: &DMatrix<f64>) -> Result<()> {
        if means.shape() != variances.shape() || means.ncols() != self.num_classes {
            return Err(SvgpcrError::Shape(format!(
                "means {:?} and variances {:?} must both be n x {}",
                means.shape(),
                variances.shape(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// `E_{q(f_n)}[log p(e_k | f_n)]` for every instance and class.
    pub fn variational_expectation(&self, means: &DMatrix<f64>, variances: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shapes(means, variances)?;
        let (hit, miss) = (self.log_hit(), self.log_miss());
        let kk = self.num_classes;
        let mut out = DMatrix::zeros(means.nrows(), kk);
        let mut mu = vec![0.0; kk];
        let mut var = vec![0.0; kk];
        for n in 0..means.nrows() {
            for k in 0..kk {
                mu[k] = means[(n, k)];
                var[k] = variances[(n, k)];
            }
            for k in 0..kk {
                let p = prob_argmax(&mu, &var, k, &self.rule);
                out[(n, k)] = p * hit + (1.0 - p) * miss;
            }
        }
        Ok(out)
    }

    /// Predictive class probabilities, rows renormalized to sum to one.
    pub fn predict_class_probs(&self, means: &DMatrix<f64>, variances: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_shapes(means, variances)?;
        let kk = self.num_classes;
        let off = self.epsilon / (kk as f64 - 1.0);
        let mut out = DMatrix::zeros(means.nrows(), kk);
        let mut mu = vec![0.0; kk];
        let mut var = vec![0.0; kk];
        for n in 0..means.nrows() {
            for k in 0..kk {
                mu[k] = means[(n, k)];
                var[k] = variances[(n, k)];
            }
            let mut row_sum = 0.0;
            for k in 0..kk {
                let p = prob_argmax(&mu, &var, k, &self.rule);
                let v = p * (1.0 - self.epsilon) + (1.0 - p) * off;
                out[(n, k)] = v;
                row_sum += v;
            }
            for k in 0..kk {
                out[(n, k)] /= row_sum;
            }
        }
        Ok(out)
    }

    /// Value and gradient of `Σ_n Σ_k w_{nk}·E[log p(e_k | f_n)]` with respect
    /// to the marginal means and variances.
    pub fn weighted_expectation_grad(
        &self,
        means: &DMatrix<f64>,
        variances: &DMatrix<f64>,
        weights: &DMatrix<f64>,
    ) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
        self.check_shapes(means, variances)?;
        let kk = self.num_classes;
        let (hit, miss) = (self.log_hit(), self.log_miss());
        let slope = hit - miss;
        let mut value = 0.0;
        let mut g_mean = DMatrix::zeros(means.nrows(), kk);
        let mut g_var = DMatrix::zeros(means.nrows(), kk);
        let mut mu = vec![0.0; kk];
        let mut var = vec![0.0; kk];
        for n in 0..means.nrows() {
            for k in 0..kk {
                mu[k] = means[(n, k)];
                var[k] = variances[(n, k)];
            }
            let jac = prob_argmax_jacobian(&mu, &var, &self.rule);
            for k in 0..kk {
                let w = weights[(n, k)];
                if w == 0.0 {
                    continue;
                }
                value += w * (jac.probs[k] * hit + (1.0 - jac.probs[k]) * miss);
                for j in 0..kk {
                    g_mean[(n, j)] += w * slope * jac.d_mean[(k, j)];
                    g_var[(n, j)] += w * slope * jac.d_var[(k, j)];
                }
            }
        }
        Ok((value, g_mean, g_var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn two_point_rule_closed_form() {
        let r = gauss_hermite(2).unwrap();
        let s = 0.5f64.sqrt();
        assert!((r.nodes()[0] + s).abs() < 1e-14);
        assert!((r.nodes()[1] - s).abs() < 1e-14);
        for w in r.weights() {
            assert!((w - PI.sqrt() / 2.0).abs() < 1e-14);
        }
        // exact for x² against e^{-x²}
        let est: f64 = r.nodes().iter().zip(r.weights()).map(|(x, w)| w * x * x).sum();
        assert!((est - PI.sqrt() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn fourth_moment_of_standard_normal() {
        let r = gauss_hermite(20).unwrap();
        let m4 = r.gaussian_expectation(0.0, 1.0, |x| x.powi(4));
        assert!((m4 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn order_out_of_range() {
        assert!(matches!(gauss_hermite(1), Err(SvgpcrError::InvalidConfig(_))));
        assert!(matches!(gauss_hermite(129), Err(SvgpcrError::InvalidConfig(_))));
    }

    #[test]
    fn weights_sum_to_sqrt_pi_and_nodes_are_symmetric() {
        for h in [2, 3, 7, 20, 21, 64, 100, 128] {
            let r = gauss_hermite(h).unwrap();
            let s: f64 = r.weights().iter().sum();
            assert!((s - PI.sqrt()).abs() / PI.sqrt() < 1e-12, "h={h} sum={s}");
            assert!(r.weights().iter().all(|w| *w > 0.0));
            for i in 0..h {
                assert!((r.nodes()[i] + r.nodes()[h - 1 - i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_means_give_uniform_argmax() {
        // the 20-point rule reaches 1e-6 up to K=5; K=10 needs 30 nodes
        for (kk, h) in [(2, 20), (3, 20), (5, 20), (10, 30)] {
            let r = gauss_hermite(h).unwrap();
            let mu = vec![0.3; kk];
            let var = vec![1.2; kk];
            for k in 0..kk {
                assert!((prob_argmax(&mu, &var, k, &r) - 1.0 / kk as f64).abs() < 1e-6, "K={kk}");
            }
        }
    }

    #[test]
    fn dominant_mean_wins() {
        let r = gauss_hermite(20).unwrap();
        let mu = [10.0, 0.0, -0.5];
        assert!(prob_argmax(&mu, &[1.0; 3], 0, &r) >= 1.0 - 1e-6);
    }

    #[test]
    fn binary_closed_form() {
        let r = gauss_hermite(20).unwrap();
        let p = prob_argmax(&[1.0, 0.0], &[1.0, 1.0], 0, &r);
        assert!((p - 0.760_249_938_906_523_5).abs() < 1e-5, "p={p}");
        assert!((p - norm_cdf(1.0 / 2f64.sqrt())).abs() < 1e-5);
    }

    #[test]
    fn expectation_extremes() {
        let lik = RobustMax::new(10, 1e-3, 20).unwrap();
        assert!((lik.log_hit() - (-0.001_000_500_333_583_5)).abs() < 1e-12);
        assert!((lik.log_miss() - (1e-3f64 / 9.0).ln()).abs() < 1e-12);
        assert!((lik.log_miss() + 9.104_979_856_318_357).abs() < 1e-9);
    }

    #[test]
    fn symmetric_rows_have_identical_expectations() {
        let lik = RobustMax::new(4, 1e-3, 20).unwrap();
        let means = DMatrix::from_element(2, 4, 0.7);
        let vars = DMatrix::from_element(2, 4, 0.4);
        let ve = lik.variational_expectation(&means, &vars).unwrap();
        for n in 0..2 {
            for k in 1..4 {
                assert!((ve[(n, k)] - ve[(n, 0)]).abs() < 1e-12);
            }
        }
        let probs = lik.predict_class_probs(&means, &vars).unwrap();
        for v in probs.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_class_prediction_is_smoothed_one_hot() {
        let lik = RobustMax::new(3, 1e-3, 20).unwrap();
        let means = DMatrix::from_row_slice(1, 3, &[0.0, 15.0, 0.0]);
        let vars = DMatrix::from_element(1, 3, 1.0);
        let p = lik.predict_class_probs(&means, &vars).unwrap();
        assert!((p[(0, 1)] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[(0, 0)] - 5e-4).abs() < 1e-9);
    }

    #[test]
    fn binary_prediction_matches_closed_form_mixture() {
        let lik = RobustMax::new(2, 1e-3, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let v = [rng.random_range(0.6..1.5), rng.random_range(0.6..1.5)];
            let means = DMatrix::from_row_slice(1, 2, &m);
            let vars = DMatrix::from_row_slice(1, 2, &v);
            let probs = lik.predict_class_probs(&means, &vars).unwrap();
            let p = norm_cdf((m[0] - m[1]) / (v[0] + v[1]).sqrt());
            let expected = p * (1.0 - 1e-3) + (1.0 - p) * 1e-3;
            assert!((probs[(0, 0)] - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let r = gauss_hermite(20).unwrap();
        let mu = [0.3, -0.2, 0.9, 0.1];
        let var = [0.7, 1.3, 0.4, 2.0];
        let jac = prob_argmax_jacobian(&mu, &var, &r);
        let h = 1e-6;
        for k in 0..4 {
            assert!((jac.probs[k] - prob_argmax(&mu, &var, k, &r)).abs() < 1e-14);
            for j in 0..4 {
                let mut mp = mu;
                mp[j] += h;
                let mut mm = mu;
                mm[j] -= h;
                let fd = (prob_argmax(&mp, &var, k, &r) - prob_argmax(&mm, &var, k, &r)) / (2.0 * h);
                assert!((fd - jac.d_mean[(k, j)]).abs() < 1e-8, "mean k={k} j={j}");
                let mut vp = var;
                vp[j] += h;
                let mut vm = var;
                vm[j] -= h;
                let fd = (prob_argmax(&mu, &vp, k, &r) - prob_argmax(&mu, &vm, k, &r)) / (2.0 * h);
                assert!((fd - jac.d_var[(k, j)]).abs() < 1e-8, "var k={k} j={j}");
            }
        }
    }

    #[test]
    fn agrees_with_monte_carlo() {
        let r = gauss_hermite(20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kk in [3usize, 10] {
            let mu: Vec<f64> = (0..kk).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..kk).map(|_| rng.random_range(0.5..1.5)).collect();
            let samples = 200_000;
            let mut counts = vec![0usize; kk];
            for _ in 0..samples {
                let mut best = (f64::NEG_INFINITY, 0);
                for j in 0..kk {
                    let z: f64 = rng.sample(StandardNormal);
                    let f = mu[j] + var[j].sqrt() * z;
                    if f > best.0 {
                        best = (f, j);
                    }
                }
                counts[best.1] += 1;
            }
            for k in 0..kk {
                let mc = counts[k] as f64 / samples as f64;
                let se = (mc * (1.0 - mc) / samples as f64).sqrt().max(1e-6);
                let p = prob_argmax(&mu, &var, k, &r);
                assert!((p - mc).abs() < 4.0 * se, "K={kk} k={k} quad={p} mc={mc}");
            }
        }
    }

    proptest! {
        #[test]
        fn argmax_probabilities_sum_to_one(
            kk in 2usize..=15,
            seed in any::<u64>(),
        ) {
            // 20 nodes leave errors near 4e-4 at K=15 for these ranges
            let r = gauss_hermite(64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu: Vec<f64> = (0..kk).map(|_| rng.random_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..kk).map(|_| rng.random_range(0.5..2.0)).collect();
            let total: f64 = (0..kk).map(|k| prob_argmax(&mu, &var, k, &r)).sum();
            prop_assert!((total - 1.0).abs() < 1e-5, "total={}", total);
        }

        #[test]
        fn expectation_within_bounds(
            kk in 2usize..=8,
            seed in any::<u64>(),
        ) {
            let lik = RobustMax::new(kk, 1e-3, 20).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let means = DMatrix::from_fn(3, kk, |_, _| rng.random_range(-4.0..4.0));
            let vars = DMatrix::from_fn(3, kk, |_, _| rng.random_range(0.01..4.0));
            let ve = lik.variational_expectation(&means, &vars).unwrap();
            for v in ve.iter() {
                prop_assert!(*v < 0.0);
                prop_assert!(*v >= lik.log_miss() - 1e-9 && *v <= lik.log_hit() + 1e-9);
            }
        }

        #[test]
        fn argmax_increases_with_own_mean(
            kk in 2usize..=6,
            seed in any::<u64>(),
        ) {
            let r = gauss_hermite(20).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu: Vec<f64> = (0..kk).map(|_| rng.random_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..kk).map(|_| rng.random_range(0.5..2.0)).collect();
            let jac = prob_argmax_jacobian(&mu, &var, &r);
            for k in 0..kk {
                prop_assert!(jac.d_mean[(k, k)] > 0.0);
                let mut up = mu.clone();
                up[k] += 1e-3;
                prop_assert!(prob_argmax(&up, &var, k, &r) > prob_argmax(&mu, &var, k, &r));
            }
        }
    }
}
