//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the library's numerics: the quadrature rule comes
//! from the eigen-decomposition of the Hermite Jacobi matrix, inverses and
//! determinants from LU, and every sum is an explicit loop.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{digamma, ln_gamma};

use svgpcr::crowd::{AnnotationSet, LabelPosterior};
use svgpcr::trainer::{SvgpcrModel, TrainConfig};

/// Gauss–Hermite nodes and weights (weight e^{−x²}) by Golub–Welsch.
pub fn golub_welsch(h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(h, h);
    for i in 1..h {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..h)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn lu_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().lu().try_inverse().expect("invertible")
}

fn lu_log_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().ln()
}

pub fn prob_argmax_reference(mu: &[f64], var: &[f64], k: usize, h: usize) -> f64 {
    let (nodes, weights) = golub_welsch(h);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut p = 0.0;
    for (t, w) in nodes.iter().zip(&weights) {
        let f = mu[k] + (2.0 * var[k]).sqrt() * t;
        let mut prod = 1.0;
        for j in 0..mu.len() {
            if j != k {
                prod *= std.cdf((f - mu[j]) / var[j].sqrt());
            }
        }
        p += w * prod;
    }
    p / std::f64::consts::PI.sqrt()
}

/// Term-by-term ELBO with every instance in the batch (scale 1).
#[derive(Debug, Clone, Copy)]
pub struct ReferenceElbo {
    pub annotation: f64,
    pub likelihood: f64,
    pub entropy: f64,
    pub gaussian_kl: f64,
    pub dirichlet_kl: f64,
    pub total: f64,
}

pub fn brute_force_elbo(model: &SvgpcrModel, x: &DMatrix<f64>, ann: &AnnotationSet) -> ReferenceElbo {
    let gp = &model.gp;
    let n = x.nrows();
    let m = gp.num_inducing();
    let kk = gp.num_classes();
    let d = gp.input_dim();
    let gamma = gp.kernel().variance();
    let sigma = gp.kernel().lengthscale();
    let z = gp.inducing();
    let kern = |a: &[f64], b: &[f64]| {
        let mut r2 = 0.0;
        for i in 0..d {
            r2 += (a[i] - b[i]) * (a[i] - b[i]);
        }
        gamma * (-r2 / (2.0 * sigma * sigma)).exp()
    };
    let row = |mat: &DMatrix<f64>, i: usize| -> Vec<f64> { (0..mat.ncols()).map(|c| mat[(i, c)]).collect() };

    let mut kzz = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            kzz[(i, j)] = kern(&row(z, i), &row(z, j));
        }
        kzz[(i, i)] += gp.jitter();
    }
    let kinv = lu_inverse(&kzz);
    let s: Vec<DMatrix<f64>> = (0..kk)
        .map(|k| {
            let l = gp.scale_factor(k);
            let mut s = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    for c in 0..m {
                        s[(i, j)] += l[(i, c)] * l[(j, c)];
                    }
                }
            }
            s
        })
        .collect();

    let eps = model.likelihood.epsilon();
    let h = model.likelihood.rule().len();
    let q = model.labels.matrix();
    let mut likelihood = 0.0;
    let mut entropy = 0.0;
    for nn in 0..n {
        let xn = row(x, nn);
        let kn: Vec<f64> = (0..m).map(|i| kern(&xn, &row(z, i))).collect();
        // a = K⁻¹ k_n
        let a: Vec<f64> = (0..m).map(|i| (0..m).map(|j| kinv[(i, j)] * kn[j]).sum()).collect();
        let mut mu = vec![0.0; kk];
        let mut var = vec![0.0; kk];
        for k in 0..kk {
            let mut quad_k = 0.0;
            let mut quad_s = 0.0;
            for i in 0..m {
                mu[k] += a[i] * gp.means()[(i, k)];
                quad_k += kn[i] * a[i];
                for j in 0..m {
                    quad_s += a[i] * s[k][(i, j)] * a[j];
                }
            }
            var[k] = gamma - quad_k + quad_s;
        }
        for k in 0..kk {
            let p = prob_argmax_reference(&mu, &var, k, h);
            let ve = p * (1.0 - eps).ln() + (1.0 - p) * (eps / (kk as f64 - 1.0)).ln();
            likelihood += q[(nn, k)] * ve;
            if q[(nn, k)] > 0.0 {
                entropy -= q[(nn, k)] * q[(nn, k)].ln();
            }
        }
    }

    let mut annotation = 0.0;
    for r in ann.records() {
        let alpha = model.crowd.alpha(r.annotator).unwrap();
        for k in 0..kk {
            let col: f64 = (0..kk).map(|c| alpha[(c, k)]).sum();
            annotation += r.count as f64 * q[(r.instance, k)] * (digamma(alpha[(r.label, k)]) - digamma(col));
        }
    }

    let log_det_k = lu_log_det(&kzz);
    let mut gaussian_kl = 0.0;
    for k in 0..kk {
        let mut trace = 0.0;
        let mut maha = 0.0;
        for i in 0..m {
            for j in 0..m {
                trace += kinv[(i, j)] * s[k][(j, i)];
                maha += gp.means()[(i, k)] * kinv[(i, j)] * gp.means()[(j, k)];
            }
        }
        gaussian_kl += 0.5 * (trace + maha - m as f64 + log_det_k - lu_log_det(&s[k]));
    }

    let prior = model.crowd.prior();
    let mut dirichlet_kl = 0.0;
    for a in 0..model.crowd.num_annotators() {
        let post = model.crowd.alpha(a).unwrap();
        for j in 0..kk {
            let sp: f64 = (0..kk).map(|i| post[(i, j)]).sum();
            let s0: f64 = (0..kk).map(|i| prior[(i, j)]).sum();
            dirichlet_kl += ln_gamma(sp) - ln_gamma(s0);
            for i in 0..kk {
                dirichlet_kl += ln_gamma(prior[(i, j)]) - ln_gamma(post[(i, j)])
                    + (post[(i, j)] - prior[(i, j)]) * (digamma(post[(i, j)]) - digamma(sp));
            }
        }
    }

    ReferenceElbo {
        annotation,
        likelihood,
        entropy,
        gaussian_kl,
        dirichlet_kl,
        total: annotation + likelihood + entropy - gaussian_kl - dirichlet_kl,
    }
}

/// A small random problem with every parameter group moved off its initial
/// value and random (normalized) responsibilities.
pub fn random_problem(
    n: usize,
    k: usize,
    m: usize,
    a: usize,
    d: usize,
    seed: u64,
) -> (DMatrix<f64>, AnnotationSet, SvgpcrModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
    let mut triples = Vec::new();
    for i in 0..n {
        for ann in 0..a {
            if rng.random::<f64>() < 0.8 {
                triples.push((i as i64, ann as i64, rng.random_range(0..k) as i64));
            }
        }
    }
    // every annotator present at least once
    for ann in 0..a {
        triples.push((rng.random_range(0..n) as i64, ann as i64, rng.random_range(0..k) as i64));
    }
    let mut set = AnnotationSet::from_triples(triples).unwrap();
    set.bind(n).unwrap();
    let cfg = TrainConfig {
        num_inducing: m,
        minibatch_size: n,
        ..TrainConfig::default()
    };
    let mut model = SvgpcrModel::init(&x, k, a, &cfg, &mut rng).unwrap();
    let mut p = model.pack();
    for v in p.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    model.unpack(&p);
    let raw = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.05..1.0));
    let q = DMatrix::from_fn(n, k, |i, j| raw[(i, j)] / raw.row(i).sum());
    model.labels = LabelPosterior::from_matrix(q).unwrap();
    (x, set, model)
}
