//! Squared-exponential kernel and jittered Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvgpcrError};

/// Largest diagonal jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-2;

/// Isotropic squared-exponential kernel `γ·exp(−‖x−y‖²/(2σ²))`.
///
/// Both hyperparameters are stored on the log scale so that unconstrained
/// gradient steps keep them positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub log_variance: f64,
    pub log_lengthscale: f64,
}

/// Gradients of a scalar objective with respect to the log-hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KernelGrad {
    pub log_variance: f64,
    pub log_lengthscale: f64,
}

impl std::ops::AddAssign for KernelGrad {
    fn add_assign(&mut self, rhs: Self) {
        self.log_variance += rhs.log_variance;
        self.log_lengthscale += rhs.log_lengthscale;
    }
}

impl SeKernel {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(SvgpcrError::InvalidInput(format!(
                "kernel hyperparameters must be positive and finite (variance={variance}, lengthscale={lengthscale})"
            )));
        }
        Ok(Self {
            log_variance: variance.ln(),
            log_lengthscale: lengthscale.ln(),
        })
    }

    /// Default initialization: unit variance, lengthscale √D.
    pub fn default_for_dim(dim: usize) -> Self {
        Self {
            log_variance: 0.0,
            log_lengthscale: 0.5 * (dim.max(1) as f64).ln(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let ls = self.lengthscale();
        self.variance() * (-sq / (2.0 * ls * ls)).exp()
    }

    /// Cross-covariance matrix between the rows of `a` (n×D) and `b` (m×D).
    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_inputs(a, "first")?;
        check_inputs(b, "second")?;
        if a.ncols() != b.ncols() {
            return Err(SvgpcrError::Shape(format!(
                "kernel inputs have {} and {} columns",
                a.ncols(),
                b.ncols()
            )));
        }
        let var = self.variance();
        let inv_two_ls2 = 1.0 / (2.0 * self.lengthscale().powi(2));
        let same = std::ptr::eq(a, b);
        let mut out = DMatrix::zeros(a.nrows(), b.nrows());
        for i in 0..a.nrows() {
            let start = if same { i } else { 0 };
            for j in start..b.nrows() {
                let mut sq = 0.0;
                for d in 0..a.ncols() {
                    let diff = a[(i, d)] - b[(j, d)];
                    sq += diff * diff;
                }
                let v = var * (-sq * inv_two_ls2).exp();
                out[(i, j)] = v;
                if same {
                    out[(j, i)] = v;
                }
            }
        }
        Ok(out)
    }

    /// Backpropagates an upstream gradient `upstream = ∂J/∂K(a, b)` through
    /// the kernel. Input gradients are accumulated into `grad_a` / `grad_b`
    /// when given.
    pub fn backward(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        kmat: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
        mut grad_a: Option<&mut DMatrix<f64>>,
        mut grad_b: Option<&mut DMatrix<f64>>,
    ) -> KernelGrad {
        let inv_ls2 = 1.0 / self.lengthscale().powi(2);
        let mut grad = KernelGrad::default();
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let gk = upstream[(i, j)] * kmat[(i, j)];
                if gk == 0.0 {
                    continue;
                }
                let mut sq = 0.0;
                for d in 0..a.ncols() {
                    let diff = a[(i, d)] - b[(j, d)];
                    sq += diff * diff;
                    let g = gk * diff * inv_ls2;
                    if let Some(ga) = grad_a.as_deref_mut() {
                        ga[(i, d)] -= g;
                    }
                    if let Some(gb) = grad_b.as_deref_mut() {
                        gb[(j, d)] += g;
                    }
                }
                grad.log_variance += gk;
                grad.log_lengthscale += gk * sq * inv_ls2;
            }
        }
        grad
    }
}

fn check_inputs(x: &DMatrix<f64>, which: &str) -> Result<()> {
    if x.ncols() == 0 {
        return Err(SvgpcrError::InvalidInput(format!("{which} kernel input has zero columns")));
    }
    for (r, row) in x.row_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SvgpcrError::InvalidInput(format!(
                "{which} kernel input has a non-finite value in row {r}"
            )));
        }
    }
    Ok(())
}

/// Lower Cholesky factor of `K + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Solves `(K + jitter·I) x = b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Factorizes `K + jitter·I`, starting from `base_jitter` and multiplying by
/// ten on each failure until [`MAX_JITTER`] is exceeded.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(SvgpcrError::Shape(format!("cholesky of a {}x{} matrix", n, k.ncols())));
    }
    if !(base_jitter > 0.0) || base_jitter > MAX_JITTER {
        return Err(SvgpcrError::InvalidConfig(format!(
            "base jitter must lie in (0, {MAX_JITTER}], got {base_jitter}"
        )));
    }
    let scale = k.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (k[(i, j)] - k[(j, i)]).abs() > 1e-8 * scale {
                return Err(SvgpcrError::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    k[(i, j)],
                    k[(j, i)]
                )));
            }
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(SvgpcrError::Numerical {
            term: "cholesky",
            detail: "matrix contains non-finite entries".into(),
        });
    }

    let mut jitter = base_jitter;
    loop {
        let mut shifted = k.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let l = chol.l_dirty();
            if (0..n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return Ok(CholeskyFactor {
                    chol,
                    jitter_used: jitter,
                });
            }
        }
        if jitter >= MAX_JITTER {
            let min_diag = (0..n).map(|i| k[(i, i)]).fold(f64::INFINITY, f64::min);
            return Err(SvgpcrError::Numerical {
                term: "cholesky",
                detail: format!(
                    "matrix of size {n} not positive definite even with jitter {jitter:e} \
                     (smallest diagonal entry {min_diag:e}, largest magnitude {scale:e})"
                ),
            });
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    }
}
