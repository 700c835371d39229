//! Inducing-point variational posterior `q(u_k) = N(m_k, S_k)` for the K
//! latent functions, with shared inducing inputs and a shared SE kernel.
//!
//! The parameterization is non-whitened. Each `S_k` is stored through its
//! lower Cholesky factor with the diagonal kept on the log scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvgpcrError};
use crate::kernel::{cholesky_with_jitter, CholeskyFactor, KernelGrad, SeKernel};

/// Lower bound applied to marginal variances after cancellation.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalGp {
    inducing: DMatrix<f64>,
    means: DMatrix<f64>,
    /// Lower-triangular; the diagonal holds `log L_ii`.
    scale_raw: Vec<DMatrix<f64>>,
    kernel: SeKernel,
    jitter: f64,
}

/// Per-instance, per-class marginals of `q(f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGaussians {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

/// Gradient of a scalar objective with respect to the unconstrained GP
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GpGrad {
    pub means: DMatrix<f64>,
    pub scale_raw: Vec<DMatrix<f64>>,
    pub inducing: DMatrix<f64>,
    pub kernel: KernelGrad,
}

impl GpGrad {
    pub fn zeros(m: usize, k: usize, d: usize) -> Self {
        Self {
            means: DMatrix::zeros(m, k),
            scale_raw: vec![DMatrix::zeros(m, m); k],
            inducing: DMatrix::zeros(m, d),
            kernel: KernelGrad::default(),
        }
    }

    pub fn add_scaled(&mut self, other: &GpGrad, scale: f64) {
        self.means += &other.means * scale;
        for (a, b) in self.scale_raw.iter_mut().zip(&other.scale_raw) {
            *a += b * scale;
        }
        self.inducing += &other.inducing * scale;
        self.kernel.log_variance += other.kernel.log_variance * scale;
        self.kernel.log_lengthscale += other.kernel.log_lengthscale * scale;
    }
}

/// Prior covariance of the inducing values and its factorization.
#[derive(Debug, Clone)]
pub struct InducingPrior {
    pub kzz: DMatrix<f64>,
    pub chol: CholeskyFactor,
}

/// Intermediate quantities of a marginal evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MarginalCache {
    kzx: DMatrix<f64>,
    /// `K_zz⁻¹ K_zx`, one column per instance.
    proj: DMatrix<f64>,
    /// `L_kᵀ proj` per class.
    scaled_proj: Vec<DMatrix<f64>>,
    clamped: DMatrix<bool>,
}

impl VariationalGp {
    /// Fresh posterior with `m_k = 0` and `S_k = I`.
    pub fn new(inducing: DMatrix<f64>, num_classes: usize, kernel: SeKernel, jitter: f64) -> Result<Self> {
        let m = inducing.nrows();
        if m == 0 || inducing.ncols() == 0 {
            return Err(SvgpcrError::InvalidInput(format!(
                "inducing inputs must be non-empty, got {:?}",
                inducing.shape()
            )));
        }
        if num_classes < 2 {
            return Err(SvgpcrError::InvalidInput(format!("need at least 2 classes, got {num_classes}")));
        }
        if inducing.iter().any(|v| !v.is_finite()) {
            return Err(SvgpcrError::InvalidInput("inducing inputs contain non-finite values".into()));
        }
        Ok(Self {
            inducing,
            means: DMatrix::zeros(m, num_classes),
            scale_raw: vec![DMatrix::zeros(m, m); num_classes],
            kernel,
            jitter,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.means.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.ncols()
    }

    pub fn inducing(&self) -> &DMatrix<f64> {
        &self.inducing
    }

    pub fn inducing_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.inducing
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn means_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.means
    }

    pub fn kernel(&self) -> &SeKernel {
        &self.kernel
    }

    pub fn kernel_mut(&mut self) -> &mut SeKernel {
        &mut self.kernel
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn scale_raw(&self) -> &[DMatrix<f64>] {
        &self.scale_raw
    }

    pub fn scale_raw_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.scale_raw
    }

    /// `L_k` with its diagonal mapped back through `exp`.
    pub fn scale_factor(&self, k: usize) -> DMatrix<f64> {
        let raw = &self.scale_raw[k];
        let m = raw.nrows();
        DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => raw[(i, j)],
            std::cmp::Ordering::Equal => raw[(i, i)].exp(),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    /// Sets `S_k = L Lᵀ` from a lower-triangular factor with positive diagonal.
    pub fn set_scale_factor(&mut self, k: usize, l: &DMatrix<f64>) -> Result<()> {
        let m = self.num_inducing();
        if l.shape() != (m, m) {
            return Err(SvgpcrError::Shape(format!("scale factor must be {m}x{m}, got {:?}", l.shape())));
        }
        let mut raw = DMatrix::zeros(m, m);
        for i in 0..m {
            if !(l[(i, i)] > 0.0) {
                return Err(SvgpcrError::InvalidInput(format!(
                    "scale factor diagonal must be positive, entry {i} is {}",
                    l[(i, i)]
                )));
            }
            raw[(i, i)] = l[(i, i)].ln();
            for j in 0..i {
                raw[(i, j)] = l[(i, j)];
            }
        }
        self.scale_raw[k] = raw;
        Ok(())
    }

    pub fn covariance(&self, k: usize) -> DMatrix<f64> {
        let l = self.scale_factor(k);
        &l * l.transpose()
    }

    pub fn prior(&self) -> Result<InducingPrior> {
        let kzz = self.kernel.matrix(&self.inducing, &self.inducing)?;
        let chol = cholesky_with_jitter(&kzz, self.jitter)?;
        Ok(InducingPrior { kzz, chol })
    }

    /// Marginals of `q(f_n)` at the rows of `x`.
    pub fn marginals(&self, x: &DMatrix<f64>) -> Result<MarginalGaussians> {
        let prior = self.prior()?;
        Ok(self.marginals_with(&prior, x)?.0)
    }

    /// Marginals at test inputs; identical to [`marginals`](Self::marginals).
    pub fn predict_latent(&self, x: &DMatrix<f64>) -> Result<MarginalGaussians> {
        self.marginals(x)
    }

    pub fn marginals_with(&self, prior: &InducingPrior, x: &DMatrix<f64>) -> Result<(MarginalGaussians, MarginalCache)> {
        if x.nrows() == 0 {
            return Err(SvgpcrError::InvalidInput("empty input batch".into()));
        }
        if x.ncols() != self.input_dim() {
            return Err(SvgpcrError::Shape(format!(
                "inputs have {} features but the model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let n = x.nrows();
        let kk = self.num_classes();
        let kzx = self.kernel.matrix(&self.inducing, x)?;
        let proj = prior.chol.solve(&kzx);
        let means = proj.transpose() * &self.means;
        let gamma = self.kernel.variance();
        let prior_reduction: Vec<f64> = (0..n).map(|i| kzx.column(i).dot(&proj.column(i))).collect();
        let mut variances = DMatrix::zeros(n, kk);
        let mut clamped = DMatrix::from_element(n, kk, false);
        let mut scaled_proj = Vec::with_capacity(kk);
        for k in 0..kk {
            let sp = self.scale_factor(k).transpose() * &proj;
            for i in 0..n {
                let v = gamma + sp.column(i).norm_squared() - prior_reduction[i];
                if v < MIN_VARIANCE {
                    variances[(i, k)] = MIN_VARIANCE;
                    clamped[(i, k)] = true;
                } else {
                    variances[(i, k)] = v;
                }
            }
            scaled_proj.push(sp);
        }
        Ok((
            MarginalGaussians { means, variances },
            MarginalCache {
                kzx,
                proj,
                scaled_proj,
                clamped,
            },
        ))
    }

    /// Backpropagates `∂J/∂means` and `∂J/∂variances` of a marginal evaluation.
    pub fn marginals_backward(
        &self,
        prior: &InducingPrior,
        x: &DMatrix<f64>,
        cache: &MarginalCache,
        g_mean: &DMatrix<f64>,
        g_var: &DMatrix<f64>,
    ) -> GpGrad {
        let m = self.num_inducing();
        let kk = self.num_classes();
        let n = x.nrows();
        let mut grad = GpGrad::zeros(m, kk, self.input_dim());
        let g_var = DMatrix::from_fn(n, kk, |i, k| if cache.clamped[(i, k)] { 0.0 } else { g_var[(i, k)] });

        grad.means = &cache.proj * g_mean;

        // ∂J/∂proj
        let mut g_proj = &self.means * g_mean.transpose();
        let var_total: Vec<f64> = (0..n).map(|i| g_var.row(i).sum()).collect();
        for k in 0..kk {
            let l = self.scale_factor(k);
            let mut weighted = cache.scaled_proj[k].clone();
            for i in 0..n {
                let mut col = weighted.column_mut(i);
                col *= g_var[(i, k)];
            }
            // ∂J/∂L_k = 2 P diag(g) Pᵀ L_k = 2 (P diag g)(Lᵀ P)ᵀ
            let mut p_weighted = cache.proj.clone();
            for i in 0..n {
                let mut col = p_weighted.column_mut(i);
                col *= g_var[(i, k)];
            }
            let g_l = 2.0 * &p_weighted * cache.scaled_proj[k].transpose();
            grad.scale_raw[k] = lower_with_log_diag_chain(&g_l, &l);
            g_proj += 2.0 * &l * &weighted;
        }
        let mut g_kzx = DMatrix::zeros(m, n);
        for i in 0..n {
            let mut col = g_proj.column_mut(i);
            col.axpy(-var_total[i], &cache.kzx.column(i), 1.0);
            let mut gcol = g_kzx.column_mut(i);
            gcol.axpy(-var_total[i], &cache.proj.column(i), 0.0);
        }
        let c = prior.chol.solve(&g_proj);
        g_kzx += &c;
        let g_kzz = -(&c * cache.proj.transpose());

        grad.kernel.log_variance += self.kernel.variance() * var_total.iter().sum::<f64>();
        grad.kernel += self
            .kernel
            .backward(&self.inducing, x, &cache.kzx, &g_kzx, Some(&mut grad.inducing), None);
        self.add_kzz_backward(prior, &g_kzz, &mut grad);
        grad
    }

    fn add_kzz_backward(&self, prior: &InducingPrior, g_kzz: &DMatrix<f64>, grad: &mut GpGrad) {
        let mut g_rows = DMatrix::zeros(self.num_inducing(), self.input_dim());
        let mut g_cols = DMatrix::zeros(self.num_inducing(), self.input_dim());
        grad.kernel += self.kernel.backward(
            &self.inducing,
            &self.inducing,
            &prior.kzz,
            g_kzz,
            Some(&mut g_rows),
            Some(&mut g_cols),
        );
        grad.inducing += g_rows + g_cols;
    }

    /// `Σ_k KL(N(m_k, S_k) ‖ N(0, K_zz))`.
    pub fn gaussian_kl(&self) -> Result<f64> {
        let prior = self.prior()?;
        Ok(self.gaussian_kl_with(&prior))
    }

    pub fn gaussian_kl_with(&self, prior: &InducingPrior) -> f64 {
        let m = self.num_inducing() as f64;
        let log_det_k = prior.chol.log_det();
        let white_means = prior.chol.solve_lower(&self.means);
        let mut kl = 0.0;
        for k in 0..self.num_classes() {
            let l = self.scale_factor(k);
            let trace = prior.chol.solve_lower(&l).norm_squared();
            let maha = white_means.column(k).norm_squared();
            let log_det_s = 2.0 * self.scale_raw[k].diagonal().sum();
            kl += 0.5 * (trace + maha - m + log_det_k - log_det_s);
        }
        kl
    }

    /// Gradient of [`gaussian_kl`](Self::gaussian_kl) with respect to all GP
    /// parameters.
    pub fn gaussian_kl_grad(&self, prior: &InducingPrior) -> GpGrad {
        let m = self.num_inducing();
        let kk = self.num_classes();
        let mut grad = GpGrad::zeros(m, kk, self.input_dim());
        let kinv = prior.chol.inverse();
        grad.means = &kinv * &self.means;
        let mut second_moment = &self.means * self.means.transpose();
        for k in 0..kk {
            let l = self.scale_factor(k);
            let kinv_l = &kinv * &l;
            let mut g_l = kinv_l.clone();
            for i in 0..m {
                g_l[(i, i)] -= 1.0 / l[(i, i)];
            }
            grad.scale_raw[k] = lower_with_log_diag_chain(&g_l, &l);
            second_moment += &l * l.transpose();
        }
        let g_kzz = 0.5 * (&kinv * kk as f64 - &kinv * second_moment * &kinv);
        self.add_kzz_backward(prior, &g_kzz, &mut grad);
        grad
    }
}

/// Restricts a dense gradient to the lower triangle and applies the
/// `L_ii = exp(raw_ii)` chain rule on the diagonal.
fn lower_with_log_diag_chain(g: &DMatrix<f64>, l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = g.nrows();
    DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => g[(i, j)],
        std::cmp::Ordering::Equal => g[(i, i)] * l[(i, i)],
        std::cmp::Ordering::Less => 0.0,
    })
}
