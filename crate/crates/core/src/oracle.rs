//! Exact GP posterior under the generating kernel, and Gaussian scoring.

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg;
use crate::tensor::Tensor;

/// Posterior over latent function values at the target inputs. Observations
/// additionally carry `noise_var` of independent noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GpPosterior {
    pub mean: Vec<f64>,
    pub cov: Tensor,
    pub noise_var: f64,
}

pub fn posterior(kernel: &KernelSpec, noise_var: f64, x_c: &[f64], y_c: &[f64], x_t: &[f64]) -> Result<GpPosterior> {
    if x_c.len() != y_c.len() {
        return Err(Error::ShapeMismatch {
            op: "posterior",
            lhs: vec![x_c.len()],
            rhs: vec![y_c.len()],
        });
    }
    if !(noise_var > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let k_tt = kernel.matrix(x_t, x_t)?;
    let (n, m) = (x_c.len(), x_t.len());
    if n == 0 {
        return Ok(GpPosterior {
            mean: vec![0.0; m],
            cov: k_tt,
            noise_var,
        });
    }
    let mut k_cc = kernel.matrix(x_c, x_c)?;
    for i in 0..n {
        let v = k_cc.at(i, i) + noise_var;
        k_cc.set(i, i, v);
    }
    let (l, _) = linalg::cholesky_jittered(k_cc.data(), n)?;
    // V = L⁻¹ K_ct, w = L⁻¹ y
    let mut v = kernel.matrix(x_c, x_t)?.into_data();
    linalg::solve_lower_in_place(&l, n, &mut v, m);
    let mut w = y_c.to_vec();
    linalg::solve_lower_in_place(&l, n, &mut w, 1);
    let mut mean = vec![0.0; m];
    linalg::gemm(1, n, m, &w, n, 1, &v, m, 1, &mut mean, 0.0);
    let mut cov = k_tt.into_data();
    // K_tt - Vᵀ V
    let mut vtv = vec![0.0; m * m];
    linalg::gemm(m, n, m, &v, 1, m, &v, m, 1, &mut vtv, 0.0);
    for (c, s) in cov.iter_mut().zip(&vtv) {
        *c -= s;
    }
    // exact symmetry
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (cov[i * m + j] + cov[j * m + i]);
            cov[i * m + j] = s;
            cov[j * m + i] = s;
        }
    }
    Ok(GpPosterior {
        mean,
        cov: Tensor::matrix(m, m, cov)?,
        noise_var,
    })
}

/// Zero the off-diagonal covariance entries.
pub fn diagonalize(p: &GpPosterior) -> GpPosterior {
    GpPosterior {
        mean: p.mean.clone(),
        cov: Tensor::from_diagonal(&p.cov.diagonal()),
        noise_var: p.noise_var,
    }
}

/// `log N(y; mean, cov + noise_var·I)` in nats.
pub fn gaussian_loglik(mean: &[f64], cov: &Tensor, noise_var: f64, y: &[f64]) -> Result<f64> {
    let n = linalg::square_dim(cov, "gaussian_loglik")?;
    let mut total = cov.clone();
    for i in 0..n {
        let v = total.at(i, i) + noise_var;
        total.set(i, i, v);
    }
    linalg::mvn_logpdf(y, mean, &total)
}

impl GpPosterior {
    pub fn loglik(&self, y: &[f64]) -> Result<f64> {
        gaussian_loglik(&self.mean, &self.cov, self.noise_var, y)
    }

    /// Restriction to a subset of the target points.
    pub fn marginal(&self, idx: &[usize]) -> GpPosterior {
        GpPosterior {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            cov: self.cov.select_square(idx),
            noise_var: self.noise_var,
        }
    }
}
