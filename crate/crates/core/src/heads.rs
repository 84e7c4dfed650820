//! Gaussian predictive heads: mean-field, `linear` (low-rank) and `kvv`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, ParameterStore};
use crate::tape::{softplus_inverse, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[serde(rename = "meanfield")]
    MeanField,
    Linear,
    Kvv,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::MeanField => "meanfield",
            HeadKind::Linear => "linear",
            HeadKind::Kvv => "kvv",
        }
    }

    /// Basis count for `linear`, embedding size for `kvv`.
    pub fn default_d_g(self) -> usize {
        match self {
            HeadKind::MeanField => 0,
            HeadKind::Linear => 128,
            HeadKind::Kvv => 16,
        }
    }
}

/// Covariance of the latent function values at the targets (noise excluded).
#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Factor `Φ` of `K = ΦΦᵀ`, `[m, d_g]`.
    LowRank(Tensor),
    Dense(Tensor),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::LowRank(f) => f.rows(),
            Covariance::Dense(k) => k.rows(),
        }
    }

    /// Materialised `K`.
    pub fn to_dense(&self) -> Tensor {
        match self {
            Covariance::Diagonal(v) => Tensor::from_diagonal(v),
            Covariance::LowRank(f) => f.matmul(&f.transpose2()).expect("factor is a matrix"),
            Covariance::Dense(k) => k.clone(),
        }
    }

    fn select(&self, idx: &[usize]) -> Covariance {
        match self {
            Covariance::Diagonal(v) => Covariance::Diagonal(idx.iter().map(|&i| v[i]).collect()),
            Covariance::LowRank(f) => Covariance::LowRank(f.select_rows(idx)),
            Covariance::Dense(k) => Covariance::Dense(k.select_square(idx)),
        }
    }
}

/// `N(mean, K + noise_var·I)` over the target outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPredictive {
    pub mean: Vec<f64>,
    pub cov: Covariance,
    pub noise_var: f64,
}

impl GaussianPredictive {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Predictive restricted to the targets in `idx`, in that order.
    pub fn marginal(&self, idx: &[usize]) -> GaussianPredictive {
        GaussianPredictive {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            cov: self.cov.select(idx),
            noise_var: self.noise_var,
        }
    }

    /// Marginal variances including noise.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let diag: Vec<f64> = match &self.cov {
            Covariance::Diagonal(v) => v.clone(),
            Covariance::LowRank(f) => (0..f.rows())
                .map(|i| (0..f.cols()).map(|j| f.at(i, j) * f.at(i, j)).sum())
                .collect(),
            Covariance::Dense(k) => k.diagonal(),
        };
        diag.into_iter().map(|v| v + self.noise_var).collect()
    }

    /// Log-density of `y` in nats.
    pub fn loglik(&self, y: &[f64]) -> Result<f64> {
        predictive_loglik(self, y)
    }
}

/// Predictive quantities recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum CovVars {
    Diagonal(Var),
    LowRank(Var),
    Dense(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct PredictiveVars {
    /// `[m]`
    pub mean: Var,
    pub cov: CovVars,
    /// rank 0
    pub noise_var: Var,
}

impl PredictiveVars {
    pub fn to_values(&self, tape: &Tape) -> GaussianPredictive {
        let cov = match self.cov {
            CovVars::Diagonal(v) => Covariance::Diagonal(tape.value(v).data().to_vec()),
            CovVars::LowRank(f) => Covariance::LowRank(tape.value(f).clone()),
            CovVars::Dense(k) => Covariance::Dense(tape.value(k).clone()),
        };
        GaussianPredictive {
            mean: tape.value(self.mean).data().to_vec(),
            cov,
            noise_var: tape.value(self.noise_var).item(),
        }
    }

    pub fn from_values(tape: &mut Tape, p: &GaussianPredictive) -> PredictiveVars {
        let mean = tape.constant(Tensor::vector(p.mean.clone()));
        let cov = match &p.cov {
            Covariance::Diagonal(v) => CovVars::Diagonal(tape.constant(Tensor::vector(v.clone()))),
            Covariance::LowRank(f) => CovVars::LowRank(tape.constant(f.clone())),
            Covariance::Dense(k) => CovVars::Dense(tape.constant(k.clone())),
        };
        let noise_var = tape.constant(Tensor::scalar(p.noise_var));
        PredictiveVars { mean, cov, noise_var }
    }

    /// `log N(y; m, K + σ²I)` on the tape. The low-rank case uses the
    /// Woodbury identity and the matrix determinant lemma.
    pub fn loglik(&self, tape: &mut Tape, y: &[f64]) -> Result<Var> {
        let m = tape.shape(self.mean)[0];
        if y.len() != m {
            return Err(Error::ShapeMismatch {
                op: "loglik",
                lhs: vec![m],
                rhs: vec![y.len()],
            });
        }
        let yv = tape.constant(Tensor::vector(y.to_vec()));
        let r = tape.sub(yv, self.mean)?;
        let log2pi = (2.0 * PI).ln();
        match self.cov {
            CovVars::Diagonal(var) => {
                let total = tape.add(var, self.noise_var)?;
                let r2 = tape.square(r)?;
                let q = tape.div(r2, total)?;
                let ld = tape.log(total)?;
                let s = tape.add(q, ld)?;
                let s = tape.sum(s, None)?;
                let s = tape.shift(s, m as f64 * log2pi)?;
                tape.scale(s, -0.5)
            }
            CovVars::Dense(k) => {
                let eye = tape.constant(Tensor::eye(m));
                let noise = tape.mul(eye, self.noise_var)?;
                let sigma = tape.add(k, noise)?;
                let l = tape.cholesky(sigma)?;
                let z = tape.solve_lower(l, r)?;
                let quad = tape.square(z)?;
                let quad = tape.sum(quad, None)?;
                let d = tape.diag(l)?;
                let ld = tape.log(d)?;
                let ld = tape.sum(ld, None)?;
                let ld = tape.scale(ld, 2.0)?;
                let s = tape.add(quad, ld)?;
                let s = tape.shift(s, m as f64 * log2pi)?;
                tape.scale(s, -0.5)
            }
            CovVars::LowRank(phi) => {
                let d = tape.shape(phi)[1];
                let one = tape.scalar(1.0);
                let inv = tape.div(one, self.noise_var)?;
                let phit = tape.transpose(phi)?;
                let gram = tape.matmul(phit, phi)?;
                let gram = tape.mul(gram, inv)?;
                let eye = tape.constant(Tensor::eye(d));
                let a = tape.add(gram, eye)?;
                let la = tape.cholesky(a)?;
                let rc = tape.reshape(r, &[m, 1])?;
                let b = tape.matmul(phit, rc)?;
                let w = tape.solve_lower(la, b)?;
                // rᵀΣ⁻¹r = |r|²/σ² − |L⁻¹Φᵀr|²/σ⁴
                let rr = tape.square(r)?;
                let rr = tape.sum(rr, None)?;
                let rr = tape.mul(rr, inv)?;
                let ww = tape.square(w)?;
                let ww = tape.sum(ww, None)?;
                let inv2 = tape.square(inv)?;
                let ww = tape.mul(ww, inv2)?;
                let quad = tape.sub(rr, ww)?;
                // log|Σ| = m log σ² + log|A|
                let ln_noise = tape.log(self.noise_var)?;
                let ln_noise = tape.scale(ln_noise, m as f64)?;
                let dl = tape.diag(la)?;
                let dl = tape.log(dl)?;
                let dl = tape.sum(dl, None)?;
                let dl = tape.scale(dl, 2.0)?;
                let logdet = tape.add(ln_noise, dl)?;
                let s = tape.add(quad, logdet)?;
                let s = tape.shift(s, m as f64 * log2pi)?;
                tape.scale(s, -0.5)
            }
        }
    }
}

/// Log-density of `y` under a predictive, in nats.
pub fn predictive_loglik(p: &GaussianPredictive, y: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = PredictiveVars::from_values(&mut tape, p);
    let ll = vars.loglik(&mut tape, y)?;
    Ok(tape.value(ll).item())
}

fn column(tape: &mut Tape, out: Var, col: usize) -> Result<Var> {
    let m = tape.shape(out)[0];
    let c = tape.slice(out, 1, col, 1)?;
    tape.reshape(c, &[m])
}

/// Independent Gaussians: column 0 is the mean, softplus of column 1 the variance.
pub fn head_meanfield(tape: &mut Tape, out: Var, noise_var: Var) -> Result<PredictiveVars> {
    let mean = column(tape, out, 0)?;
    let raw = column(tape, out, 1)?;
    let var = tape.softplus(raw)?;
    Ok(PredictiveVars {
        mean,
        cov: CovVars::Diagonal(var),
        noise_var,
    })
}

/// `K = ΦΦᵀ` with `Φ = g / √d_g`, `g` taken from columns `1..=d_g`.
pub fn head_linear(tape: &mut Tape, out: Var, d_g: usize, noise_var: Var) -> Result<PredictiveVars> {
    let mean = column(tape, out, 0)?;
    let g = tape.slice(out, 1, 1, d_g)?;
    let phi = tape.scale(g, 1.0 / (d_g as f64).sqrt())?;
    Ok(PredictiveVars {
        mean,
        cov: CovVars::LowRank(phi),
        noise_var,
    })
}

/// `K_ij = exp(-½|g_i - g_j|²) v_i v_j`; `g` in columns `1..=d_g`, `v` in column `d_g + 1`.
pub fn head_kvv(tape: &mut Tape, out: Var, d_g: usize, noise_var: Var) -> Result<PredictiveVars> {
    let mean = column(tape, out, 0)?;
    let g = tape.slice(out, 1, 1, d_g)?;
    let v = tape.slice(out, 1, 1 + d_g, 1)?;
    let k = kvv_covariance(tape, g, v)?;
    Ok(PredictiveVars {
        mean,
        cov: CovVars::Dense(k),
        noise_var,
    })
}

/// EQ Gram matrix of the rows of `g` (`[m, d]`), modulated by `v vᵀ` (`v: [m, 1]`).
pub fn kvv_covariance(tape: &mut Tape, g: Var, v: Var) -> Result<Var> {
    let d2 = tape.sq_dist(g, g)?;
    let e = tape.scale(d2, -0.5)?;
    let e = tape.exp(e)?;
    let vt = tape.transpose(v)?;
    let vv = tape.matmul(v, vt)?;
    tape.mul(e, vv)
}

const NOISE_PARAM: &str = "noise.raw";
/// Initial observation-noise standard deviation.
pub const INIT_NOISE_SD: f64 = 0.1;

/// Decoder MLP plus the mapping from its outputs to a Gaussian predictive.
#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub d_g: usize,
    pub decoder: Mlp,
}

impl Head {
    pub fn new(kind: HeadKind, d_g: usize, input: usize, width: usize, depth: usize) -> Self {
        let out = match kind {
            HeadKind::MeanField => 2,
            HeadKind::Linear => 1 + d_g,
            HeadKind::Kvv => 2 + d_g,
        };
        Head {
            kind,
            d_g,
            decoder: Mlp::uniform("dec.mlp", input, width, out, depth),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        self.decoder.init(rng, store);
        if self.kind == HeadKind::Kvv {
            // shrink the g columns of the last layer
            let last = self.decoder.weight_name(self.decoder.n_layers() - 1);
            let w = store.get_mut(&last).expect("decoder initialised");
            let cols = w.cols();
            for i in 0..w.rows() {
                for j in 1..=self.d_g {
                    let v = w.at(i, j) * 0.1;
                    w.set(i, j, v);
                }
                debug_assert!(cols == self.d_g + 2);
            }
        }
        store.insert(
            NOISE_PARAM,
            Tensor::scalar(softplus_inverse(INIT_NOISE_SD * INIT_NOISE_SD)),
        );
    }

    /// `features: [m, input] → predictive over the m targets`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<PredictiveVars> {
        let out = self.decoder.forward(tape, p, features)?;
        let noise_var = tape.softplus(p[NOISE_PARAM])?;
        match self.kind {
            HeadKind::MeanField => head_meanfield(tape, out, noise_var),
            HeadKind::Linear => head_linear(tape, out, self.d_g, noise_var),
            HeadKind::Kvv => head_kvv(tape, out, self.d_g, noise_var),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn predictive_from(tape: &mut Tape, kind: HeadKind, out: Tensor, d_g: usize, noise: f64) -> GaussianPredictive {
        let o = tape.constant(out);
        let n = tape.scalar(noise);
        let vars = match kind {
            HeadKind::MeanField => head_meanfield(tape, o, n),
            HeadKind::Linear => head_linear(tape, o, d_g, n),
            HeadKind::Kvv => head_kvv(tape, o, d_g, n),
        }
        .unwrap();
        vars.to_values(tape)
    }

    #[test]
    fn meanfield_is_sum_of_scalar_densities() {
        let mut t = Tape::new();
        let out = Tensor::matrix(3, 2, vec![0.1, -1.0, 0.5, 0.3, -0.2, 2.0]).unwrap();
        let p = predictive_from(&mut t, HeadKind::MeanField, out, 0, 0.01);
        let y = [0.0, 1.0, -0.5];
        let vars = p.marginal_variances();
        let direct: f64 = (0..3)
            .map(|i| {
                let r = y[i] - p.mean[i];
                -0.5 * ((2.0 * PI * vars[i]).ln() + r * r / vars[i])
            })
            .sum();
        assert!((p.loglik(&y).unwrap() - direct).abs() < 1e-12);
        let dense = p.cov.to_dense();
        assert_eq!(
            dense,
            Tensor::from_diagonal(&vars.iter().map(|v| v - 0.01).collect::<Vec<_>>())
        );
    }

    #[test]
    fn zero_basis_gives_zero_covariance() {
        let mut t = Tape::new();
        let out = Tensor::matrix(2, 4, vec![0.3, 0.0, 0.0, 0.0, -0.1, 0.0, 0.0, 0.0]).unwrap();
        let p = predictive_from(&mut t, HeadKind::Linear, out, 3, 0.04);
        assert_eq!(p.cov.to_dense(), Tensor::zeros(&[2, 2]));
        let y = [0.5, 0.2];
        let expected: f64 = y
            .iter()
            .zip(&p.mean)
            .map(|(a, m)| -0.5 * ((2.0 * PI * 0.04).ln() + (a - m) * (a - m) / 0.04))
            .sum();
        assert!((p.loglik(&y).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn rank_one_outer_product() {
        let mut t = Tape::new();
        let out = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 2.0]).unwrap();
        let p = predictive_from(&mut t, HeadKind::Linear, out, 1, 0.01);
        assert_eq!(p.cov.to_dense().data(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn kvv_diagonal_and_zero_rows() {
        let mut t = Tape::new();
        // rows: mean, g (2 dims), v
        let out = Tensor::matrix(3, 4, vec![0.0, 0.1, 0.2, 1.5, 0.0, -0.3, 0.4, 0.0, 0.0, 1.0, 1.0, -0.7]).unwrap();
        let p = predictive_from(&mut t, HeadKind::Kvv, out, 2, 0.01);
        let k = p.cov.to_dense();
        assert_eq!(k.at(0, 0), 1.5 * 1.5);
        assert_eq!(k.at(2, 2), 0.7 * 0.7);
        for j in 0..3 {
            assert_eq!(k.at(1, j), 0.0);
            assert_eq!(k.at(j, 1), 0.0);
        }
        assert_eq!(k, k.transpose2());
    }

    #[test]
    fn kvv_matches_scalar_formula() {
        let g = [[0.1, -0.4], [1.2, 0.3], [-0.5, 0.9]];
        let v = [0.8, -1.1, 0.4];
        let mut data = Vec::new();
        for i in 0..3 {
            data.extend([0.0, g[i][0], g[i][1], v[i]]);
        }
        let mut t = Tape::new();
        let p = predictive_from(&mut t, HeadKind::Kvv, Tensor::matrix(3, 4, data).unwrap(), 2, 0.01);
        let k = p.cov.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let d2 = (g[i][0] - g[j][0]).powi(2) + (g[i][1] - g[j][1]).powi(2);
                let expected = (-0.5 * d2).exp() * v[i] * v[j];
                assert!((k.at(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loglik_dimension_mismatch() {
        let p = GaussianPredictive {
            mean: vec![0.0; 2],
            cov: Covariance::Diagonal(vec![1.0; 2]),
            noise_var: 0.1,
        };
        assert!(p.loglik(&[0.0]).is_err());
    }

    #[test]
    fn head_kind_json_names() {
        assert_eq!(serde_json::to_string(&HeadKind::MeanField).unwrap(), "\"meanfield\"");
        assert_eq!(serde_json::from_str::<HeadKind>("\"kvv\"").unwrap(), HeadKind::Kvv);
    }
}
