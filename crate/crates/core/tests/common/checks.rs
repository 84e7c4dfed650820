//! Measured checks shared by the integration and acceptance suites.

use super::*;
use gnp::data::episode_rng;
use gnp::eval::{event_probability, sample_functions, EventMode, EventProbability};
use gnp::heads::{Covariance, GaussianPredictive};
use gnp::model::Model;
use gnp::oracle::{self, gaussian_loglik};
use gnp::{KernelSpec, ParameterStore};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

pub const NOISE: f64 = 0.0025;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn min_eigenvalue(t: &Tensor) -> f64 {
    to_na(t)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest deviation between the joint posterior on 5 context points and
/// conditioning on the first two, then on the remaining three with dense
/// inverses.
pub fn sequential_conditioning_error(k: &KernelSpec, seed: u64) -> f64 {
    let mut r = rng(seed);
    let ep = random_episode(&mut r, 5, 4);
    let (x_c, y_c, x_t) = (&ep.x_c, &ep.y_c, &ep.x_t);
    let joint = oracle::posterior(k, NOISE, x_c, y_c, x_t).unwrap();

    let rest: Vec<f64> = x_c[2..].iter().chain(x_t).copied().collect();
    let first = oracle::posterior(k, NOISE, &x_c[..2], &y_c[..2], &rest).unwrap();
    let s = to_na(&first.cov);
    let mu = DVector::from_vec(first.mean.clone());
    let s22 = s.view((0, 0), (3, 3)) + DMatrix::identity(3, 3) * NOISE;
    let st2 = s.view((3, 0), (4, 3));
    let stt = s.view((3, 3), (4, 4));
    let inv = s22.try_inverse().unwrap();
    let resid = DVector::from_vec(y_c[2..].to_vec()) - mu.rows(0, 3);
    let mean = mu.rows(3, 4) + st2 * &inv * resid;
    let cov = stt - st2 * &inv * st2.transpose();
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        worst = worst.max((mean[i] - joint.mean[i]).abs());
        for j in 0..4 {
            worst = worst.max((cov[(i, j)] - joint.cov.at(i, j)).abs());
        }
    }
    worst
}

/// Gaussian log-density of a random 3-point case against the explicit
/// inverse-and-determinant formula.
pub fn explicit_inverse_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[3, 3], -1.0, 1.0);
    let k = x.matmul(&x.transpose2()).unwrap();
    let noise = r.random_range(0.01..1.0);
    let mean: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
    let s = to_na(&k) + DMatrix::identity(3, 3) * noise;
    let resid = DVector::from_iterator(3, (0..3).map(|i| y[i] - mean[i]));
    let quad = (resid.transpose() * s.clone().try_inverse().unwrap() * &resid)[(0, 0)];
    let direct = -0.5 * quad - 0.5 * s.determinant().ln() - 1.5 * (2.0 * std::f64::consts::PI).ln();
    (gaussian_loglik(&mean, &k, noise, &y).unwrap() - direct).abs()
}

/// Random parameters away from the all-zero-bias initialisation.
pub fn generic_params(model: &Model, seed: u64) -> ParameterStore {
    let mut params = model.init_params(seed);
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
    }
    params
}

/// Context permutation invariance, target permutation equivariance and
/// marginalisation consistency, all bit-exact, on one random episode.
pub fn consistency_trial(model: &Model, trial: u64) -> std::result::Result<(), String> {
    let params = generic_params(model, trial);
    let mut r = rng(1000 + trial);
    let n_c = r.random_range(0..=15);
    let n_t = r.random_range(2..=12);
    let ep = random_episode(&mut r, n_c, n_t);
    let pred = model
        .predict(&params, &ep.x_c, &ep.y_c, &ep.x_t)
        .map_err(|e| e.to_string())?;

    let mut perm: Vec<usize> = (0..n_c).collect();
    perm.shuffle(&mut r);
    let xc: Vec<f64> = perm.iter().map(|&i| ep.x_c[i]).collect();
    let yc: Vec<f64> = perm.iter().map(|&i| ep.y_c[i]).collect();
    if model.predict(&params, &xc, &yc, &ep.x_t).map_err(|e| e.to_string())? != pred {
        return Err("context permutation changed the predictive".into());
    }

    let mut perm: Vec<usize> = (0..n_t).collect();
    perm.shuffle(&mut r);
    let xt: Vec<f64> = perm.iter().map(|&i| ep.x_t[i]).collect();
    if model
        .predict(&params, &ep.x_c, &ep.y_c, &xt)
        .map_err(|e| e.to_string())?
        != pred.marginal(&perm)
    {
        return Err("target permutation is not equivariant".into());
    }

    let keep: Vec<usize> = (0..n_t).filter(|_| r.random_bool(0.5)).collect();
    let keep = if keep.is_empty() { vec![n_t - 1] } else { keep };
    let xt: Vec<f64> = keep.iter().map(|&i| ep.x_t[i]).collect();
    if model
        .predict(&params, &ep.x_c, &ep.y_c, &xt)
        .map_err(|e| e.to_string())?
        != pred.marginal(&keep)
    {
        return Err("querying a subset differs from marginalising".into());
    }
    Ok(())
}

/// Smallest eigenvalue of the latent covariance on one random draw.
pub fn covariance_min_eigenvalue(model: &Model, draw: u64) -> f64 {
    let params = generic_params(model, draw);
    let mut r = rng(5000 + draw);
    let n_c = r.random_range(0..=20);
    let n_t = r.random_range(5..=40);
    let ep = random_episode(&mut r, n_c, n_t);
    let pred = model.predict(&params, &ep.x_c, &ep.y_c, &ep.x_t).unwrap();
    min_eigenvalue(&pred.cov.to_dense())
}

/// Largest |z|-scores of the sample mean against `m` and of the sample
/// covariance against `K + σ²I`, using per-entry Monte Carlo standard errors.
pub fn moment_zscores(pred: &GaussianPredictive, n: usize, seed: u64) -> (f64, f64) {
    let draws = sample_functions(pred, n, false, &mut episode_rng(seed, 0)).unwrap();
    let m = pred.dim();
    let target = pred.cov.to_dense();
    let nf = n as f64;
    let draws = &draws;
    let col = |j: usize| (0..n).map(move |s| draws.at(s, j));
    let mut z_mean: f64 = 0.0;
    let mut z_cov: f64 = 0.0;
    for i in 0..m {
        let mu = col(i).sum::<f64>() / nf;
        let var = col(i).map(|v| (v - mu).powi(2)).sum::<f64>() / (nf - 1.0);
        z_mean = z_mean.max((mu - pred.mean[i]).abs() / (var / nf).sqrt());
    }
    for i in 0..m {
        for j in 0..=i {
            // centred on the true mean so each product is an iid unbiased term
            let prods: Vec<f64> = col(i)
                .zip(col(j))
                .map(|(a, b)| (a - pred.mean[i]) * (b - pred.mean[j]))
                .collect();
            let c = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (nf - 1.0);
            let expected = target.at(i, j) + if i == j { pred.noise_var } else { 0.0 };
            z_cov = z_cov.max((c - expected).abs() / (var / nf).sqrt());
        }
    }
    (z_mean, z_cov)
}

/// Zero-mean, unit-variance bivariate predictive with correlation `rho`:
/// dense latent covariance `[[1-s, ρ], [ρ, 1-s]]` plus noise `s`.
pub fn bivariate(rho: f64) -> GaussianPredictive {
    let s = 0.05;
    GaussianPredictive {
        mean: vec![0.0, 0.0],
        cov: Covariance::Dense(Tensor::matrix(2, 2, vec![1.0 - s, rho, rho, 1.0 - s]).unwrap()),
        noise_var: s,
    }
}

/// Mean-field predictive with the same marginals as [`bivariate`].
pub fn bivariate_meanfield() -> GaussianPredictive {
    GaussianPredictive {
        cov: Covariance::Diagonal(vec![0.95, 0.95]),
        ..bivariate(0.0)
    }
}

/// Orthant probability `P(y₁ > m₁, y₂ > m₂)` for unit-variance correlation `rho`.
pub fn orthant(rho: f64) -> f64 {
    0.25 + rho.asin() / (2.0 * std::f64::consts::PI)
}

/// Monte Carlo probability that every output of a zero-mean predictive is positive.
pub fn all_above_mean(pred: &GaussianPredictive, n: usize, seed: u64) -> EventProbability {
    event_probability(pred, 0.0, EventMode::AllAbove, n, &mut episode_rng(seed, 0)).unwrap()
}
