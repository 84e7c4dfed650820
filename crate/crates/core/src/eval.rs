//! Scoring, coherent sampling, covariance extraction and event probabilities.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Dataset};
use crate::error::{Error, Result};
use crate::heads::{Covariance, GaussianPredictive};
use crate::kernels::KernelSpec;
use crate::linalg;
use crate::model::Model;
use crate::nn::ParameterStore;
use crate::oracle;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeScore {
    /// Joint log-likelihood of the targets, nats.
    pub joint: f64,
    /// `joint / number of targets`.
    pub per_point: f64,
}

impl EpisodeScore {
    fn new(joint: f64, m: usize) -> Self {
        EpisodeScore {
            joint,
            per_point: joint / m.max(1) as f64,
        }
    }
}

/// Mean and standard error (population deviation over `√n`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std_error: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Summary {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }
}

pub fn score_model(model: &Model, params: &ParameterStore, episodes: &[Dataset]) -> Result<Vec<EpisodeScore>> {
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            model
                .loglik(params, ep)
                .map(|ll| EpisodeScore::new(ll, ep.n_target()))
                .map_err(|e| e.in_episode(i as u64))
        })
        .collect()
}

/// Scores under the exact posterior and under its diagonalised version.
pub fn score_oracle(
    kernel: &KernelSpec,
    noise_var: f64,
    episodes: &[Dataset],
) -> Result<(Vec<EpisodeScore>, Vec<EpisodeScore>)> {
    let mut full = Vec::with_capacity(episodes.len());
    let mut diag = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let wrap = |e: Error| e.in_episode(i as u64);
        let post = oracle::posterior(kernel, noise_var, &ep.x_c, &ep.y_c, &ep.x_t).map_err(wrap)?;
        full.push(EpisodeScore::new(post.loglik(&ep.y_t).map_err(wrap)?, ep.n_target()));
        let d = oracle::diagonalize(&post);
        diag.push(EpisodeScore::new(d.loglik(&ep.y_t).map_err(wrap)?, ep.n_target()));
    }
    Ok((full, diag))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub name: String,
    pub episodes: usize,
    pub joint: Summary,
    pub per_point: Summary,
}

impl ScoreRow {
    pub fn from_scores(name: impl Into<String>, scores: &[EpisodeScore]) -> ScoreRow {
        ScoreRow {
            name: name.into(),
            episodes: scores.len(),
            joint: Summary::of(&scores.iter().map(|s| s.joint).collect::<Vec<_>>()),
            per_point: Summary::of(&scores.iter().map(|s| s.per_point).collect::<Vec<_>>()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<ScoreRow>,
}

impl EvalSummary {
    pub fn row(&self, name: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Score a model on a corpus; with `with_oracle`, also the exact and
/// diagonalised oracles under the corpus's generating task.
pub fn evaluate(model: &Model, params: &ParameterStore, corpus: &Corpus, with_oracle: bool) -> Result<EvalSummary> {
    if corpus.episodes.is_empty() {
        return Err(Error::Corpus("cannot evaluate on an empty corpus".into()));
    }
    let scores = score_model(model, params, &corpus.episodes)?;
    let mut rows = vec![ScoreRow::from_scores(model.spec.label(), &scores)];
    if with_oracle {
        let task = &corpus.header.task;
        let (full, diag) = score_oracle(&task.kernel, task.noise_var, &corpus.episodes)?;
        rows.push(ScoreRow::from_scores("oracle", &full));
        rows.push(ScoreRow::from_scores("oracle-diagonal", &diag));
    }
    Ok(EvalSummary { rows })
}

/// `[n_samples, m]` draws from the predictive. With `noiseless`, the
/// observation noise term is omitted.
pub fn sample_functions<R: Rng + ?Sized>(
    p: &GaussianPredictive,
    n_samples: usize,
    noiseless: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be at least 1".into()));
    }
    let m = p.dim();
    let noise_sd = if noiseless { 0.0 } else { p.noise_var.sqrt() };
    let mut out = Vec::with_capacity(n_samples * m);
    match &p.cov {
        Covariance::Diagonal(var) => {
            let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
            for _ in 0..n_samples {
                for (mu, s) in p.mean.iter().zip(&sd) {
                    let z: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    out.push(mu + s * z + noise_sd * e);
                }
            }
        }
        Covariance::LowRank(phi) => {
            let d = phi.cols();
            let f = phi.data();
            let mut w = vec![0.0; d];
            for _ in 0..n_samples {
                for wi in w.iter_mut() {
                    *wi = rng.sample(StandardNormal);
                }
                for i in 0..m {
                    let row = &f[i * d..(i + 1) * d];
                    let fx: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                    let e: f64 = rng.sample(StandardNormal);
                    out.push(p.mean[i] + fx + noise_sd * e);
                }
            }
        }
        Covariance::Dense(k) => {
            let (l, _) = linalg::cholesky_jittered(k.data(), m)?;
            let mut z = vec![0.0; m];
            for _ in 0..n_samples {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for i in 0..m {
                    let fx: f64 = l[i * m..i * m + i + 1].iter().zip(&z).map(|(a, b)| a * b).sum();
                    let e: f64 = rng.sample(StandardNormal);
                    out.push(p.mean[i] + fx + noise_sd * e);
                }
            }
        }
    }
    Tensor::matrix(n_samples, m, out)
}

/// Model's latent covariance `K` over `x_grid`, conditioned on the episode's context.
pub fn extract_covariance(model: &Model, params: &ParameterStore, ep: &Dataset, x_grid: &[f64]) -> Result<Tensor> {
    if x_grid.is_empty() {
        return Err(Error::InvalidParameter("covariance grid is empty".into()));
    }
    Ok(model.predict(params, &ep.x_c, &ep.y_c, x_grid)?.cov.to_dense())
}

/// Exact posterior covariance over `x_grid` under the generating kernel.
pub fn oracle_covariance(kernel: &KernelSpec, noise_var: f64, ep: &Dataset, x_grid: &[f64]) -> Result<Tensor> {
    Ok(oracle::posterior(kernel, noise_var, &ep.x_c, &ep.y_c, x_grid)?.cov)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    /// Every target output exceeds the threshold.
    AllAbove,
    /// At least one target output falls below the threshold.
    AnyBelow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventProbability {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// Product of the marginal probabilities: the value a model treating
    /// targets independently would report.
    pub marginal_product: f64,
    /// Exact value for diagonal predictives.
    pub closed_form: Option<f64>,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Monte Carlo probability of a joint threshold event over all targets.
pub fn event_probability<R: Rng + ?Sized>(
    p: &GaussianPredictive,
    threshold: f64,
    mode: EventMode,
    n_samples: usize,
    rng: &mut R,
) -> Result<EventProbability> {
    if n_samples < 100 {
        return Err(Error::InvalidParameter(format!(
            "event_probability needs at least 100 samples, got {n_samples}"
        )));
    }
    let samples = sample_functions(p, n_samples, false, rng)?;
    let m = p.dim();
    let hits = (0..n_samples)
        .filter(|&s| {
            let row = &samples.data()[s * m..(s + 1) * m];
            match mode {
                EventMode::AllAbove => row.iter().all(|&y| y > threshold),
                EventMode::AnyBelow => row.iter().any(|&y| y < threshold),
            }
        })
        .count();
    let estimate = hits as f64 / n_samples as f64;
    let std_error = (estimate * (1.0 - estimate) / n_samples as f64).sqrt();
    let all_above: f64 = p
        .mean
        .iter()
        .zip(p.marginal_variances())
        .map(|(mu, v)| 1.0 - normal_cdf((threshold - mu) / v.sqrt()))
        .product();
    let marginal_product = match mode {
        EventMode::AllAbove => all_above,
        EventMode::AnyBelow => 1.0 - all_above,
    };
    let closed_form = matches!(p.cov, Covariance::Diagonal(_)).then_some(marginal_product);
    Ok(EventProbability {
        estimate,
        std_error,
        n_samples,
        marginal_product,
        closed_form,
    })
}

/// CSV matrix preceded by a one-line JSON comment `# {"x_grid": [...]}`.
pub fn write_matrix_csv<W: Write>(mut w: W, x_grid: &[f64], m: &Tensor) -> Result<()> {
    let header = serde_json::json!({ "x_grid": x_grid });
    writeln!(w, "# {header}")?;
    let cols = m.cols();
    for row in m.data().chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::episode_rng;

    #[test]
    fn duplicate_corpus_statistics() {
        let xs = [1.0, 2.5, -0.5, 4.0];
        let a = Summary::of(&xs);
        let doubled: Vec<f64> = xs.iter().chain(&xs).copied().collect();
        let b = Summary::of(&doubled);
        assert_eq!(a.mean, b.mean);
        assert!((b.std_error - a.std_error / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_factor_samples_are_noise() {
        let p = GaussianPredictive {
            mean: vec![1.0, -1.0],
            cov: Covariance::LowRank(Tensor::zeros(&[2, 3])),
            noise_var: 0.25,
        };
        let s = sample_functions(&p, 1, true, &mut episode_rng(0, 0)).unwrap();
        assert_eq!(s.data(), &[1.0, -1.0]);
        let s = sample_functions(&p, 4000, false, &mut episode_rng(0, 0)).unwrap();
        let col0: Vec<f64> = (0..4000).map(|i| s.at(i, 0)).collect();
        let sm = Summary::of(&col0);
        assert!((sm.mean - 1.0).abs() < 4.0 * 0.5 / 4000f64.sqrt());
    }

    #[test]
    fn impossible_threshold_certain() {
        let p = GaussianPredictive {
            mean: vec![0.0, 0.0, 0.0],
            cov: Covariance::Diagonal(vec![1.0; 3]),
            noise_var: 0.01,
        };
        let r = event_probability(&p, f64::NEG_INFINITY, EventMode::AllAbove, 200, &mut episode_rng(1, 0)).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.closed_form, Some(1.0));
        assert!(event_probability(&p, 0.0, EventMode::AllAbove, 10, &mut episode_rng(1, 0)).is_err());
    }

    #[test]
    fn matrix_csv_layout() {
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &[0.0, 0.5], &Tensor::matrix(1, 2, vec![1.0, -0.25]).unwrap()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# {\"x_grid\":[0.0,0.5]}\n1.0,-0.25\n");
    }
}
