//! Episodic maximum-likelihood training with Adam.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{indexed_episode, Corpus, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Model, ModelSpec};
use crate::nn::ParameterStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn d20() -> usize {
    20
}
fn d256() -> usize {
    256
}
fn d16() -> usize {
    16
}
fn default_lr() -> f64 {
    5e-4
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn d1() -> usize {
    1
}
fn d1024() -> usize {
    1024
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d20")]
    pub epochs: usize,
    #[serde(default = "d256")]
    pub iters_per_epoch: usize,
    #[serde(default = "d16")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Seeds parameter initialisation.
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    #[serde(default = "d1")]
    pub eval_every: usize,
    /// Size of the held-out evaluation corpus.
    #[serde(default = "d1024")]
    pub eval_episodes: usize,
    /// Global gradient-norm clipping threshold; `null` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// 100 epochs × 1024 iterations, minibatches of 16, learning rate 5e-4.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 100,
            iters_per_epoch: 1024,
            ..TrainConfig::desk()
        }
    }

    /// 20 epochs × 256 iterations, minibatches of 16, learning rate 5e-4.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: d20(),
            iters_per_epoch: d256(),
            batch_size: d16(),
            learning_rate: default_lr(),
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            seed: 0,
            eval_every: d1(),
            eval_episodes: d1024(),
            grad_clip: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let [b1, b2] = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and adam_eps be positive".into(),
            ));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update at step `t ≥ 1`.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
    t: u64,
) {
    assert!(t >= 1, "adam steps are numbered from 1");
    let [b1, b2] = cfg.adam_betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, param) in store.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let (pd, md, vd) = (param.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Scale `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Negative mean joint log-likelihood of `batch` and its gradient.
/// Also returns the per-episode log-likelihoods.
pub fn batch_loss_and_grads(
    model: &Model,
    params: &ParameterStore,
    batch: &[Dataset],
) -> Result<(f64, Vec<f64>, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let mut lls = Vec::with_capacity(batch.len());
    let mut total = None;
    for ep in batch {
        let vars = model.forward(&mut tape, &p, &ep.x_c, &ep.y_c, &ep.x_t)?;
        let ll = vars.loglik(&mut tape, &ep.y_t)?;
        lls.push(tape.value(ll).item());
        total = Some(match total {
            None => ll,
            Some(acc) => tape.add(acc, ll)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = tape.scale(total, -1.0 / batch.len() as f64)?;
    let mut g = tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in p.iter() {
        let grad = g.take(*var).unwrap_or_else(|| Tensor::zeros(tape.shape(*var)));
        if !grad.all_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        grads.insert(name.clone(), grad);
    }
    Ok((tape.value(loss).item(), lls, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub iter: usize,
    pub split: String,
    pub loglik_joint: f64,
    pub loglik_per_point: f64,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "epoch,iter,split,loglik_joint,loglik_per_point,loss";

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:?},{:?},{:?}",
            r.epoch, r.iter, r.split, r.loglik_joint, r.loglik_per_point, r.loss
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Numeric failure; the returned parameters are the last finite ones.
    Diverged {
        epoch: usize,
        iter: usize,
        /// Task seed and first stream of the failing batch, for reproduction.
        seed: u64,
        stream: u64,
        reason: String,
    },
}

pub struct TrainOutcome {
    pub params: ParameterStore,
    pub metrics: Vec<MetricRow>,
    pub status: TrainStatus,
}

/// Summary handed to the per-epoch observer.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub params: &'a ParameterStore,
    pub train: &'a MetricRow,
    pub eval: Option<&'a MetricRow>,
}

pub fn train(model: &ModelSpec, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let eval_set = if cfg.eval_every > 0 && cfg.eval_episodes > 0 {
        Some(Corpus::eval_set(task, cfg.eval_episodes)?)
    } else {
        None
    };
    train_with(model, task, cfg, eval_set.as_ref(), |_| {})
}

fn eval_row(model: &Model, params: &ParameterStore, corpus: &Corpus, epoch: usize, iter: usize) -> Result<MetricRow> {
    let scores = eval::score_model(model, params, &corpus.episodes)?;
    let joint = eval::Summary::of(&scores.iter().map(|s| s.joint).collect::<Vec<_>>());
    let per_point = eval::Summary::of(&scores.iter().map(|s| s.per_point).collect::<Vec<_>>());
    Ok(MetricRow {
        epoch,
        iter,
        split: "eval".into(),
        loglik_joint: joint.mean,
        loglik_per_point: per_point.mean,
        loss: -joint.mean,
    })
}

/// Train with an explicit evaluation corpus and a per-epoch observer.
pub fn train_with(
    spec: &ModelSpec,
    task: &TaskSpec,
    cfg: &TrainConfig,
    eval_set: Option<&Corpus>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    let model = Model::new(spec.clone())?;
    let mut params = model.init_params(cfg.seed);
    let mut adam = AdamState::default();
    let mut metrics = Vec::new();
    if let Some(c) = eval_set {
        metrics.push(eval_row(&model, &params, c, 0, 0)?);
    }
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let (mut sum_joint, mut sum_pp, mut sum_loss, mut n_ep) = (0.0, 0.0, 0.0, 0usize);
        for iter in 0..cfg.iters_per_epoch {
            let global = ((epoch - 1) * cfg.iters_per_epoch + iter) as u64;
            let first_stream = global * cfg.batch_size as u64;
            let batch = (0..cfg.batch_size as u64)
                .map(|j| indexed_episode(task, task.seed, first_stream + j))
                .collect::<Result<Vec<_>>>()?;
            let attempt = batch_loss_and_grads(&model, &params, &batch).and_then(|(loss, lls, mut grads)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite { op: "loss" });
                }
                if let Some(c) = cfg.grad_clip {
                    clip_global_norm(&mut grads, c);
                }
                let mut next = params.clone();
                let mut next_adam = adam.clone();
                adam_step(&mut next, &mut next_adam, &grads, cfg, step + 1);
                if !next.all_finite() {
                    return Err(Error::NonFinite { op: "adam_step" });
                }
                Ok((loss, lls, next, next_adam))
            });
            match attempt {
                Ok((loss, lls, next, next_adam)) => {
                    params = next;
                    adam = next_adam;
                    step += 1;
                    sum_loss += loss * batch.len() as f64;
                    for (ll, ep) in lls.iter().zip(&batch) {
                        sum_joint += ll;
                        sum_pp += ll / ep.n_target().max(1) as f64;
                    }
                    n_ep += batch.len();
                }
                Err(e) if e.is_numeric() => {
                    return Ok(TrainOutcome {
                        params,
                        metrics,
                        status: TrainStatus::Diverged {
                            epoch,
                            iter,
                            seed: task.seed,
                            stream: first_stream,
                            reason: e.to_string(),
                        },
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let n = n_ep.max(1) as f64;
        let train_row = MetricRow {
            epoch,
            iter: cfg.iters_per_epoch,
            split: "train".into(),
            loglik_joint: sum_joint / n,
            loglik_per_point: sum_pp / n,
            loss: sum_loss / n,
        };
        metrics.push(train_row.clone());
        let do_eval = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let eval = match eval_set {
            Some(c) if do_eval => {
                let row = eval_row(&model, &params, c, epoch, cfg.iters_per_epoch)?;
                metrics.push(row.clone());
                Some(row)
            }
            _ => None,
        };
        on_epoch(&EpochReport {
            epoch,
            params: &params,
            train: &train_row,
            eval: eval.as_ref(),
        });
    }
    Ok(TrainOutcome {
        params,
        metrics,
        status: TrainStatus::Completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::scalar(v));
        s
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = TrainConfig::desk();
        let mut store = scalar_store(1.0);
        let mut state = AdamState::default();
        let grads = BTreeMap::from([("a".to_string(), Tensor::scalar(1.0))]);
        adam_step(&mut store, &mut state, &grads, &cfg, 1);
        let moved = store.get("a").unwrap().item() - 1.0;
        assert!((moved + cfg.learning_rate / (1.0 + cfg.adam_eps)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = TrainConfig::desk();
        let mut store = scalar_store(0.3);
        let mut state = AdamState::default();
        let grads = BTreeMap::from([("a".to_string(), Tensor::scalar(0.0))]);
        adam_step(&mut store, &mut state, &grads, &cfg, 1);
        assert_eq!(store.get("a").unwrap().item(), 0.3);
    }

    #[test]
    fn identical_gradients_identical_updates() {
        let cfg = TrainConfig::desk();
        let mut store = scalar_store(0.5);
        store.insert("b", Tensor::scalar(0.5));
        let mut state = AdamState::default();
        for t in 1..=5 {
            let g = Tensor::scalar(0.1 * t as f64);
            let grads = BTreeMap::from([("a".to_string(), g.clone()), ("b".to_string(), g)]);
            adam_step(&mut store, &mut state, &grads, &cfg, t);
        }
        assert_eq!(store.get("a"), store.get("b"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::vector(vec![30.0, 40.0])),
            ("b".to_string(), Tensor::scalar(0.0)),
        ]);
        let before = clip_global_norm(&mut g, 10.0);
        assert_eq!(before, 50.0);
        assert!((g["a"].data()[0] - 6.0).abs() < 1e-12);
        assert!((g["a"].data()[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn config_presets() {
        let p = TrainConfig::full_scale();
        assert_eq!(
            (p.epochs, p.iters_per_epoch, p.batch_size, p.learning_rate),
            (100, 1024, 16, 5e-4)
        );
        let d = TrainConfig::desk();
        assert_eq!(
            (d.epochs, d.iters_per_epoch, d.batch_size, d.learning_rate),
            (20, 256, 16, 5e-4)
        );
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let mut bad = TrainConfig::desk();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn metrics_csv_header() {
        let mut buf = Vec::new();
        let row = MetricRow {
            epoch: 1,
            iter: 2,
            split: "eval".into(),
            loglik_joint: -1.5,
            loglik_per_point: -0.03,
            loss: 1.5,
        };
        write_metrics_csv(&[row], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "epoch,iter,split,loglik_joint,loglik_per_point,loss\n1,2,eval,-1.5,-0.03,1.5\n"
        );
    }
}
