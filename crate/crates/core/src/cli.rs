//! Command-line front end. Every command resolves its inputs into a [`Run`],
//! executes it, and writes `<out>.manifest.json` recording the resolved run
//! and SHA-256 hashes of its inputs and artifacts; `replay` re-executes a
//! manifest and checks the artifacts match bit for bit.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{episode_rng, Corpus, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EventMode};
use crate::model::{Model, ModelSpec};
use crate::nn::ParameterStore;
use crate::train::{self, TrainConfig, TrainStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// RNG key for sampling commands when no seed is given.
const DEFAULT_SAMPLE_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(
    name = "gnp",
    version,
    about = "Gaussian neural processes: data, training, evaluation, sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a corpus of episodes from a task.
    Generate {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Generator seed; defaults to the task file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        first_stream: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and metrics.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Training config; defaults to the desk-scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add rows for the exact and diagonalised GP oracles.
        #[arg(long)]
        oracle: bool,
    },
    /// Draw coherent function samples on a grid.
    Sample {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[command(flatten)]
        ctx: ContextArgs,
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long, default_value_t = 16)]
        n_samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Omit observation noise.
        #[arg(long)]
        noiseless: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the predictive covariance over a grid.
    Cov {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[command(flatten)]
        ctx: ContextArgs,
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Write the exact GP posterior covariance of the corpus task instead.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo probability of a joint threshold event.
    EventProb {
        #[command(flatten)]
        ckpt: CkptArgs,
        #[command(flatten)]
        ctx: ContextArgs,
        /// Event inputs; defaults to the episode's target inputs.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::AllAbove)]
        mode: ModeArg,
        #[arg(long, default_value_t = 10_000)]
        n_samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a manifest and verify its artifacts.
    Replay {
        manifest: PathBuf,
        /// Write artifacts under this directory instead of the recorded paths.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Initialisation seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Task seed (training and evaluation episodes).
    #[arg(long)]
    task_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CkptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Model spec; defaults to the one recorded in the checkpoint's manifest.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ContextArgs {
    /// Corpus supplying the context; without it the context is empty.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    episode_index: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    #[value(name = "all_above", alias = "all-above")]
    AllAbove,
    #[value(name = "any_below", alias = "any-below")]
    AnyBelow,
}

impl From<ModeArg> for EventMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AllAbove => EventMode::AllAbove,
            ModeArg::AnyBelow => EventMode::AnyBelow,
        }
    }
}

/// Fully resolved command: everything needed to reproduce its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Run {
    Generate {
        task: TaskSpec,
        episodes: usize,
        seed: u64,
        first_stream: u64,
        out: PathBuf,
    },
    Train {
        model: ModelSpec,
        task: TaskSpec,
        config: TrainConfig,
        out: PathBuf,
        metrics: PathBuf,
    },
    Eval {
        model: ModelSpec,
        ckpt: PathBuf,
        corpus: PathBuf,
        oracle: bool,
        out: PathBuf,
    },
    Sample {
        model: ModelSpec,
        ckpt: PathBuf,
        corpus: Option<PathBuf>,
        episode_index: usize,
        grid: Vec<f64>,
        n_samples: usize,
        seed: u64,
        noiseless: bool,
        out: PathBuf,
    },
    Cov {
        model: ModelSpec,
        ckpt: PathBuf,
        corpus: Option<PathBuf>,
        episode_index: usize,
        grid: Vec<f64>,
        oracle: bool,
        out: PathBuf,
    },
    EventProb {
        model: ModelSpec,
        ckpt: PathBuf,
        corpus: Option<PathBuf>,
        episode_index: usize,
        grid: Option<Vec<f64>>,
        threshold: f64,
        mode: EventMode,
        n_samples: usize,
        seed: u64,
        out: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub run: Run,
    /// SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written.
    pub artifacts: BTreeMap<String, String>,
}

/// Outcome of executing a run.
pub struct Executed {
    pub manifest: Manifest,
    /// Set when training diverged; the artifacts hold the last finite parameters.
    pub diverged: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Path of the manifest written alongside `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// `lo:hi:n` to `n` evenly spaced points including both ends.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("grid must be lo:hi:n, got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() || (n > 1 && !(lo < hi)) {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Model spec recorded in the manifest of a training run.
fn model_from_ckpt(ckpt: &Path) -> Result<ModelSpec> {
    let path = manifest_path(ckpt);
    if !path.exists() {
        return Err(Error::Config(format!(
            "no model spec: pass --model or keep {} next to the checkpoint",
            path.display()
        )));
    }
    let m: Manifest = read_json(&path)?;
    match m.run {
        Run::Train { model, .. } => Ok(model),
        _ => Err(Error::Config(format!("{} is not a training manifest", path.display()))),
    }
}

fn resolve_model(args: &CkptArgs) -> Result<ModelSpec> {
    let spec = match &args.model {
        Some(p) => read_json(p)?,
        None => model_from_ckpt(&args.ckpt)?,
    };
    Ok(spec)
}

fn resolve(cmd: Command) -> Result<Run> {
    Ok(match cmd {
        Command::Generate {
            task,
            episodes,
            seed,
            first_stream,
            out,
        } => {
            let task: TaskSpec = read_json(&task)?;
            let seed = seed.unwrap_or(task.seed);
            Run::Generate {
                task,
                episodes,
                seed,
                first_stream,
                out,
            }
        }
        Command::Train {
            model,
            task,
            config,
            out,
            metrics,
            overrides: o,
        } => {
            let model: ModelSpec = read_json(&model)?;
            let mut task: TaskSpec = read_json(&task)?;
            let mut config: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::desk(),
            };
            if let Some(v) = o.epochs {
                config.epochs = v;
            }
            if let Some(v) = o.iters_per_epoch {
                config.iters_per_epoch = v;
            }
            if let Some(v) = o.batch_size {
                config.batch_size = v;
            }
            if let Some(v) = o.learning_rate {
                config.learning_rate = v;
            }
            if let Some(v) = o.seed {
                config.seed = v;
            }
            if let Some(v) = o.eval_episodes {
                config.eval_episodes = v;
            }
            if let Some(v) = o.eval_every {
                config.eval_every = v;
            }
            if let Some(v) = o.task_seed {
                task.seed = v;
            }
            Run::Train {
                model,
                task,
                config,
                out,
                metrics,
            }
        }
        Command::Eval {
            ckpt,
            corpus,
            out,
            oracle,
        } => Run::Eval {
            model: resolve_model(&ckpt)?,
            ckpt: ckpt.ckpt,
            corpus,
            oracle,
            out,
        },
        Command::Sample {
            ckpt,
            ctx,
            grid,
            n_samples,
            seed,
            noiseless,
            out,
        } => Run::Sample {
            model: resolve_model(&ckpt)?,
            ckpt: ckpt.ckpt,
            corpus: ctx.corpus,
            episode_index: ctx.episode_index,
            grid: parse_grid(&grid)?,
            n_samples,
            seed: seed.unwrap_or(DEFAULT_SAMPLE_SEED),
            noiseless,
            out,
        },
        Command::Cov {
            ckpt,
            ctx,
            grid,
            oracle,
            out,
        } => Run::Cov {
            model: resolve_model(&ckpt)?,
            ckpt: ckpt.ckpt,
            corpus: ctx.corpus,
            episode_index: ctx.episode_index,
            grid: parse_grid(&grid)?,
            oracle,
            out,
        },
        Command::EventProb {
            ckpt,
            ctx,
            grid,
            threshold,
            mode,
            n_samples,
            seed,
            out,
        } => Run::EventProb {
            model: resolve_model(&ckpt)?,
            ckpt: ckpt.ckpt,
            corpus: ctx.corpus,
            episode_index: ctx.episode_index,
            grid: grid.as_deref().map(parse_grid).transpose()?,
            threshold,
            mode: mode.into(),
            n_samples,
            seed: seed.unwrap_or(DEFAULT_SAMPLE_SEED),
            out,
        },
        Command::Replay { .. } => unreachable!("replay is dispatched before resolution"),
    })
}

struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn record(&mut self, path: &Path) -> Result<()> {
        self.0.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn params(&mut self, model: &ModelSpec, ckpt: &Path) -> Result<(Model, ParameterStore)> {
        self.record(ckpt)?;
        let model = Model::new(model.clone())?;
        let params = checkpoint::load(ckpt)?;
        model.check_params(&params)?;
        Ok((model, params))
    }

    /// Episode `index` of the corpus (and its task), or an empty context.
    fn episode(&mut self, corpus: Option<&Path>, index: usize) -> Result<(Dataset, Option<TaskSpec>)> {
        let Some(path) = corpus else {
            return Ok((Dataset::default(), None));
        };
        self.record(path)?;
        let mut c = Corpus::load(path)?;
        if index >= c.episodes.len() {
            return Err(Error::Config(format!(
                "episode index {index} out of range for {} episodes",
                c.episodes.len()
            )));
        }
        Ok((c.episodes.swap_remove(index), Some(c.header.task)))
    }
}

/// Execute a resolved run, writing its artifacts and manifest.
pub fn execute(run: &Run) -> Result<Executed> {
    let mut inputs = Inputs(BTreeMap::new());
    let mut written: Vec<&Path> = Vec::new();
    let mut diverged = None;
    match run {
        Run::Generate {
            task,
            episodes,
            seed,
            first_stream,
            out,
        } => {
            eprintln!("generating {episodes} episodes (seed {seed})");
            let corpus = Corpus::generate(task, *seed, *episodes, *first_stream)?;
            corpus.write(create(out)?)?;
            written.push(out);
        }
        Run::Train {
            model,
            task,
            config,
            out,
            metrics,
        } => {
            model.validate()?;
            config.validate()?;
            task.validate()?;
            let eval_set = if config.eval_every > 0 && config.eval_episodes > 0 {
                Some(Corpus::eval_set(task, config.eval_episodes)?)
            } else {
                None
            };
            eprintln!(
                "training {} for {} epochs x {} iterations",
                model.label(),
                config.epochs,
                config.iters_per_epoch
            );
            let outcome = train::train_with(model, task, config, eval_set.as_ref(), |r| match r.eval {
                Some(e) => eprintln!(
                    "epoch {:>3}  train ll {:>10.4}  eval ll {:>10.4} ({:.4}/pt)",
                    r.epoch, r.train.loglik_joint, e.loglik_joint, e.loglik_per_point
                ),
                None => eprintln!("epoch {:>3}  train ll {:>10.4}", r.epoch, r.train.loglik_joint),
            })?;
            checkpoint::save(&outcome.params, out)?;
            train::write_metrics_csv(&outcome.metrics, create(metrics)?)?;
            written.push(out);
            written.push(metrics);
            if let TrainStatus::Diverged {
                epoch,
                iter,
                seed,
                stream,
                reason,
            } = outcome.status
            {
                diverged = Some(format!(
                    "training diverged at epoch {epoch} iteration {iter} (task seed {seed}, stream {stream}): {reason}"
                ));
            }
        }
        Run::Eval {
            model,
            ckpt,
            corpus,
            oracle,
            out,
        } => {
            let (m, params) = inputs.params(model, ckpt)?;
            inputs.record(corpus)?;
            let c = Corpus::load(corpus)?;
            let summary = eval::evaluate(&m, &params, &c, *oracle)?;
            for row in &summary.rows {
                eprintln!(
                    "{:<24} joint {:>10.4} ± {:.4}   per point {:>8.4} ± {:.4}",
                    row.name, row.joint.mean, row.joint.std_error, row.per_point.mean, row.per_point.std_error
                );
            }
            write_json(out, &summary)?;
            written.push(out);
        }
        Run::Sample {
            model,
            ckpt,
            corpus,
            episode_index,
            grid,
            n_samples,
            seed,
            noiseless,
            out,
        } => {
            let (m, params) = inputs.params(model, ckpt)?;
            let (ep, _) = inputs.episode(corpus.as_deref(), *episode_index)?;
            let pred = m.predict(&params, &ep.x_c, &ep.y_c, grid)?;
            let draws = eval::sample_functions(&pred, *n_samples, *noiseless, &mut episode_rng(*seed, 0))?;
            eval::write_matrix_csv(create(out)?, grid, &draws)?;
            written.push(out);
        }
        Run::Cov {
            model,
            ckpt,
            corpus,
            episode_index,
            grid,
            oracle,
            out,
        } => {
            let (m, params) = inputs.params(model, ckpt)?;
            let (ep, task) = inputs.episode(corpus.as_deref(), *episode_index)?;
            let cov = if *oracle {
                let task = task.ok_or_else(|| Error::Config("--oracle needs --corpus".into()))?;
                eval::oracle_covariance(&task.kernel, task.noise_var, &ep, grid)?
            } else {
                eval::extract_covariance(&m, &params, &ep, grid)?
            };
            eval::write_matrix_csv(create(out)?, grid, &cov)?;
            written.push(out);
        }
        Run::EventProb {
            model,
            ckpt,
            corpus,
            episode_index,
            grid,
            threshold,
            mode,
            n_samples,
            seed,
            out,
        } => {
            let (m, params) = inputs.params(model, ckpt)?;
            let (ep, _) = inputs.episode(corpus.as_deref(), *episode_index)?;
            let xs = match grid {
                Some(g) => g.clone(),
                None if !ep.x_t.is_empty() => ep.x_t.clone(),
                None => return Err(Error::Config("event-prob needs --grid or a corpus episode".into())),
            };
            let pred = m.predict(&params, &ep.x_c, &ep.y_c, &xs)?;
            let r = eval::event_probability(&pred, *threshold, *mode, *n_samples, &mut episode_rng(*seed, 0))?;
            eprintln!("P = {:.4} ± {:.4}", r.estimate, r.std_error);
            write_json(out, &r)?;
            written.push(out);
        }
    }
    let mut artifacts = BTreeMap::new();
    for p in written {
        artifacts.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = Manifest {
        run: run.clone(),
        inputs: inputs.0,
        artifacts,
    };
    write_json(&manifest_path(run.primary_out()), &manifest)?;
    Ok(Executed { manifest, diverged })
}

impl Run {
    pub fn primary_out(&self) -> &Path {
        match self {
            Run::Generate { out, .. }
            | Run::Train { out, .. }
            | Run::Eval { out, .. }
            | Run::Sample { out, .. }
            | Run::Cov { out, .. }
            | Run::EventProb { out, .. } => out,
        }
    }

    /// Same run with every written path moved under `dir`.
    fn relocated(&self, dir: &Path) -> Run {
        let mv = |p: &PathBuf| dir.join(p.file_name().unwrap_or(p.as_os_str()));
        let mut r = self.clone();
        match &mut r {
            Run::Train { out, metrics, .. } => {
                *out = mv(out);
                *metrics = mv(metrics);
            }
            Run::Generate { out, .. }
            | Run::Eval { out, .. }
            | Run::Sample { out, .. }
            | Run::Cov { out, .. }
            | Run::EventProb { out, .. } => *out = mv(out),
        }
        r
    }
}

/// Re-execute a manifest; errors if any input or artifact hash differs.
pub fn replay(manifest: &Path, out_dir: Option<&Path>) -> Result<Executed> {
    let recorded: Manifest = read_json(manifest)?;
    for (path, hash) in &recorded.inputs {
        let now = sha256_file(Path::new(path))?;
        if &now != hash {
            return Err(Error::Config(format!(
                "input {path} changed since the manifest was written"
            )));
        }
    }
    let run = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            recorded.run.relocated(d)
        }
        None => recorded.run.clone(),
    };
    let done = execute(&run)?;
    let by_name = |m: &BTreeMap<String, String>| -> BTreeMap<OsString, String> {
        m.iter()
            .map(|(p, h)| (Path::new(p).file_name().unwrap_or_default().to_owned(), h.clone()))
            .collect()
    };
    let (old, new) = (by_name(&recorded.artifacts), by_name(&done.manifest.artifacts));
    if old != new {
        return Err(Error::Config(format!(
            "replayed artifacts differ: recorded {old:?}, got {new:?}"
        )));
    }
    eprintln!("replay reproduced {} artifact(s)", new.len());
    Ok(done)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Replay { manifest, out_dir } => replay(&manifest, out_dir.as_deref()),
        cmd => resolve(cmd).and_then(|run| execute(&run)),
    };
    match result {
        Ok(Executed {
            diverged: Some(msg), ..
        }) => {
            eprintln!("error: {msg}");
            EXIT_NUMERIC
        }
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("-1:1:5").unwrap(), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("0.5:2:1").unwrap(), vec![0.5]);
        for bad in ["1:0:3", "0:1", "0:1:0", "a:1:2"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_cli(["gnp", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_cli(["gnp", "generate", "--episodes", "3"]), EXIT_USAGE);
        assert_eq!(run_cli(["gnp", "--help"]), EXIT_OK);
    }

    #[test]
    fn full_scale_config_file_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let file = |name: &str, text: &str| {
            let p = dir.path().join(name);
            std::fs::write(&p, text).unwrap();
            p.display().to_string()
        };
        let model = file("m.json", r#"{"encoder":"conv","head":"kvv"}"#);
        let task = file("t.json", r#"{"kernel":{"kind":"eq","variance":1.0,"lengthscale":1.0}}"#);
        let cfg = file(
            "c.json",
            r#"{"epochs":100,"iters_per_epoch":1024,"batch_size":16,"learning_rate":5e-4}"#,
        );
        let argv = [
            "gnp",
            "train",
            "--model",
            &model,
            "--task",
            &task,
            "--config",
            &cfg,
            "--out",
            "x",
            "--metrics",
            "y",
        ];
        let Run::Train { config, .. } = resolve(Cli::try_parse_from(argv).unwrap().command).unwrap() else {
            panic!("not a training run");
        };
        assert_eq!(config, TrainConfig::full_scale());
        assert_eq!(
            (
                config.epochs,
                config.iters_per_epoch,
                config.batch_size,
                config.learning_rate
            ),
            (100, 1024, 16, 5e-4)
        );
    }

    #[test]
    fn event_mode_accepts_both_spellings() {
        for mode in ["all_above", "all-above", "any_below"] {
            let argv = [
                "gnp",
                "event-prob",
                "--ckpt",
                "c",
                "--threshold",
                "-1",
                "--mode",
                mode,
                "--out",
                "o",
            ];
            assert!(Cli::try_parse_from(argv).is_ok(), "{mode}");
        }
    }

    #[test]
    fn manifest_path_appends_suffix() {
        assert_eq!(
            manifest_path(Path::new("a/ckpt.gnpc")),
            PathBuf::from("a/ckpt.gnpc.manifest.json")
        );
    }
}
