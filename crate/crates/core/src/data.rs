//! Synthetic episode generation and the JSON-lines corpus format.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg;

/// First ChaCha stream id reserved for held-out evaluation episodes.
pub const EVAL_STREAM_BASE: u64 = 1 << 62;

/// One meta-learning episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub x_c: Vec<f64>,
    pub y_c: Vec<f64>,
    pub x_t: Vec<f64>,
    pub y_t: Vec<f64>,
}

impl Dataset {
    pub fn n_context(&self) -> usize {
        self.x_c.len()
    }

    pub fn n_target(&self) -> usize {
        self.x_t.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_c.len() != self.y_c.len() || self.x_t.len() != self.y_t.len() {
            return Err(Error::Corpus(format!(
                "episode lengths disagree: x_c {} y_c {} x_t {} y_t {}",
                self.x_c.len(),
                self.y_c.len(),
                self.x_t.len(),
                self.y_t.len()
            )));
        }
        if [&self.x_c, &self.y_c, &self.x_t, &self.y_t]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Corpus("episode contains non-finite values".into()));
        }
        Ok(())
    }
}

fn default_noise_var() -> f64 {
    0.0025
}
fn default_context_range() -> [usize; 2] {
    [3, 50]
}
fn default_n_target() -> usize {
    50
}
fn default_x_range() -> [f64; 2] {
    [-2.0, 2.0]
}

/// Distribution over episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kernel: KernelSpec,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default = "default_context_range")]
    pub n_context_range: [usize; 2],
    #[serde(default = "default_n_target")]
    pub n_target: usize,
    #[serde(default = "default_x_range")]
    pub x_range: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    /// Benchmark defaults: 3–50 context points, 50 targets on [-2, 2], noise 0.05².
    pub fn new(kernel: KernelSpec) -> Self {
        TaskSpec {
            kernel,
            noise_var: default_noise_var(),
            n_context_range: default_context_range(),
            n_target: default_n_target(),
            x_range: default_x_range(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let [lo, hi] = self.x_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("x_range must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        let [min, max] = self.n_context_range;
        if min < 1 || min > max {
            return Err(Error::Config(format!(
                "n_context_range must satisfy 1 <= min <= max, got [{min}, {max}]"
            )));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Config(format!(
                "noise_var must be positive, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }
}

/// The generator's RNG: ChaCha20 keyed by `seed`, positioned on `stream`.
/// Every episode owns one stream, so corpora can be produced in any order.
pub fn episode_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw one episode: context size, inputs, then joint GP outputs plus noise.
pub fn sample_episode<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let [min, max] = spec.n_context_range;
    let n = rng.random_range(min..=max);
    let [lo, hi] = spec.x_range;
    let mut draw_x = |count: usize| -> Vec<f64> { (0..count).map(|_| rng.random_range(lo..hi)).collect() };
    let x_c = draw_x(n);
    let x_t = draw_x(spec.n_target);
    let xs: Vec<f64> = x_c.iter().chain(&x_t).copied().collect();
    let mut y = sample_outputs(&spec.kernel, spec.noise_var, &xs, rng)?;
    let y_t = y.split_off(n);
    Ok(Dataset { x_c, y_c: y, x_t, y_t })
}

/// Joint GP draw at `xs` plus independent `N(0, noise_var)` noise on every output.
pub fn sample_outputs<R: Rng + ?Sized>(
    kernel: &KernelSpec,
    noise_var: f64,
    xs: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let total = xs.len();
    let k = kernel.matrix(xs, xs)?;
    let (l, _) = linalg::cholesky_jittered(k.data(), total)?;
    let z: Vec<f64> = (0..total).map(|_| rng.sample(StandardNormal)).collect();
    let noise_sd = noise_var.sqrt();
    Ok((0..total)
        .map(|i| {
            let f: f64 = l[i * total..i * total + i + 1].iter().zip(&z).map(|(a, b)| a * b).sum();
            let e: f64 = rng.sample(StandardNormal);
            f + noise_sd * e
        })
        .collect())
}

/// Independent episodes drawn sequentially from one RNG.
pub fn sample_batch<R: Rng + ?Sized>(spec: &TaskSpec, batch_size: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    (0..batch_size).map(|_| sample_episode(spec, rng)).collect()
}

/// Episode `stream` of the generator keyed by `seed`.
pub fn indexed_episode(spec: &TaskSpec, seed: u64, stream: u64) -> Result<Dataset> {
    sample_episode(spec, &mut episode_rng(seed, stream)).map_err(|e| e.in_episode(stream))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub task: TaskSpec,
    pub seed: u64,
    pub count: usize,
    /// First stream id; 0 for `generate`, [`EVAL_STREAM_BASE`] for eval corpora.
    #[serde(default)]
    pub first_stream: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub episodes: Vec<Dataset>,
}

impl Corpus {
    /// `count` episodes on consecutive streams starting at `first_stream`.
    pub fn generate(task: &TaskSpec, seed: u64, count: usize, first_stream: u64) -> Result<Corpus> {
        task.validate()?;
        let episodes = (0..count as u64)
            .map(|i| indexed_episode(task, seed, first_stream + i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            header: CorpusHeader {
                task: task.clone(),
                seed,
                count,
                first_stream,
            },
            episodes,
        })
    }

    /// Held-out corpus on the reserved evaluation streams of `task.seed`.
    pub fn eval_set(task: &TaskSpec, count: usize) -> Result<Corpus> {
        Corpus::generate(task, task.seed, count, EVAL_STREAM_BASE)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for ep in &self.episodes {
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: BufRead>(r: R) -> Result<Corpus> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Corpus("empty corpus file".into()))??;
        let header: CorpusHeader = serde_json::from_str(&header_line)?;
        let mut episodes = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let ep: Dataset =
                serde_json::from_str(&line).map_err(|e| Error::Corpus(format!("episode line {}: {e}", i + 1)))?;
            ep.validate()?;
            episodes.push(ep);
        }
        if episodes.len() != header.count {
            return Err(Error::Corpus(format!(
                "header declares {} episodes, found {}",
                header.count,
                episodes.len()
            )));
        }
        Ok(Corpus { header, episodes })
    }

    pub fn load(path: &std::path::Path) -> Result<Corpus> {
        let f = std::fs::File::open(path)?;
        Corpus::read(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_episode_shape() {
        let spec = TaskSpec::new(KernelSpec::eq());
        for s in 0..20 {
            let ep = indexed_episode(&spec, 7, s).unwrap();
            assert!((3..=50).contains(&ep.n_context()));
            assert_eq!(ep.n_target(), 50);
            assert!(ep.x_c.iter().chain(&ep.x_t).all(|x| (-2.0..2.0).contains(x)));
            ep.validate().unwrap();
        }
        assert_eq!(spec.noise_var, 0.0025);
    }

    #[test]
    fn batch_sizes() {
        let spec = TaskSpec::new(KernelSpec::matern52());
        let mut rng = episode_rng(1, 0);
        assert_eq!(sample_batch(&spec, 16, &mut rng).unwrap().len(), 16);
        assert_eq!(sample_batch(&spec, 1, &mut rng).unwrap().len(), 1);
        assert!(sample_batch(&spec, 0, &mut rng).is_err());
    }

    #[test]
    fn streams_are_independent_of_generation_order() {
        let spec = TaskSpec::new(KernelSpec::eq());
        let forward = Corpus::generate(&spec, 3, 4, 0).unwrap();
        let single = indexed_episode(&spec, 3, 2).unwrap();
        assert_eq!(forward.episodes[2], single);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = TaskSpec::new(KernelSpec::eq());
        let a = indexed_episode(&spec, 1, 0).unwrap();
        let b = indexed_episode(&spec, 2, 0).unwrap();
        assert_ne!(a.x_t, b.x_t);
    }

    #[test]
    fn corpus_roundtrip_is_exact() {
        let spec = TaskSpec::new(KernelSpec::weakly_periodic()).with_seed(5);
        let c = Corpus::eval_set(&spec, 3).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Corpus::read(&bytes[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(!bytes.contains(&b'\r'));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = TaskSpec::new(KernelSpec::eq());
        spec.x_range = [1.0, 1.0];
        assert!(spec.validate().is_err());
        let mut spec = TaskSpec::new(KernelSpec::eq());
        spec.n_context_range = [0, 5];
        assert!(spec.validate().is_err());
        let typo =
            serde_json::from_str::<TaskSpec>(r#"{"kernel":{"kind":"eq","variance":1,"lengthscale":1},"noise":0.1}"#);
        assert!(typo.is_err());
    }

    #[test]
    fn truncated_corpus_rejected() {
        let spec = TaskSpec::new(KernelSpec::eq());
        let c = Corpus::generate(&spec, 0, 2, 0).unwrap();
        let text = String::from_utf8(c.to_bytes().unwrap()).unwrap();
        let cut: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(Corpus::read(cut.as_bytes()).is_err());
    }
}
