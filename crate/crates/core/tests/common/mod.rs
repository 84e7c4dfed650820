#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;

use gnp::data::Dataset;
use gnp::heads::HeadKind;
use gnp::model::{EncoderKind, ModelSpec};
use gnp::tape::{Tape, Var};
use gnp::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const ENCODERS: [EncoderKind; 3] = [EncoderKind::DeepSet, EncoderKind::Attentive, EncoderKind::Conv];
pub const HEADS: [HeadKind; 3] = [HeadKind::MeanField, HeadKind::Linear, HeadKind::Kvv];

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Narrow model used wherever many forward passes are needed.
pub fn small_spec(encoder: EncoderKind, head: HeadKind) -> ModelSpec {
    let mut s = ModelSpec::new(encoder, head);
    s.width = 16;
    s.rep_dim = 8;
    s.depth = 2;
    s.attention_heads = 2;
    s.conv_channels = 6;
    s.conv_layers = 2;
    s.conv_kernel = 3;
    s.init_lengthscale = 0.2;
    s.d_g = match head {
        HeadKind::MeanField => None,
        _ => Some(4),
    };
    s
}

pub fn random_episode(rng: &mut impl Rng, n_c: usize, n_t: usize) -> Dataset {
    let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    Dataset {
        x_c: v(n_c, -2.0, 2.0),
        y_c: v(n_c, -1.5, 1.5),
        x_t: v(n_t, -2.0, 2.0),
        y_t: v(n_t, -1.5, 1.5),
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between the tape gradient and central differences
/// of `Σ w ⊙ f(inputs)` for fixed random weights `w`.
pub fn gradient_check<F>(inputs: &[Tensor], f: F, seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> gnp::Result<Var>,
{
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Var>, Tape, Var) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        let shape = t.value(out).shape().to_vec();
        let w = match weights {
            Some(w) => w.clone(),
            None => uniform(&mut rng(seed ^ 0xABCD), &shape, 0.5, 1.5),
        };
        let wv = t.constant(w.clone());
        let prod = t.mul(out, wv).unwrap();
        let root = t.sum(prod, None).unwrap();
        (t.value(root).item(), w, vars, t, root)
    };
    let (_, w, vars, tape, root) = eval(inputs, None);
    let grads = tape.backward(root).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape());
        let g = grads.get(vars[k]).unwrap_or(&zero);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i], numeric, 1e-2));
        }
    }
    worst
}
