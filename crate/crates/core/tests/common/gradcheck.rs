//! Central finite-difference checks of tape gradients.

use super::*;
use gnp::model::Model;
use gnp::tape::{Tape, Var};
use gnp::Tensor;
use rand::Rng;

const SEEDS: u64 = 50;
pub const TOL: f64 = 1e-5;

fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let t = uniform(rng, shape, 0.1, 1.5);
    let signs = uniform(rng, shape, -1.0, 1.0);
    Tensor::new(
        shape.to_vec(),
        t.data().iter().zip(signs.data()).map(|(a, s)| a * s.signum()).collect(),
    )
    .unwrap()
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

/// Worst error of `case` over all seeds, recorded under `name`.
fn run<F>(out: &mut Vec<(String, f64)>, name: &str, mut case: F)
where
    F: FnMut(u64) -> f64,
{
    let worst = (0..SEEDS).map(&mut case).fold(0.0, f64::max);
    out.push((name.to_string(), worst));
}

fn elementwise_binary_with_broadcasting(out: &mut Vec<(String, f64)>) {
    type Bin = fn(&mut Tape, Var, Var) -> gnp::Result<Var>;
    let ops: [(&str, Bin); 4] = [
        ("add", Tape::add),
        ("sub", Tape::sub),
        ("mul", Tape::mul),
        ("div", Tape::div),
    ];
    for (name, op) in ops {
        run(out, name, |seed| {
            let mut r = rng(seed);
            let (a, b, _) = dims(&mut r);
            let rhs_shape = match seed % 4 {
                0 => vec![a, b],
                1 => vec![b],
                2 => vec![a, 1],
                _ => vec![1],
            };
            let x = uniform(&mut r, &[a, b], -2.0, 2.0);
            let y = away_from_zero(&mut r, &rhs_shape);
            let (x, y) = if seed % 2 == 0 {
                (x, y)
            } else {
                (y.clone(), away_from_zero(&mut r, &[a, b]))
            };
            gradient_check(&[x, y], |t, v| op(t, v[0], v[1]), seed)
        });
    }
}

fn elementwise_unary(out: &mut Vec<(String, f64)>) {
    type Un = fn(&mut Tape, Var) -> gnp::Result<Var>;
    let ops: [(&str, Un); 7] = [
        ("neg", Tape::neg),
        ("exp", Tape::exp),
        ("log", |t, x| {
            let s = t.square(x)?;
            let s = t.shift(s, 0.1)?;
            t.log(s)
        }),
        ("tanh", Tape::tanh),
        ("relu", Tape::relu),
        ("softplus", Tape::softplus),
        ("square", Tape::square),
    ];
    for (name, op) in ops {
        run(out, name, |seed| {
            let mut r = rng(seed);
            let (a, b, _) = dims(&mut r);
            gradient_check(&[away_from_zero(&mut r, &[a, b])], |t, v| op(t, v[0]), seed)
        });
    }
    run(out, "scale_shift", |seed| {
        let mut r = rng(seed);
        let (a, _, _) = dims(&mut r);
        gradient_check(
            &[uniform(&mut r, &[a], -1.0, 1.0)],
            |t, v| {
                let s = t.scale(v[0], -1.7)?;
                t.shift(s, 0.3)
            },
            seed,
        )
    });
}

fn matmul_and_transpose(out: &mut Vec<(String, f64)>) {
    run(out, "matmul", |seed| {
        let mut r = rng(seed);
        let (a, k, c) = dims(&mut r);
        let x = uniform(&mut r, &[a, k], -1.0, 1.0);
        let y = uniform(&mut r, &[k, c], -1.0, 1.0);
        gradient_check(&[x, y], |t, v| t.matmul(v[0], v[1]), seed)
    });
    run(out, "transpose", |seed| {
        let mut r = rng(seed);
        let (a, b, _) = dims(&mut r);
        let x = uniform(&mut r, &[a, b], -1.0, 1.0);
        gradient_check(&[x], |t, v| t.transpose(v[0]), seed)
    });
}

fn spd(r: &mut impl Rng, n: usize) -> Tensor {
    let x = uniform(r, &[n, n], -1.0, 1.0);
    let mut a = x.matmul(&x.transpose2()).unwrap();
    for i in 0..n {
        let v = a.at(i, i) + 1.0;
        a.set(i, i, v);
    }
    a
}

fn cholesky_solve_and_diag(out: &mut Vec<(String, f64)>) {
    run(out, "cholesky", |seed| {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        gradient_check(&[spd(&mut r, n)], |t, v| t.cholesky(v[0]), seed)
    });
    run(out, "solve_lower", |seed| {
        let mut r = rng(seed);
        let (n, m, _) = dims(&mut r);
        let mut l = uniform(&mut r, &[n, n], -0.5, 0.5);
        for i in 0..n {
            l.set(i, i, 1.0 + r.random_range(0.0..1.0));
            for j in i + 1..n {
                l.set(i, j, 0.0);
            }
        }
        let b = uniform(&mut r, &[n, m], -1.0, 1.0);
        gradient_check(&[l, b], |t, v| t.solve_lower(v[0], v[1]), seed)
    });
    run(out, "diag", |seed| {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        gradient_check(&[uniform(&mut r, &[n, n], -1.0, 1.0)], |t, v| t.diag(v[0]), seed)
    });
    run(out, "logdet_via_cholesky", |seed| {
        let mut r = rng(seed);
        let n = r.random_range(1..6);
        gradient_check(
            &[spd(&mut r, n)],
            |t, v| {
                let l = t.cholesky(v[0])?;
                let d = t.diag(l)?;
                let ld = t.log(d)?;
                t.sum(ld, None)
            },
            seed,
        )
    });
}

fn distances_reductions_and_shapes(out: &mut Vec<(String, f64)>) {
    run(out, "sq_dist", |seed| {
        let mut r = rng(seed);
        let (n, m, d) = dims(&mut r);
        let a = uniform(&mut r, &[n, d], -1.0, 1.0);
        let b = uniform(&mut r, &[m, d], -1.0, 1.0);
        gradient_check(&[a, b], |t, v| t.sq_dist(v[0], v[1]), seed)
    });
    run(out, "sq_dist_self", |seed| {
        let mut r = rng(seed);
        let (n, _, d) = dims(&mut r);
        let a = uniform(&mut r, &[n, d], -1.0, 1.0);
        gradient_check(&[a], |t, v| t.sq_dist(v[0], v[0]), seed)
    });
    for axis in [None, Some(0), Some(1)] {
        run(out, "sum", |seed| {
            let mut r = rng(seed);
            let (a, b, _) = dims(&mut r);
            gradient_check(&[uniform(&mut r, &[a, b], -1.0, 1.0)], |t, v| t.sum(v[0], axis), seed)
        });
        run(out, "mean", |seed| {
            let mut r = rng(seed);
            let (a, b, _) = dims(&mut r);
            gradient_check(&[uniform(&mut r, &[a, b], -1.0, 1.0)], |t, v| t.mean(v[0], axis), seed)
        });
    }
    run(out, "reshape", |seed| {
        let mut r = rng(seed);
        let (a, b, _) = dims(&mut r);
        gradient_check(
            &[uniform(&mut r, &[a, b], -1.0, 1.0)],
            |t, v| t.reshape(v[0], &[b * a]),
            seed,
        )
    });
    run(out, "broadcast_to", |seed| {
        let mut r = rng(seed);
        let (a, b, _) = dims(&mut r);
        gradient_check(
            &[uniform(&mut r, &[1, b], -1.0, 1.0)],
            |t, v| t.broadcast_to(v[0], &[a, b]),
            seed,
        )
    });
    for axis in [0, 1] {
        run(out, "concat", |seed| {
            let mut r = rng(seed);
            let (a, b, c) = dims(&mut r);
            let (sa, sb) = if axis == 0 { ([a, c], [b, c]) } else { ([c, a], [c, b]) };
            let x = uniform(&mut r, &sa, -1.0, 1.0);
            let y = uniform(&mut r, &sb, -1.0, 1.0);
            gradient_check(&[x, y], |t, v| t.concat(&[v[0], v[1]], axis), seed)
        });
        run(out, "slice", |seed| {
            let mut r = rng(seed);
            let (a, b, _) = dims(&mut r);
            let x = uniform(&mut r, &[a + 3, b + 3], -1.0, 1.0);
            let start = r.random_range(0..3);
            gradient_check(&[x], |t, v| t.slice(v[0], axis, start, 2), seed)
        });
        run(out, "softmax", |seed| {
            let mut r = rng(seed);
            let (a, b, _) = dims(&mut r);
            gradient_check(
                &[uniform(&mut r, &[a, b], -2.0, 2.0)],
                |t, v| t.softmax(v[0], axis),
                seed,
            )
        });
    }
}

fn conv1d_and_safe_div(out: &mut Vec<(String, f64)>) {
    run(out, "conv1d", |seed| {
        let mut r = rng(seed);
        let (ci, co, _) = dims(&mut r);
        let n = r.random_range(1..9);
        let k = [1, 3, 5][r.random_range(0..3)];
        let x = uniform(&mut r, &[ci, n], -1.0, 1.0);
        let w = uniform(&mut r, &[co, ci, k], -1.0, 1.0);
        let b = uniform(&mut r, &[co], -1.0, 1.0);
        gradient_check(&[x, w, b], |t, v| t.conv1d(v[0], v[1], v[2]), seed)
    });
    run(out, "safe_div", |seed| {
        let mut r = rng(seed);
        let (a, _, _) = dims(&mut r);
        let num = uniform(&mut r, &[a], -1.0, 1.0);
        let den = uniform(&mut r, &[a], 0.2, 2.0);
        gradient_check(&[num, den], |t, v| t.safe_div(v[0], v[1], 1e-8), seed)
    });
}

/// Worst error per differentiable op over all seeds.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    elementwise_binary_with_broadcasting(&mut out);
    elementwise_unary(&mut out);
    matmul_and_transpose(&mut out);
    cholesky_solve_and_diag(&mut out);
    distances_reductions_and_shapes(&mut out);
    conv1d_and_safe_div(&mut out);
    out
}

/// Tape gradient of the full episode loss against central differences
/// (step 1e-5) on every parameter entry, for all nine models on a
/// 3-context / 4-target episode.
pub fn model_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for enc in ENCODERS {
        for head in HEADS {
            let spec = small_spec(enc, head);
            let model = Model::new(spec.clone()).unwrap();
            let worst = (0..2u64)
                .map(|seed| {
                    let params = generic_point(model.init_params(seed), seed);
                    let ep = random_episode(&mut rng(100 + seed), 3, 4);
                    full_loss_error(&model, &params, &ep)
                })
                .fold(0.0, f64::max);
            out.push((spec.label(), worst));
        }
    }
    out
}

/// Zero biases park far-field pre-activations on the ReLU kink, where the
/// loss is not differentiable; move every bias to a random nonzero value.
fn generic_point(mut params: gnp::ParameterStore, seed: u64) -> gnp::ParameterStore {
    let mut r = rng(7000 + seed);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
    }
    params
}

fn full_loss_error(model: &Model, params: &gnp::ParameterStore, ep: &gnp::Dataset) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = model.forward(&mut tape, &bound, &ep.x_c, &ep.y_c, &ep.x_t).unwrap();
    let ll = vars.loglik(&mut tape, &ep.y_t).unwrap();
    let loss = tape.neg(ll).unwrap();
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, value) in params.iter() {
        let g = grads
            .get(bound[name.as_str()])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in 0..value.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let up = -model.loglik(&p, ep).unwrap();
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = -model.loglik(&p, ep).unwrap();
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i], numeric, 1e-2));
        }
    }
    worst
}
