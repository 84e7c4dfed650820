//! Context-set encoders: DeepSet, multi-head cross-attention, and SetConv + CNN.
//!
//! Every encoder first puts the context into a canonical order (ascending by
//! input, ties broken by output), so all pooled sums run in the same order
//! regardless of how the context was presented. This makes permutation
//! invariance exact rather than approximate.

use rand::Rng;

use crate::error::Result;
use crate::nn::{uniform_fan_in, Bound, ConvStack, Mlp, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Threshold below which the SetConv density channel counts as empty.
pub const DENSITY_EPS: f64 = 1e-8;

/// Context sorted by `(x, y)`.
pub fn canonical_order(x_c: &[f64], y_c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..x_c.len()).collect();
    idx.sort_by(|&a, &b| x_c[a].total_cmp(&x_c[b]).then(y_c[a].total_cmp(&y_c[b])));
    (
        idx.iter().map(|&i| x_c[i]).collect(),
        idx.iter().map(|&i| y_c[i]).collect(),
    )
}

/// Encoded context, ready to be queried at target inputs.
pub enum ContextRepresentation {
    /// Single vector `[1, d]` summarising the whole context.
    DeepSet { r: Var },
    /// Per-context keys and values `[n, d]`; `None` when the context is empty.
    Attentive {
        keys: Option<Var>,
        values: Option<Var>,
        global: Option<Var>,
    },
    /// Functional embedding: CNN channels `[c, g]` on a uniform grid.
    Conv {
        grid: Vec<f64>,
        spacing: f64,
        channels: Var,
    },
}

/// `φ` on each (x, y) pair, mean pooled, then `ρ`.
#[derive(Clone, Debug)]
pub struct DeepSetEncoder {
    pub phi: Mlp,
    pub rho: Mlp,
}

impl DeepSetEncoder {
    pub fn new(prefix: &str, width: usize, depth: usize, rep_dim: usize) -> Self {
        DeepSetEncoder {
            phi: Mlp::uniform(format!("{prefix}.phi"), 2, width, rep_dim, depth),
            rho: Mlp::uniform(format!("{prefix}.rho"), rep_dim, width, rep_dim, depth),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        self.phi.init(rng, store);
        self.rho.init(rng, store);
    }

    /// `[1, rep_dim]`. An empty context pools to the zero vector.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x_c: &[f64], y_c: &[f64]) -> Result<Var> {
        let (xs, ys) = canonical_order(x_c, y_c);
        let n = xs.len();
        let pooled = if n == 0 {
            tape.constant(Tensor::zeros(&[1, self.phi.output_dim()]))
        } else {
            let pairs: Vec<f64> = xs.iter().zip(&ys).flat_map(|(x, y)| [*x, *y]).collect();
            let input = tape.constant(Tensor::matrix(n, 2, pairs)?);
            let h = self.phi.forward(tape, p, input)?;
            let m = tape.mean(h, Some(0))?;
            tape.reshape(m, &[1, self.phi.output_dim()])?
        };
        self.rho.forward(tape, p, pooled)
    }
}

/// Multi-head scaled dot-product cross-attention from targets to context.
#[derive(Clone, Debug)]
pub struct AttentiveEncoder {
    pub keys: Mlp,
    pub values: Mlp,
    pub output: Mlp,
    pub heads: usize,
    pub dim: usize,
    /// Score multiplier; `1/√(dim/heads)` when `None`.
    pub scale: Option<f64>,
    pub global: Option<DeepSetEncoder>,
}

const ATTN_DEFAULT: &str = "enc.attn.default";

impl AttentiveEncoder {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        self.keys.init(rng, store);
        self.values.init(rng, store);
        self.output.init(rng, store);
        store.insert(ATTN_DEFAULT, uniform_fan_in(rng, self.dim, &[1, self.dim]));
        if let Some(g) = &self.global {
            g.init(rng, store);
        }
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, x_c: &[f64], y_c: &[f64]) -> Result<ContextRepresentation> {
        let (xs, ys) = canonical_order(x_c, y_c);
        let n = xs.len();
        let global = match &self.global {
            Some(g) => Some(g.encode(tape, p, &xs, &ys)?),
            None => None,
        };
        if n == 0 {
            return Ok(ContextRepresentation::Attentive {
                keys: None,
                values: None,
                global,
            });
        }
        let xin = tape.constant(Tensor::column(xs.clone()));
        let pairs: Vec<f64> = xs.iter().zip(&ys).flat_map(|(x, y)| [*x, *y]).collect();
        let xyin = tape.constant(Tensor::matrix(n, 2, pairs)?);
        let keys = self.keys.forward(tape, p, xin)?;
        let values = self.values.forward(tape, p, xyin)?;
        Ok(ContextRepresentation::Attentive {
            keys: Some(keys),
            values: Some(values),
            global,
        })
    }

    pub fn query(
        &self,
        tape: &mut Tape,
        p: &Bound,
        keys: Option<Var>,
        values: Option<Var>,
        x_t: &[f64],
    ) -> Result<Var> {
        let m = x_t.len();
        let (keys, values) = match (keys, values) {
            (Some(k), Some(v)) => (k, v),
            _ => return tape.broadcast_to(p[ATTN_DEFAULT], &[m, self.dim]),
        };
        let qin = tape.constant(Tensor::column(x_t.to_vec()));
        let q = self.keys.forward(tape, p, qin)?;
        let dh = self.dim / self.heads;
        let scale = self.scale.unwrap_or(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(keys, 1, h * dh, dh)?;
            let vh = tape.slice(values, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, 1)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat(&outs, 1)?;
        self.output.forward(tape, p, cat)
    }
}

/// SetConv onto a uniform grid, a CNN on the grid, and a SetConv readout.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub cnn: ConvStack,
    pub init_lengthscale: f64,
    pub margin: f64,
    pub spacing: f64,
    /// Input range always covered by the grid. Targets inside it never
    /// affect the grid, so predictions at one target do not depend on others.
    pub domain: [f64; 2],
}

const CONV_ENC_LS: &str = "enc.conv.log_lengthscale";
const CONV_DEC_LS: &str = "dec.conv.log_lengthscale";

/// Nodes `kΔ` of the lattice with spacing `Δ` that cover
/// `[min(xs) - margin, max(xs) + margin]`. Anchoring at the origin keeps
/// nodes aligned under shifts by multiples of `Δ` and nests the grid for `Δ/2`.
pub fn build_grid(xs: &[f64], margin: f64, spacing: f64) -> Vec<f64> {
    let (mut lo, mut hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 0.0;
    }
    let first = ((lo - margin) / spacing).floor() as i64;
    let last = ((hi + margin) / spacing).ceil() as i64;
    (first..=last).map(|k| k as f64 * spacing).collect()
}

/// `exp(-(a_i - b_j)² / 2ℓ²)` with `ℓ = exp(log_ls)` on the tape: `[len a, len b]`.
fn eq_weights(tape: &mut Tape, a: &[f64], b: &[f64], log_ls: Var) -> Result<Var> {
    let d2 = Tensor::from_fn2(a.len(), b.len(), |i, j| (a[i] - b[j]) * (a[i] - b[j]));
    let d2 = tape.constant(d2);
    let inv = tape.scale(log_ls, -2.0)?;
    let inv = tape.exp(inv)?;
    let inv = tape.scale(inv, -0.5)?;
    let z = tape.mul(d2, inv)?;
    tape.exp(z)
}

/// Density channel `Σ ψ(x_g - x_i)` and signal channel `Σ y_i ψ(x_g - x_i) / density`
/// (zero where the density is below [`DENSITY_EPS`]), each `[len grid]`.
pub(crate) fn set_conv(tape: &mut Tape, log_ls: Var, grid: &[f64], xs: &[f64], ys: &[f64]) -> Result<(Var, Var)> {
    let g = grid.len();
    if xs.is_empty() {
        let z = tape.constant(Tensor::zeros(&[g]));
        return Ok((z, z));
    }
    let w = eq_weights(tape, grid, xs, log_ls)?;
    let density = tape.sum(w, Some(1))?;
    let y = tape.constant(Tensor::column(ys.to_vec()));
    let s = tape.matmul(w, y)?;
    let s = tape.reshape(s, &[g])?;
    Ok((density, tape.safe_div(s, density, DENSITY_EPS)?))
}

impl ConvEncoder {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        store.insert(CONV_ENC_LS, Tensor::scalar(self.init_lengthscale.ln()));
        store.insert(CONV_DEC_LS, Tensor::scalar(self.init_lengthscale.ln()));
        self.cnn.init(rng, store);
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_c: &[f64],
        y_c: &[f64],
        x_t: &[f64],
    ) -> Result<ContextRepresentation> {
        let (xs, ys) = canonical_order(x_c, y_c);
        let [lo, hi] = self.domain;
        let outside = x_t.iter().filter(|&&x| x < lo || x > hi);
        let all: Vec<f64> = xs.iter().chain(&self.domain).chain(outside).copied().collect();
        let grid = build_grid(&all, self.margin, self.spacing);
        let g = grid.len();
        let (density, signal) = set_conv(tape, p[CONV_ENC_LS], &grid, &xs, &ys)?;
        let d = tape.reshape(density, &[1, g])?;
        let s = tape.reshape(signal, &[1, g])?;
        let input = tape.concat(&[d, s], 0)?;
        let channels = self.cnn.forward(tape, p, input)?;
        Ok(ContextRepresentation::Conv {
            grid,
            spacing: self.spacing,
            channels,
        })
    }

    /// `[m, channels]`: Σ_g ψ(x_t - x_g) h_g Δ.
    pub fn query(
        &self,
        tape: &mut Tape,
        p: &Bound,
        grid: &[f64],
        spacing: f64,
        channels: Var,
        x_t: &[f64],
    ) -> Result<Var> {
        let w = eq_weights(tape, x_t, grid, p[CONV_DEC_LS])?;
        let ht = tape.transpose(channels)?;
        let r = tape.matmul(w, ht)?;
        tape.scale(r, spacing)
    }
}

pub enum Encoder {
    DeepSet(DeepSetEncoder),
    Attentive(AttentiveEncoder),
    Conv(ConvEncoder),
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        match self {
            Encoder::DeepSet(e) => e.init(rng, store),
            Encoder::Attentive(e) => e.init(rng, store),
            Encoder::Conv(e) => e.init(rng, store),
        }
    }

    /// Width of the per-target vectors returned by [`Encoder::query`].
    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::DeepSet(e) => e.rho.output_dim(),
            Encoder::Attentive(e) => e.dim + e.global.as_ref().map_or(0, |g| g.rho.output_dim()),
            Encoder::Conv(e) => e.cnn.output_channels(),
        }
    }

    /// Whether decoders also see the raw target input. The convolutional
    /// encoder does not, which keeps the model translation equivariant.
    pub fn decoder_sees_target_input(&self) -> bool {
        !matches!(self, Encoder::Conv(_))
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_c: &[f64],
        y_c: &[f64],
        x_t: &[f64],
    ) -> Result<ContextRepresentation> {
        match self {
            Encoder::DeepSet(e) => Ok(ContextRepresentation::DeepSet {
                r: e.encode(tape, p, x_c, y_c)?,
            }),
            Encoder::Attentive(e) => e.encode(tape, p, x_c, y_c),
            Encoder::Conv(e) => e.encode(tape, p, x_c, y_c, x_t),
        }
    }

    /// Per-target representation `[len x_t, output_dim]`.
    pub fn query(&self, tape: &mut Tape, p: &Bound, rep: &ContextRepresentation, x_t: &[f64]) -> Result<Var> {
        let m = x_t.len();
        match (self, rep) {
            (Encoder::DeepSet(_), ContextRepresentation::DeepSet { r }) => {
                let d = tape.shape(*r)[1];
                tape.broadcast_to(*r, &[m, d])
            }
            (Encoder::Attentive(e), ContextRepresentation::Attentive { keys, values, global }) => {
                let att = e.query(tape, p, *keys, *values, x_t)?;
                match global {
                    Some(r) => {
                        let d = tape.shape(*r)[1];
                        let rb = tape.broadcast_to(*r, &[m, d])?;
                        tape.concat(&[att, rb], 1)
                    }
                    None => Ok(att),
                }
            }
            (
                Encoder::Conv(e),
                ContextRepresentation::Conv {
                    grid,
                    spacing,
                    channels,
                },
            ) => e.query(tape, p, grid, *spacing, *channels, x_t),
            _ => panic!("representation does not belong to this encoder"),
        }
    }
}
