//! Model configuration and the full prediction map: encoder → query → head.

use serde::{Deserialize, Serialize};

use crate::data::{episode_rng, Dataset};
use crate::encoders::{AttentiveEncoder, ConvEncoder, DeepSetEncoder, Encoder};
use crate::error::{Error, Result};
use crate::heads::{GaussianPredictive, Head, HeadKind, PredictiveVars};
use crate::nn::{Bound, ConvStack, Mlp, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// ChaCha stream used for parameter initialisation.
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[serde(rename = "deepset")]
    DeepSet,
    Attentive,
    Conv,
}

impl EncoderKind {
    /// Conventional family name of the resulting model.
    pub fn family(self) -> &'static str {
        match self {
            EncoderKind::DeepSet => "GNP",
            EncoderKind::Attentive => "AGNP",
            EncoderKind::Conv => "ConvGNP",
        }
    }
}

fn d128() -> usize {
    128
}
fn d3() -> usize {
    3
}
fn d8() -> usize {
    8
}
fn d64() -> usize {
    64
}
fn d6() -> usize {
    6
}
fn d5() -> usize {
    5
}
fn default_init_lengthscale() -> f64 {
    0.2
}
fn default_margin() -> f64 {
    0.1
}
fn default_domain() -> [f64; 2] {
    [-2.0, 2.0]
}

/// Architecture of one model. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderKind,
    pub head: HeadKind,
    /// Basis count (`linear`) or embedding size (`kvv`); head default when absent.
    #[serde(default)]
    pub d_g: Option<usize>,
    #[serde(default = "d128")]
    pub width: usize,
    /// Linear layers per MLP.
    #[serde(default = "d3")]
    pub depth: usize,
    #[serde(default = "d128")]
    pub rep_dim: usize,
    #[serde(default = "d8")]
    pub attention_heads: usize,
    /// Attention score multiplier; `1/√head_dim` when absent.
    #[serde(default)]
    pub attention_scale: Option<f64>,
    /// Concatenate a DeepSet summary to the attentive representation.
    #[serde(default)]
    pub global_vector: bool,
    #[serde(default = "d64")]
    pub conv_channels: usize,
    #[serde(default = "d6")]
    pub conv_layers: usize,
    #[serde(default = "d5")]
    pub conv_kernel: usize,
    /// Initial SetConv lengthscale.
    #[serde(default = "default_init_lengthscale")]
    pub init_lengthscale: f64,
    #[serde(default = "default_margin")]
    pub grid_margin: f64,
    /// Grid spacing; half the initial lengthscale when absent.
    #[serde(default)]
    pub grid_spacing: Option<f64>,
    /// Input range the SetConv grid always covers.
    #[serde(default = "default_domain")]
    pub grid_domain: [f64; 2],
}

impl ModelSpec {
    pub fn new(encoder: EncoderKind, head: HeadKind) -> Self {
        ModelSpec {
            encoder,
            head,
            d_g: None,
            width: d128(),
            depth: d3(),
            rep_dim: d128(),
            attention_heads: d8(),
            attention_scale: None,
            global_vector: false,
            conv_channels: d64(),
            conv_layers: d6(),
            conv_kernel: d5(),
            init_lengthscale: default_init_lengthscale(),
            grid_margin: default_margin(),
            grid_spacing: None,
            grid_domain: default_domain(),
        }
    }

    pub fn d_g(&self) -> usize {
        self.d_g.unwrap_or_else(|| self.head.default_d_g())
    }

    pub fn grid_spacing(&self) -> f64 {
        self.grid_spacing.unwrap_or(self.init_lengthscale / 2.0)
    }

    /// e.g. `ConvGNP-kvv`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.encoder.family(), self.head.name())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.head != HeadKind::MeanField && self.d_g() == 0 {
            return bad("d_g must be at least 1".into());
        }
        if self.width == 0 || self.rep_dim == 0 || self.depth == 0 {
            return bad("width, rep_dim and depth must be positive".into());
        }
        if self.attention_heads == 0 || !self.rep_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "rep_dim {} must be divisible by attention_heads {}",
                self.rep_dim, self.attention_heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) || self.conv_layers == 0 || self.conv_channels == 0 {
            return bad("conv_kernel must be odd; conv_layers and conv_channels positive".into());
        }
        let [lo, hi] = self.grid_domain;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad(format!("grid_domain must satisfy lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.init_lengthscale > 0.0) || !(self.grid_spacing() > 0.0) || !(self.grid_margin >= 0.0) {
            return bad("init_lengthscale and grid_spacing must be positive, grid_margin non-negative".into());
        }
        Ok(())
    }
}

/// A prediction map `(x_c, y_c, x_t) → N(m, K + σ²I)`.
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub head: Head,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let s = &spec;
        let encoder = match s.encoder {
            EncoderKind::DeepSet => Encoder::DeepSet(DeepSetEncoder::new("enc.deepset", s.width, s.depth, s.rep_dim)),
            EncoderKind::Attentive => Encoder::Attentive(AttentiveEncoder {
                keys: Mlp::uniform("enc.attn.key", 1, s.width, s.rep_dim, s.depth),
                values: Mlp::uniform("enc.attn.value", 2, s.width, s.rep_dim, s.depth),
                output: Mlp::new("enc.attn.out", vec![s.rep_dim, s.rep_dim]),
                heads: s.attention_heads,
                dim: s.rep_dim,
                scale: s.attention_scale,
                global: s
                    .global_vector
                    .then(|| DeepSetEncoder::new("enc.global", s.width, s.depth, s.rep_dim)),
            }),
            EncoderKind::Conv => {
                let mut channels = vec![2];
                channels.extend(std::iter::repeat_n(s.conv_channels, s.conv_layers));
                Encoder::Conv(ConvEncoder {
                    cnn: ConvStack::new("enc.conv.cnn", channels, s.conv_kernel),
                    init_lengthscale: s.init_lengthscale,
                    margin: s.grid_margin,
                    spacing: s.grid_spacing(),
                    domain: s.grid_domain,
                })
            }
        };
        let input = encoder.output_dim() + usize::from(encoder.decoder_sees_target_input());
        let head = Head::new(s.head, s.d_g(), input, s.width, s.depth);
        Ok(Model { spec, encoder, head })
    }

    /// Fresh parameters; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let mut rng = episode_rng(seed, INIT_STREAM);
        let mut store = ParameterStore::new();
        self.encoder.init(&mut rng, &mut store);
        self.head.init(&mut rng, &mut store);
        store
    }

    /// Per-target decoder input.
    pub fn features(&self, tape: &mut Tape, p: &Bound, x_c: &[f64], y_c: &[f64], x_t: &[f64]) -> Result<Var> {
        let rep = self.encoder.encode(tape, p, x_c, y_c, x_t)?;
        let q = self.encoder.query(tape, p, &rep, x_t)?;
        if self.encoder.decoder_sees_target_input() {
            let xt = tape.constant(Tensor::column(x_t.to_vec()));
            tape.concat(&[xt, q], 1)
        } else {
            Ok(q)
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x_c: &[f64], y_c: &[f64], x_t: &[f64]) -> Result<PredictiveVars> {
        if x_c.len() != y_c.len() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![x_c.len()],
                rhs: vec![y_c.len()],
            });
        }
        let f = self.features(tape, p, x_c, y_c, x_t)?;
        self.head.forward(tape, p, f)
    }

    pub fn predict(
        &self,
        params: &ParameterStore,
        x_c: &[f64],
        y_c: &[f64],
        x_t: &[f64],
    ) -> Result<GaussianPredictive> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let vars = self.forward(&mut tape, &p, x_c, y_c, x_t)?;
        Ok(vars.to_values(&tape))
    }

    /// Joint log-likelihood of an episode's targets, in nats.
    pub fn loglik(&self, params: &ParameterStore, ep: &Dataset) -> Result<f64> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let vars = self.forward(&mut tape, &p, &ep.x_c, &ep.y_c, &ep.x_t)?;
        let ll = vars.loglik(&mut tape, &ep.y_t)?;
        Ok(tape.value(ll).item())
    }

    /// Check a loaded parameter store against this architecture.
    pub fn check_params(&self, params: &ParameterStore) -> Result<()> {
        params.check_layout(&self.init_params(0))
    }
}
