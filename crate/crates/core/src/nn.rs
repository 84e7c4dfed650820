//! Named parameters and the small layer vocabulary the models are built from.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameters keyed by name. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Record every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Record every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }

    /// Same names and shapes as `reference`.
    pub fn check_layout(&self, reference: &ParameterStore) -> Result<()> {
        for (name, t) in &reference.params {
            match self.params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

/// Weights uniform in `±1/√fan_in`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output size");
        Mlp {
            prefix: prefix.into(),
            dims,
        }
    }

    /// Input width, hidden width repeated, output width; `layers` linear maps.
    pub fn uniform(prefix: impl Into<String>, input: usize, hidden: usize, output: usize, layers: usize) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, layers.max(1) - 1));
        dims.push(output);
        Mlp::new(prefix, dims)
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{}.w", self.prefix, layer)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{}.b", self.prefix, layer)
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        for l in 0..self.n_layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            store.insert(self.weight_name(l), uniform_fan_in(rng, i, &[i, o]));
            store.insert(self.bias_name(l), Tensor::zeros(&[o]));
        }
    }

    /// `x: [n, in] → [n, out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = p[self.weight_name(l).as_str()];
            let b = p[self.bias_name(l).as_str()];
            h = tape.matmul(h, w)?;
            h = tape.add(h, b)?;
            if l + 1 < self.n_layers() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Stack of same-padded 1-D convolutions with ReLU between layers.
#[derive(Clone, Debug)]
pub struct ConvStack {
    prefix: String,
    channels: Vec<usize>,
    kernel: usize,
}

impl ConvStack {
    pub fn new(prefix: impl Into<String>, channels: Vec<usize>, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        ConvStack {
            prefix: prefix.into(),
            channels,
            kernel,
        }
    }

    pub fn output_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    fn names(&self, l: usize) -> (String, String) {
        (format!("{}.{}.w", self.prefix, l), format!("{}.{}.b", self.prefix, l))
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParameterStore) {
        for l in 0..self.channels.len() - 1 {
            let (i, o) = (self.channels[l], self.channels[l + 1]);
            let (w, b) = self.names(l);
            store.insert(w, uniform_fan_in(rng, i * self.kernel, &[o, i, self.kernel]));
            store.insert(b, Tensor::zeros(&[o]));
        }
    }

    /// `x: [c_in, n] → [c_out, n]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let layers = self.channels.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let (w, b) = self.names(l);
            h = tape.conv1d(h, p[w.as_str()], p[b.as_str()])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
