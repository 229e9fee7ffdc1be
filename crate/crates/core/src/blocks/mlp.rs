use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

/// Per-column dropout streams. Column `j` of layer `k` draws its mask from
/// `streams[j].child(k)`, so a member's sample depends only on its own stream.
#[derive(Debug, Clone, Copy)]
pub enum Noise<'a> {
    Off,
    Columns(&'a [RngStream]),
}

/// Stream for each of `n` columns derived from one parent.
pub fn column_streams(stream: RngStream, n: usize) -> Vec<RngStream> {
    (0..n).map(|j| stream.child(j as u64)).collect()
}

/// Stack of affine layers. With a nonzero dropout rate every layer's input is
/// dropped (Monte-Carlo dropout), so a single-layer net is still stochastic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnSpec {
    pub name: String,
    pub input: usize,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout: f64,
}

impl SnnSpec {
    /// ReLU hidden layers and a linear output.
    pub fn relu(name: &str, input: usize, widths: &[usize], dropout: f64) -> Self {
        let mut activations = vec![Activation::Relu; widths.len()];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Linear;
        }
        SnnSpec {
            name: name.to_string(),
            input,
            widths: widths.to_vec(),
            activations,
            dropout,
        }
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.activations.len() {
            return Err(Error::Invalid(format!("{}: one activation per layer required", self.name)));
        }
        if self.activations.last() != Some(&Activation::Linear) {
            return Err(Error::Invalid(format!("{}: final layer must be linear", self.name)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("{}: dropout {} outside [0, 1)", self.name, self.dropout)));
        }
        Ok(())
    }

    pub fn weight(&self, k: usize) -> String {
        format!("{}.w{k}", self.name)
    }

    pub fn bias(&self, k: usize) -> String {
        format!("{}.b{k}", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, stream: RngStream) -> Result<()> {
        self.validate()?;
        let mut fan_in = self.input;
        for (k, &w) in self.widths.iter().enumerate() {
            store.insert_glorot(&self.weight(k), w, fan_in, stream.named(&self.weight(k)))?;
            store.insert(self.bias(k), crate::Tensor::zeros(w, 1))?;
            fan_in = w;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, noise: Noise) -> Result<Var> {
        let rows = tape.value(x).rows();
        if rows != self.input {
            return Err(Error::shape(
                "snn",
                format!("{} expects {} inputs, got {rows}", self.name, self.input),
            ));
        }
        let mut h = x;
        for (k, act) in self.activations.iter().enumerate() {
            if let Noise::Columns(streams) = noise {
                if self.dropout > 0.0 {
                    h = dropout_columns(tape, h, self.dropout, streams, k as u64)?;
                }
            }
            let w = tape.param(store, &self.weight(k))?;
            let b = tape.param(store, &self.bias(k))?;
            h = tape.matmul(w, h)?;
            h = tape.add_bias(h, b)?;
            h = match act {
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
                Activation::Linear => h,
            };
        }
        Ok(h)
    }
}

/// Inverted dropout whose column `j` mask is drawn from `streams[j].child(layer)`.
pub fn dropout_columns(tape: &mut Tape, x: Var, p: f64, streams: &[RngStream], layer: u64) -> Result<Var> {
    use rand::Rng;
    let (r, c) = (tape.value(x).rows(), tape.value(x).cols());
    if streams.len() != c {
        return Err(Error::shape(
            "dropout",
            format!("{} streams for {c} columns", streams.len()),
        ));
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = vec![0.0; r * c];
    for (j, s) in streams.iter().enumerate() {
        let mut rng = s.child(layer).rng();
        for i in 0..r {
            mask[i * c + j] = if rng.random::<f64>() >= p { keep } else { 0.0 };
        }
    }
    tape.dropout_with_mask(x, mask)
}

/// One posterior sample per column of `input` (Monte-Carlo dropout).
pub fn snn_sample(spec: &SnnSpec, store: &ParameterStore, input: &crate::Tensor, stream: RngStream) -> Result<crate::Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(input.clone())?;
    let streams = column_streams(stream, input.cols());
    let y = spec.forward(&mut tape, store, x, Noise::Columns(&streams))?;
    Ok(tape.value(y).clone())
}
