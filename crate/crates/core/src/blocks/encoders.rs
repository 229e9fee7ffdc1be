use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, ParameterStore, Tape, Var};
use crate::blocks::mlp::{Noise, SnnSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

/// Two stride-2 3×3 convolutions, 2×2 average pooling and a stochastic MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub name: String,
    pub channels: usize,
    pub size: usize,
    pub conv: [usize; 2],
    pub mlp: SnnSpec,
}

impl ImageEncoder {
    pub fn new(name: &str, channels: usize, size: usize, conv: [usize; 2], hidden: &[usize], out: usize, dropout: f64) -> Result<Self> {
        if !size.is_multiple_of(8) {
            return Err(Error::Invalid(format!("image size {size} must be a multiple of 8")));
        }
        let pooled = size / 8;
        let mut widths = hidden.to_vec();
        widths.push(out);
        Ok(ImageEncoder {
            name: name.to_string(),
            channels,
            size,
            conv,
            mlp: SnnSpec::relu(&format!("{name}.mlp"), conv[1] * pooled * pooled, &widths, dropout),
        })
    }

    fn geometry(&self, layer: usize) -> ConvGeometry {
        let (channels, size) = if layer == 0 {
            (self.channels, self.size)
        } else {
            (self.conv[0], self.size / 2)
        };
        ConvGeometry {
            channels,
            height: size,
            width: size,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn conv_name(&self, layer: usize, part: &str) -> String {
        format!("{}.conv{layer}.{part}", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, stream: RngStream) -> Result<()> {
        for layer in 0..2 {
            let g = self.geometry(layer);
            let w = self.conv_name(layer, "w");
            store.insert_glorot(&w, self.conv[layer], g.channels * 9, stream.named(&w))?;
            store.insert(self.conv_name(layer, "b"), Tensor::zeros(self.conv[layer], 1))?;
        }
        self.mlp.init(store, stream)
    }

    /// Deterministic convolutional feature column for one image.
    pub fn features(&self, tape: &mut Tape, store: &ParameterStore, image: &Tensor) -> Result<Var> {
        if image.rows() != self.channels || image.cols() != self.size * self.size {
            return Err(Error::shape(
                "image_encoder",
                format!(
                    "{} expects {}x{}, got {:?}",
                    self.name,
                    self.channels,
                    self.size * self.size,
                    image.shape()
                ),
            ));
        }
        let mut h = tape.input(image.clone())?;
        for layer in 0..2 {
            let cols = tape.im2col(h, self.geometry(layer))?;
            let w = tape.param(store, &self.conv_name(layer, "w"))?;
            let b = tape.param(store, &self.conv_name(layer, "b"))?;
            h = tape.matmul(w, cols)?;
            h = tape.add_bias(h, b)?;
            h = tape.relu(h)?;
        }
        let quarter = self.size / 4;
        let pooled = tape.avg_pool2(h, quarter, quarter)?;
        let n = tape.value(pooled).len();
        tape.reshape(pooled, n, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Image(ImageEncoder),
    Vector(SnnSpec),
}

impl Encoder {
    pub fn init(&self, store: &mut ParameterStore, stream: RngStream) -> Result<()> {
        match self {
            Encoder::Image(e) => e.init(store, stream),
            Encoder::Vector(s) => s.init(store, stream),
        }
    }

    pub fn output(&self) -> usize {
        match self {
            Encoder::Image(e) => e.mlp.output(),
            Encoder::Vector(s) => s.output(),
        }
    }

    pub fn prefix(&self) -> &str {
        match self {
            Encoder::Image(e) => &e.name,
            Encoder::Vector(s) => &s.name,
        }
    }

    /// `E = streams.len()` latent samples of one observation, `out × E`.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, obs: &Tensor, streams: &[RngStream]) -> Result<Var> {
        let e = streams.len();
        let (feat, mlp) = match self {
            Encoder::Image(enc) => (enc.features(tape, store, obs)?, &enc.mlp),
            Encoder::Vector(spec) => {
                if obs.cols() != 1 {
                    return Err(Error::shape("vector_encoder", format!("expected a column, got {:?}", obs.shape())));
                }
                (tape.input(obs.clone())?, spec)
            }
        };
        let wide = tape.broadcast_cols(feat, e)?;
        mlp.forward(tape, store, wide, Noise::Columns(streams))
    }
}

/// Deterministic latent-to-pose decoder. The quaternion rows are normalized
/// to unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub mlp: SnnSpec,
}

impl Decoder {
    pub fn new(name: &str, latent: usize, hidden: &[usize]) -> Self {
        let mut widths = hidden.to_vec();
        widths.push(STATE_DIM);
        Decoder {
            mlp: SnnSpec::relu(name, latent, &widths, 0.0),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, stream: RngStream) -> Result<()> {
        self.mlp.init(store, stream)?;
        let last = self.mlp.widths.len() - 1;
        store.set_value(
            &self.mlp.bias(last),
            Tensor::column(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        )
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, latent: Var) -> Result<Var> {
        let raw = self.mlp.forward(tape, store, latent, Noise::Off)?;
        let pos = tape.slice_rows(raw, 0, 3)?;
        let q = tape.slice_rows(raw, 3, 4)?;
        let q = tape.normalize_cols(q)?;
        tape.concat_rows(&[pos, q])
    }
}

/// Decode one latent vector without a tape.
pub fn decode(decoder: &Decoder, store: &ParameterStore, latent: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(latent.clone())?;
    let y = decoder.forward(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}
