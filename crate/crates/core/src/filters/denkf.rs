//! Differentiable ensemble Kalman filter over the 7-d pose.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::blocks::{column_streams, Encoder, ImageEncoder, Noise, SnnSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sim::render::{Modality, PROPRIO_DIM};
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

/// Added to the learned measurement variances.
pub const R_FLOOR: f64 = 1e-6;
/// Diagonal jitter tried once when the innovation covariance is not SPD.
pub const INNOVATION_JITTER: f64 = 1e-9;

/// Ensemble Kalman update on the tape.
///
/// `x` is `n × E`, `hx` and `y` are `m × E`, `r` is the `m × 1` diagonal of
/// the measurement covariance.
pub fn denkf_update(tape: &mut Tape, x: Var, hx: Var, y: Var, r: Var) -> Result<Var> {
    let e = tape.value(x).cols();
    let m = tape.value(hx).rows();
    if e < 2 || tape.value(hx).cols() != e || tape.value(y).shape() != tape.value(hx).shape() {
        return Err(Error::shape(
            "denkf_update",
            format!(
                "x {:?}, hx {:?}, y {:?}",
                tape.value(x).shape(),
                tape.value(hx).shape(),
                tape.value(y).shape()
            ),
        ));
    }
    if tape.value(r).shape() != [m, 1] {
        return Err(Error::shape("denkf_update", format!("R diagonal {:?} for {m} outputs", tape.value(r).shape())));
    }
    let c = 1.0 / (e as f64 - 1.0);
    let anomalies = |tape: &mut Tape, v: Var| -> Result<Var> {
        let mean = tape.row_mean(v)?;
        let mean = tape.broadcast_cols(mean, e)?;
        tape.sub(v, mean)
    };
    let a = anomalies(tape, x)?;
    let ha = anomalies(tape, hx)?;
    let hat = tape.transpose(ha)?;
    let s = tape.matmul(ha, hat)?;
    let s = tape.scale(s, c)?;
    let eye = tape.constant(Tensor::eye(m))?;
    let rd = tape.mul_col(eye, r)?;
    let s = tape.add(s, rd)?;
    let s_inv = tape.spd_inverse(s, INNOVATION_JITTER)?;
    let cross = tape.matmul(a, hat)?;
    let cross = tape.scale(cross, c)?;
    let k = tape.matmul(cross, s_inv)?;
    let innov = tape.sub(y, hx)?;
    let dx = tape.matmul(k, innov)?;
    tape.add(x, dx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenkfConfig {
    pub obs_dim: usize,
    pub ensemble: usize,
    pub dropout: f64,
    pub action_dim: usize,
    pub transition_hidden: Vec<usize>,
    pub obs_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub image_size: usize,
    pub conv: [usize; 2],
    pub image_hidden: Vec<usize>,
    pub proprio_hidden: Vec<usize>,
    pub feature_hidden: Vec<usize>,
    pub beta_hidden: Vec<usize>,
}

impl Default for DenkfConfig {
    fn default() -> Self {
        DenkfConfig {
            obs_dim: 16,
            ensemble: 16,
            dropout: 0.1,
            action_dim: 40,
            transition_hidden: vec![64, 64],
            obs_hidden: vec![32],
            noise_hidden: vec![32],
            image_size: 32,
            conv: [8, 16],
            image_hidden: vec![64],
            proprio_hidden: vec![64, 64],
            feature_hidden: vec![64],
            beta_hidden: vec![32],
        }
    }
}

fn widths(hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = hidden.to_vec();
    w.push(out);
    w
}

/// Learned pieces of the ensemble Kalman filter and of the fusion heads that
/// sit on top of it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenkfModel {
    pub cfg: DenkfConfig,
    pub transition: SnnSpec,
    pub observation: SnnSpec,
    pub noise: SnnSpec,
    pub encoders: [Encoder; 3],
    pub feature: SnnSpec,
    pub beta: SnnSpec,
}

impl DenkfModel {
    pub fn new(cfg: DenkfConfig) -> Result<Self> {
        if cfg.ensemble < 2 {
            return Err(Error::Invalid(format!("ensemble size {} below 2", cfg.ensemble)));
        }
        let (dy, p) = (cfg.obs_dim, cfg.dropout);
        let encoders = [
            Encoder::Image(ImageEncoder::new("denkf.enc.rgb", 3, cfg.image_size, cfg.conv, &cfg.image_hidden, dy, p)?),
            Encoder::Image(ImageEncoder::new("denkf.enc.depth", 1, cfg.image_size, cfg.conv, &cfg.image_hidden, dy, p)?),
            Encoder::Vector(SnnSpec::relu("denkf.enc.proprio", PROPRIO_DIM, &widths(&cfg.proprio_hidden, dy), p)),
        ];
        Ok(DenkfModel {
            transition: SnnSpec::relu("denkf.f", STATE_DIM + cfg.action_dim, &widths(&cfg.transition_hidden, STATE_DIM), p),
            observation: SnnSpec::relu("denkf.h", STATE_DIM, &widths(&cfg.obs_hidden, dy), 0.0),
            noise: SnnSpec::relu("denkf.r", dy, &widths(&cfg.noise_hidden, dy), 0.0),
            feature: SnnSpec::relu("denkf.feat", 3 * dy, &widths(&cfg.feature_hidden, dy), p),
            beta: SnnSpec::relu("denkf.beta", 3 * dy, &widths(&cfg.beta_hidden, 3 * dy), 0.0),
            encoders,
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let s = RngStream(seed).named("init");
        self.transition.init(&mut store, s)?;
        self.observation.init(&mut store, s)?;
        self.noise.init(&mut store, s)?;
        for e in &self.encoders {
            e.init(&mut store, s)?;
        }
        self.feature.init(&mut store, s)?;
        self.beta.init(&mut store, s)?;
        Ok(store)
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        &self.encoders[m.index()]
    }

    /// Member-wise stochastic transition `x + f([x; a])`.
    pub fn predict(&self, tape: &mut Tape, store: &ParameterStore, x: Var, action: &Tensor, stream: RngStream) -> Result<Var> {
        let members = column_streams(stream.named("predict"), tape.value(x).cols());
        self.predict_members(tape, store, x, action, &members)
    }

    /// As [`DenkfModel::predict`] with an explicit dropout stream per member.
    pub fn predict_members(&self, tape: &mut Tape, store: &ParameterStore, x: Var, action: &Tensor, members: &[RngStream]) -> Result<Var> {
        let e = tape.value(x).cols();
        if e < 2 {
            return Err(Error::Invalid(format!("ensemble needs at least 2 members, got {e}")));
        }
        let a = tape.input(action.clone())?;
        let a = tape.broadcast_cols(a, e)?;
        let input = tape.concat_rows(&[x, a])?;
        let delta = self.transition.forward(tape, store, input, Noise::Columns(members))?;
        tape.add(x, delta)
    }

    pub fn observe(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        self.observation.forward(tape, store, x, Noise::Off)
    }

    /// Diagonal measurement covariance `exp(z/2) + floor` from the latent
    /// observation mean.
    pub fn noise_diag(&self, tape: &mut Tape, store: &ParameterStore, y: Var) -> Result<Var> {
        let mean = tape.row_mean(y)?;
        let z = self.noise.forward(tape, store, mean, Noise::Off)?;
        let z = tape.scale(z, 0.5)?;
        let r = tape.exp(z)?;
        let floor = tape.constant(Tensor::filled(self.cfg.obs_dim, 1, R_FLOOR))?;
        tape.add(r, floor)
    }

    pub fn update(&self, tape: &mut Tape, store: &ParameterStore, x: Var, y: Var) -> Result<Var> {
        let hx = self.observe(tape, store, x)?;
        let r = self.noise_diag(tape, store, y)?;
        denkf_update(tape, x, hx, y, r)
    }
}
