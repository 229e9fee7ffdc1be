//! Extended Kalman filter over the 7-d pose with learned models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape};
use crate::blocks::{column_streams, Encoder, ImageEncoder, Noise, SnnSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sim::render::{Modality, ModalityBundle, PROPRIO_DIM};
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

pub trait DekfModels {
    /// Next state mean and the Jacobian of the transition at `x`.
    fn transition(&self, x: &DVector<f64>, action: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;
    fn process_noise(&self) -> DMatrix<f64>;
    /// Predicted observation and its Jacobian at `x`.
    fn observation(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

/// `x' = F x + B a + w`, `y = H x + v`.
#[derive(Debug, Clone)]
pub struct LinearModels {
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl DekfModels for LinearModels {
    fn transition(&self, x: &DVector<f64>, action: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let a = DVector::from_column_slice(action);
        Ok((&self.f * x + &self.b * a, self.f.clone()))
    }
    fn process_noise(&self) -> DMatrix<f64> {
        self.q.clone()
    }
    fn observation(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((&self.h * x, self.h.clone()))
    }
}

fn check_spd(m: &DMatrix<f64>, step: usize) -> Result<()> {
    if m.clone().cholesky().is_none() || !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveDefinite { step });
    }
    Ok(())
}

/// Prediction only, for steps without any measurement.
pub fn dekf_predict(
    x: &DVector<f64>,
    sigma: &DMatrix<f64>,
    action: &[f64],
    models: &dyn DekfModels,
    step: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_spd(sigma, step)?;
    let (xp, f) = models.transition(x, action)?;
    let sp = &f * sigma * f.transpose() + models.process_noise();
    let sp = (&sp + sp.transpose()) * 0.5;
    check_spd(&sp, step)?;
    Ok((xp, sp))
}

/// One predict/update cycle. The covariance update uses the Joseph form and
/// is symmetrized afterwards.
pub fn dekf_step(
    x: &DVector<f64>,
    sigma: &DMatrix<f64>,
    action: &[f64],
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    models: &dyn DekfModels,
    step: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_spd(sigma, step)?;
    let (xp, f) = models.transition(x, action)?;
    let sp = &f * sigma * f.transpose() + models.process_noise();
    let (hx, h) = models.observation(&xp)?;
    if hx.len() != y.len() || r.nrows() != y.len() {
        return Err(Error::shape(
            "dekf_step",
            format!("observation {} vs measurement {} and R {}", hx.len(), y.len(), r.nrows()),
        ));
    }
    let s = &h * &sp * h.transpose() + r;
    let s_inv = match s.clone().cholesky() {
        Some(c) => c.inverse(),
        None => {
            let n = s.nrows();
            (s + DMatrix::identity(n, n) * crate::filters::denkf::INNOVATION_JITTER)
                .cholesky()
                .ok_or(Error::SingularInnovation)?
                .inverse()
        }
    };
    let k = &sp * h.transpose() * s_inv;
    let xn = &xp + &k * (y - hx);
    let n = x.len();
    let ikh = DMatrix::identity(n, n) - &k * &h;
    let sn = &ikh * &sp * ikh.transpose() + &k * r * k.transpose();
    let sn = (&sn + sn.transpose()) * 0.5;
    check_spd(&sn, step)?;
    Ok((xn, sn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DekfConfig {
    pub dropout: f64,
    pub samples: usize,
    pub action_dim: usize,
    pub transition_hidden: Vec<usize>,
    pub noise_hidden: Vec<usize>,
    pub image_size: usize,
    pub conv: [usize; 2],
    pub image_hidden: Vec<usize>,
    pub proprio_hidden: Vec<usize>,
}

impl Default for DekfConfig {
    fn default() -> Self {
        DekfConfig {
            dropout: 0.1,
            samples: 8,
            action_dim: 40,
            transition_hidden: vec![64, 64],
            noise_hidden: vec![32],
            image_size: 32,
            conv: [8, 16],
            image_hidden: vec![64],
            proprio_hidden: vec![64, 64],
        }
    }
}

fn widths(hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = hidden.to_vec();
    w.push(out);
    w
}

pub const PROCESS_LOG_VAR: &str = "dekf.q";

/// Learned transition, per-modality pose regressors and a log-variance head.
/// The measurement model is the identity on the pose.
#[derive(Debug, Clone, PartialEq)]
pub struct DekfNet {
    pub cfg: DekfConfig,
    pub transition: SnnSpec,
    pub encoders: [Encoder; 3],
    pub noise: SnnSpec,
}

impl DekfNet {
    pub fn new(cfg: DekfConfig) -> Result<Self> {
        let p = cfg.dropout;
        let encoders = [
            Encoder::Image(ImageEncoder::new("dekf.enc.rgb", 3, cfg.image_size, cfg.conv, &cfg.image_hidden, STATE_DIM, p)?),
            Encoder::Image(ImageEncoder::new("dekf.enc.depth", 1, cfg.image_size, cfg.conv, &cfg.image_hidden, STATE_DIM, p)?),
            Encoder::Vector(SnnSpec::relu("dekf.enc.proprio", PROPRIO_DIM, &widths(&cfg.proprio_hidden, STATE_DIM), p)),
        ];
        Ok(DekfNet {
            transition: SnnSpec::relu("dekf.f", STATE_DIM + cfg.action_dim, &widths(&cfg.transition_hidden, STATE_DIM), 0.0),
            noise: SnnSpec::relu("dekf.r", STATE_DIM, &widths(&cfg.noise_hidden, STATE_DIM), 0.0),
            encoders,
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let s = RngStream(seed).named("init");
        self.transition.init(&mut store, s)?;
        for e in &self.encoders {
            e.init(&mut store, s)?;
        }
        self.noise.init(&mut store, s)?;
        store.insert(PROCESS_LOG_VAR, Tensor::filled(STATE_DIM, 1, -6.0))?;
        Ok(store)
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        &self.encoders[m.index()]
    }

    /// Pose measurement (mean of encoder samples) and its learned variance.
    pub fn measure(&self, store: &ParameterStore, bundle: &ModalityBundle, m: Modality, stream: RngStream) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut tape = Tape::new();
        let members = column_streams(stream.named(m.name()), self.cfg.samples);
        let y = self.encoder(m).encode(&mut tape, store, bundle.get(m)?, &members)?;
        let mean = tape.row_mean(y)?;
        let z = self.noise.forward(&mut tape, store, mean, Noise::Off)?;
        let r = tape.value(z).map(|v| v.exp() + crate::filters::denkf::R_FLOOR);
        Ok((
            DVector::from_column_slice(tape.value(mean).data()),
            DMatrix::from_diagonal(&DVector::from_column_slice(r.data())),
        ))
    }

    pub fn models<'a>(&'a self, store: &'a ParameterStore) -> LearnedDekf<'a> {
        LearnedDekf { net: self, store }
    }
}

/// Learned models bound to a parameter snapshot.
pub struct LearnedDekf<'a> {
    net: &'a DekfNet,
    store: &'a ParameterStore,
}

impl DekfModels for LearnedDekf<'_> {
    fn transition(&self, x: &DVector<f64>, action: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::column(x.as_slice().to_vec()))?;
        let a = tape.input(Tensor::column(action.to_vec()))?;
        let input = tape.concat_rows(&[xv, a])?;
        let delta = self.net.transition.forward(&mut tape, self.store, input, Noise::Off)?;
        let out = tape.add(xv, delta)?;
        let n = x.len();
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut seed = Tensor::zeros(n, 1);
            seed.set(i, 0, 1.0);
            let g = tape.gradients(out, &seed)?;
            if let Some(gx) = g.get(xv) {
                for j in 0..n {
                    jac[(i, j)] = gx.data()[j];
                }
            }
        }
        Ok((DVector::from_column_slice(tape.value(out).data()), jac))
    }

    fn process_noise(&self) -> DMatrix<f64> {
        let q = self
            .store
            .value(PROCESS_LOG_VAR)
            .map(|t| t.map(f64::exp))
            .unwrap_or_else(|_| Tensor::filled(STATE_DIM, 1, 1e-3));
        DMatrix::from_diagonal(&DVector::from_column_slice(q.data()))
    }

    fn observation(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((x.clone(), DMatrix::identity(x.len(), x.len())))
    }
}
