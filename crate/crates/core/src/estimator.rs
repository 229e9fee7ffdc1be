//! Uniform handle over every estimator: construction, initialization and
//! full-trajectory rollouts.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape};
use crate::blocks::{AmdfModel, ModelConfig};
use crate::error::{Error, Result};
use crate::filters::{
    dekf_predict, dekf_step, AmdfFilter, AttentionGainMask, DekfConfig, DekfNet, DenkfConfig, DenkfModel, FilterDiagnostics,
};
use crate::fusion::{fused_observation, unimodal_fuse, FusionMethod, GaussianBelief};
use crate::rng::RngStream;
use crate::sim::render::ModalityBundle;
use crate::sim::{TrajectoryDataset, STATE_DIM};
use crate::tensor::Tensor;

/// Spread of the ensemble (or standard deviation of the covariance) the
/// Kalman-type baselines start from around the first ground-truth pose.
pub const INIT_SPREAD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Amdf,
    Denkf,
    Dekf,
    Feature,
    Unimodal,
    Crossmodal,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Amdf, Method::Denkf, Method::Dekf, Method::Feature, Method::Unimodal, Method::Crossmodal];

    pub fn name(self) -> &'static str {
        match self {
            Method::Amdf => "amdf",
            Method::Denkf => "denkf",
            Method::Dekf => "dekf",
            Method::Feature => "feature",
            Method::Unimodal => "unimodal",
            Method::Crossmodal => "crossmodal",
        }
    }

    fn fusion(self) -> Option<FusionMethod> {
        match self {
            Method::Denkf => Some(FusionMethod::Average),
            Method::Feature => Some(FusionMethod::Feature),
            Method::Unimodal => Some(FusionMethod::Unimodal),
            Method::Crossmodal => Some(FusionMethod::Crossmodal),
            Method::Amdf | Method::Dekf => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}` (expected one of amdf, denkf, dekf, feature, unimodal, crossmodal)")))
    }
}

/// Architecture settings for every method; only the one in use matters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub amdf: ModelConfig,
    pub denkf: DenkfConfig,
    pub dekf: DekfConfig,
}

#[derive(Debug, Clone)]
pub enum Estimator {
    Amdf(AmdfModel),
    Denkf { model: DenkfModel, fusion: FusionMethod },
    Dekf(DekfNet),
}

/// Per-step estimates of one trajectory. `diagnostics` is filled by the
/// attention-gain filter only.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub estimates: Vec<[f64; STATE_DIM]>,
    pub diagnostics: Vec<FilterDiagnostics>,
}

/// Unit-normalize the quaternion part of a pose in place.
pub fn normalize_pose(p: &mut [f64; STATE_DIM]) {
    let n = p[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in &mut p[3..] {
            *v /= n;
        }
    }
}

impl Estimator {
    pub fn new(method: Method, arch: &Architecture) -> Result<Self> {
        Ok(match method {
            Method::Amdf => Estimator::Amdf(AmdfModel::new(arch.amdf.clone())?),
            Method::Dekf => Estimator::Dekf(DekfNet::new(arch.dekf.clone())?),
            m => Estimator::Denkf {
                model: DenkfModel::new(arch.denkf.clone())?,
                fusion: m.fusion().expect("fusion-backed method"),
            },
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Estimator::Amdf(_) => Method::Amdf,
            Estimator::Dekf(_) => Method::Dekf,
            Estimator::Denkf { fusion, .. } => match fusion {
                FusionMethod::Average => Method::Denkf,
                FusionMethod::Feature => Method::Feature,
                FusionMethod::Unimodal => Method::Unimodal,
                FusionMethod::Crossmodal => Method::Crossmodal,
            },
        }
    }

    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        match self {
            Estimator::Amdf(m) => m.init(seed),
            Estimator::Denkf { model, .. } => model.init(seed),
            Estimator::Dekf(n) => n.init(seed),
        }
    }

    /// Reject masks the method cannot run with.
    pub fn check_mask(&self, mask: &AttentionGainMask) -> Result<()> {
        if mask.modalities().is_empty() {
            return Err(Error::Invalid("at least one modality must be enabled".into()));
        }
        if self.method() == Method::Feature && *mask != AttentionGainMask::all() {
            return Err(Error::Invalid(format!("feature fusion needs every modality, got {}", mask.label())));
        }
        Ok(())
    }

    /// Filter a whole trial. `bundles[t]` and `masks[t]` are the observations
    /// and enabled modalities at step `t`; the first pose of the trial is
    /// used only by the Kalman-type baselines, which start around it.
    pub fn rollout(
        &self,
        store: &ParameterStore,
        ds: &TrajectoryDataset,
        trial: usize,
        bundles: &[ModalityBundle],
        masks: &[AttentionGainMask],
        stream: RngStream,
    ) -> Result<Rollout> {
        let steps = bundles.len();
        if steps == 0 || masks.len() != steps || steps > ds.steps() {
            return Err(Error::Invalid(format!(
                "rollout needs one bundle and mask per step ({} and {}, trial length {})",
                steps,
                masks.len(),
                ds.steps()
            )));
        }
        match self {
            Estimator::Amdf(model) => {
                let (mut f, d0) = AmdfFilter::initialize(model, store, &bundles[0], &masks[0], stream)?;
                let mut out = Rollout {
                    estimates: vec![d0.state],
                    diagnostics: vec![d0],
                };
                for t in 1..steps {
                    let d = f.step(&ds.action(trial, t)?, &bundles[t], &masks[t])?;
                    out.estimates.push(d.state);
                    out.diagnostics.push(d);
                }
                Ok(out)
            }
            Estimator::Denkf { model, fusion } => {
                let x0 = ds.pose(trial, 0)?;
                let mut x = perturbed_ensemble(&x0, model.cfg.ensemble, stream.named("init"))?;
                let mut out = Rollout {
                    estimates: vec![x0],
                    diagnostics: Vec::new(),
                };
                for t in 1..steps {
                    let s = stream.child(t as u64);
                    let mut tape = Tape::new();
                    let xv = tape.input(x)?;
                    let action = Tensor::column(ds.action(trial, t)?);
                    let prior = model.predict(&mut tape, store, xv, &action, s)?;
                    let post = if masks[t].modalities().is_empty() {
                        prior
                    } else {
                        let y = fused_observation(model, *fusion, &mut tape, store, &bundles[t], &masks[t], s)?;
                        model.update(&mut tape, store, prior, y)?
                    };
                    x = tape.value(post).clone();
                    let mut p = [0.0; STATE_DIM];
                    p.copy_from_slice(x.row_mean().data());
                    normalize_pose(&mut p);
                    out.estimates.push(p);
                }
                Ok(out)
            }
            Estimator::Dekf(net) => {
                let models = net.models(store);
                let x0 = ds.pose(trial, 0)?;
                let mut x = DVector::from_column_slice(&x0);
                let mut sigma = DMatrix::identity(STATE_DIM, STATE_DIM) * INIT_SPREAD.powi(2);
                let mut out = Rollout {
                    estimates: vec![x0],
                    diagnostics: Vec::new(),
                };
                for t in 1..steps {
                    let s = stream.child(t as u64);
                    let action = ds.action(trial, t)?;
                    let mods = masks[t].modalities();
                    (x, sigma) = if mods.is_empty() {
                        dekf_predict(&x, &sigma, &action, &models, t)?
                    } else {
                        let mut beliefs = Vec::new();
                        for m in mods {
                            let (y, r) = net.measure(store, &bundles[t], m, s)?;
                            beliefs.push(GaussianBelief::new(y.as_slice().to_vec(), r.diagonal().as_slice().to_vec())?);
                        }
                        let b = if beliefs.len() == 1 {
                            beliefs.pop().expect("one belief")
                        } else {
                            unimodal_fuse(&beliefs)?
                        };
                        let y = DVector::from_column_slice(&b.mean);
                        let r = DMatrix::from_diagonal(&DVector::from_column_slice(&b.cov));
                        dekf_step(&x, &sigma, &action, &y, &r, &models, t)?
                    };
                    let mut p = [0.0; STATE_DIM];
                    p.copy_from_slice(x.as_slice());
                    normalize_pose(&mut p);
                    out.estimates.push(p);
                }
                Ok(out)
            }
        }
    }
}

/// `E` copies of `pose` with independent Gaussian jitter of [`INIT_SPREAD`].
pub fn perturbed_ensemble(pose: &[f64; STATE_DIM], e: usize, stream: RngStream) -> Result<Tensor> {
    let noise = Normal::new(0.0, INIT_SPREAD).map_err(|err| Error::Invalid(err.to_string()))?;
    let mut rng = stream.rng();
    let mut x = Tensor::zeros(STATE_DIM, e);
    for c in 0..e {
        for (r, &v) in pose.iter().enumerate() {
            x.set(r, c, v + noise.sample(&mut rng));
        }
    }
    Ok(x)
}
