//! Feature, unimodal and crossmodal fusion on top of the ensemble Kalman
//! filter.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::blocks::{column_streams, Noise, SnnSpec};
use crate::error::{Error, Result};
use crate::filters::{AttentionGainMask, DenkfModel};
use crate::rng::RngStream;
use crate::sim::render::{Modality, ModalityBundle};
use crate::tensor::Tensor;

/// Variance floor for beliefs built from encoder ensembles.
pub const BELIEF_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian. The precision is kept alongside the covariance so that
/// fused precisions are exact sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    precision: Vec<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        if mean.len() != cov.len() || mean.is_empty() {
            return Err(Error::shape("belief", format!("mean {} vs covariance {}", mean.len(), cov.len())));
        }
        if let Some(v) = cov.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid(format!("covariance entries must be positive, got {v}")));
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "belief" });
        }
        let precision = cov.iter().map(|v| 1.0 / v).collect();
        Ok(GaussianBelief { mean, cov, precision })
    }

    fn from_precision(mean: Vec<f64>, precision: Vec<f64>) -> Self {
        let cov = precision.iter().map(|p| 1.0 / p).collect();
        GaussianBelief { mean, cov, precision }
    }

    /// Row mean and unbiased row variance (plus `floor`) of a `d × E`
    /// ensemble.
    pub fn from_ensemble(x: &Tensor, floor: f64) -> Result<Self> {
        let e = x.cols();
        if e < 2 {
            return Err(Error::Invalid(format!("belief from ensemble needs at least 2 members, got {e}")));
        }
        let mean = x.row_mean().into_data();
        let cov = (0..x.rows())
            .map(|r| x.row_slice(r).iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>() / (e - 1) as f64 + floor)
            .collect();
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }
}

fn fuse_pair(a: &GaussianBelief, b: &GaussianBelief) -> GaussianBelief {
    let precision: Vec<f64> = a.precision.iter().zip(&b.precision).map(|(p, q)| p + q).collect();
    let mean = (0..a.dim())
        .map(|i| (a.precision[i] * a.mean[i] + b.precision[i] * b.mean[i]) / precision[i])
        .collect();
    GaussianBelief::from_precision(mean, precision)
}

/// Precision-weighted product of diagonal Gaussians, folded left to right.
pub fn unimodal_fuse(beliefs: &[GaussianBelief]) -> Result<GaussianBelief> {
    if beliefs.len() < 2 {
        return Err(Error::Invalid(format!("unimodal fusion needs at least 2 beliefs, got {}", beliefs.len())));
    }
    let d = beliefs[0].dim();
    if let Some(b) = beliefs.iter().find(|b| b.dim() != d) {
        return Err(Error::shape("unimodal_fuse", format!("dims {d} and {}", b.dim())));
    }
    let mut acc = fuse_pair(&beliefs[0], &beliefs[1]);
    for b in &beliefs[2..] {
        acc = fuse_pair(&acc, b);
    }
    Ok(acc)
}

/// β-weighted mean with `β∘β`-weighted covariance. Two modalities is the
/// usual case; more are combined with the same weighted sums.
pub fn crossmodal_fuse(beliefs: &[GaussianBelief], betas: &[Vec<f64>]) -> Result<GaussianBelief> {
    if beliefs.len() < 2 || betas.len() != beliefs.len() {
        return Err(Error::Invalid(format!(
            "crossmodal fusion needs matching beliefs and coefficients (at least 2), got {} and {}",
            beliefs.len(),
            betas.len()
        )));
    }
    let d = beliefs[0].dim();
    for (b, w) in beliefs.iter().zip(betas) {
        if b.dim() != d || w.len() != d {
            return Err(Error::shape("crossmodal_fuse", format!("belief {} and coefficient {} for dim {d}", b.dim(), w.len())));
        }
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Invalid("crossmodal coefficients must be nonnegative and finite".into()));
        }
    }
    let mut mean = vec![0.0; d];
    let mut cov = vec![0.0; d];
    for i in 0..d {
        let (mut num, mut den, mut cnum, mut cden) = (0.0, 0.0, 0.0, 0.0);
        for (b, w) in beliefs.iter().zip(betas) {
            let bb = w[i] * w[i];
            num += w[i] * b.mean[i];
            den += w[i];
            cnum += bb * b.cov[i];
            cden += bb;
        }
        if den == 0.0 || cden == 0.0 {
            return Err(Error::Invalid(format!("crossmodal coefficients sum to zero at index {i}")));
        }
        mean[i] = num / den;
        cov[i] = cnum / cden;
    }
    GaussianBelief::new(mean, cov)
}

/// `μ + √Σ ∘ ε` for `E` draws of `ε`.
pub fn reparam_sample(b: &GaussianBelief, e: usize, stream: RngStream) -> Tensor {
    let eps = standard_normal(b.dim(), e, stream);
    let mut out = Tensor::zeros(b.dim(), e);
    for r in 0..b.dim() {
        let s = b.cov[r].sqrt();
        for c in 0..e {
            out.set(r, c, b.mean[r] + s * eps.get(r, c));
        }
    }
    out
}

fn standard_normal(rows: usize, cols: usize, stream: RngStream) -> Tensor {
    let mut rng = stream.rng();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Mean and variance columns of a belief on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BeliefVars {
    pub mean: Var,
    pub var: Var,
}

/// Row mean and unbiased row variance plus `floor` of a `d × E` ensemble.
pub fn ensemble_belief(tape: &mut Tape, x: Var, floor: f64) -> Result<BeliefVars> {
    let (d, e) = (tape.value(x).rows(), tape.value(x).cols());
    if e < 2 {
        return Err(Error::Invalid(format!("belief from ensemble needs at least 2 members, got {e}")));
    }
    let mean = tape.row_mean(x)?;
    let mb = tape.broadcast_cols(mean, e)?;
    let a = tape.sub(x, mb)?;
    let sq = tape.mul(a, a)?;
    let var = tape.row_mean(sq)?;
    let var = tape.scale(var, e as f64 / (e - 1) as f64)?;
    let f = tape.constant(Tensor::filled(d, 1, floor))?;
    let var = tape.add(var, f)?;
    Ok(BeliefVars { mean, var })
}

pub fn unimodal_fuse_tape(tape: &mut Tape, beliefs: &[BeliefVars]) -> Result<BeliefVars> {
    if beliefs.is_empty() {
        return Err(Error::Invalid("unimodal fusion of zero beliefs".into()));
    }
    let d = tape.value(beliefs[0].mean).rows();
    let one = tape.constant(Tensor::filled(d, 1, 1.0))?;
    let mut prec = None;
    let mut num = None;
    for b in beliefs {
        let p = tape.div(one, b.var)?;
        let pm = tape.mul(p, b.mean)?;
        prec = Some(match prec {
            None => p,
            Some(acc) => tape.add(acc, p)?,
        });
        num = Some(match num {
            None => pm,
            Some(acc) => tape.add(acc, pm)?,
        });
    }
    let (prec, num) = (prec.unwrap(), num.unwrap());
    Ok(BeliefVars {
        mean: tape.div(num, prec)?,
        var: tape.div(one, prec)?,
    })
}

pub fn crossmodal_fuse_tape(tape: &mut Tape, beliefs: &[BeliefVars], betas: &[Var]) -> Result<BeliefVars> {
    if beliefs.is_empty() || betas.len() != beliefs.len() {
        return Err(Error::Invalid("crossmodal fusion needs one coefficient per belief".into()));
    }
    let mut terms = Vec::with_capacity(beliefs.len());
    for (b, &w) in beliefs.iter().zip(betas) {
        let bb = tape.mul(w, w)?;
        terms.push((tape.mul(w, b.mean)?, w, tape.mul(bb, b.var)?, bb));
    }
    let (mut num, mut den, mut cnum, mut cden) = terms[0];
    for &(n, d, cn, cd) in &terms[1..] {
        num = tape.add(num, n)?;
        den = tape.add(den, d)?;
        cnum = tape.add(cnum, cn)?;
        cden = tape.add(cden, cd)?;
    }
    Ok(BeliefVars {
        mean: tape.div(num, den)?,
        var: tape.div(cnum, cden)?,
    })
}

/// Differentiable reparameterized draws, `d × E`.
pub fn reparam_sample_tape(tape: &mut Tape, b: BeliefVars, e: usize, stream: RngStream) -> Result<Var> {
    let d = tape.value(b.mean).rows();
    let eps = tape.constant(standard_normal(d, e, stream))?;
    let sd = tape.sqrt(b.var)?;
    let noise = tape.mul_col(eps, sd)?;
    let mean = tape.broadcast_cols(b.mean, e)?;
    tape.add(mean, noise)
}

/// Concatenate per-modality features and map them through `spec`.
pub fn feature_fuse(tape: &mut Tape, store: &ParameterStore, spec: &SnnSpec, features: &[Var], noise: Noise) -> Result<Var> {
    let x = tape.concat_rows(features)?;
    spec.forward(tape, store, x, noise)
}

/// How per-modality latent observations become the single observation
/// ensemble consumed by the Kalman update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// Member-wise average of the enabled encoders' samples.
    Average,
    Feature,
    Unimodal,
    Crossmodal,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 4] = [FusionMethod::Average, FusionMethod::Feature, FusionMethod::Unimodal, FusionMethod::Crossmodal];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Average => "average",
            FusionMethod::Feature => "feature",
            FusionMethod::Unimodal => "unimodal",
            FusionMethod::Crossmodal => "crossmodal",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown fusion method `{s}`")))
    }
}

/// Latent observation ensemble `Ỹ` (`d_y × E`) for one step.
pub fn fused_observation(
    model: &DenkfModel,
    method: FusionMethod,
    tape: &mut Tape,
    store: &ParameterStore,
    bundle: &ModalityBundle,
    mask: &AttentionGainMask,
    stream: RngStream,
) -> Result<Var> {
    let e = model.cfg.ensemble;
    let dy = model.cfg.obs_dim;
    let mods = mask.modalities();
    if mods.is_empty() {
        return Err(Error::Invalid("fusion needs at least one modality".into()));
    }
    if method == FusionMethod::Feature && mods.len() != Modality::ALL.len() {
        return Err(Error::Invalid(format!("feature fusion needs every modality, got {}", mask.label())));
    }
    let mut latents = [None; 3];
    for &m in &mods {
        let members = column_streams(stream.named(m.name()), e);
        latents[m.index()] = Some(model.encoder(m).encode(tape, store, bundle.get(m)?, &members)?);
    }
    let present: Vec<Var> = latents.iter().flatten().copied().collect();
    match method {
        FusionMethod::Average => {
            let mut acc = present[0];
            for &y in &present[1..] {
                acc = tape.add(acc, y)?;
            }
            tape.scale(acc, 1.0 / present.len() as f64)
        }
        FusionMethod::Feature => {
            let members = column_streams(stream.named("feature"), e);
            feature_fuse(tape, store, &model.feature, &present, Noise::Columns(&members))
        }
        FusionMethod::Unimodal => {
            let beliefs = present
                .iter()
                .map(|&y| ensemble_belief(tape, y, BELIEF_FLOOR))
                .collect::<Result<Vec<_>>>()?;
            let fused = unimodal_fuse_tape(tape, &beliefs)?;
            reparam_sample_tape(tape, fused, e, stream.named("reparam"))
        }
        FusionMethod::Crossmodal => {
            let mut beliefs = Vec::new();
            let mut means = Vec::new();
            for m in Modality::ALL {
                match latents[m.index()] {
                    Some(y) => {
                        let b = ensemble_belief(tape, y, BELIEF_FLOOR)?;
                        means.push(b.mean);
                        beliefs.push(b);
                    }
                    None => means.push(tape.constant(Tensor::zeros(dy, 1))?),
                }
            }
            let cat = tape.concat_rows(&means)?;
            let z = model.beta.forward(tape, store, cat, Noise::Off)?;
            let beta = tape.softplus(z)?;
            let mut betas = Vec::new();
            for &m in &mods {
                betas.push(tape.slice_rows(beta, m.index() * dy, dy)?);
            }
            let fused = crossmodal_fuse_tape(tape, &beliefs, &betas)?;
            reparam_sample_tape(tape, fused, e, stream.named("reparam"))
        }
    }
}
