use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::blocks::{column_streams, AmdfModel, Noise};
use crate::error::{Error, Result};
use crate::estimator::{perturbed_ensemble, Estimator};
use crate::filters::{amdf_step, decode_mean, AttentionGainMask, DekfNet, DenkfModel};
use crate::filters::dekf::PROCESS_LOG_VAR;
use crate::fusion::{fused_observation, FusionMethod};
use crate::rng::RngStream;
use crate::sim::render::{Modality, ModalityBundle};
use crate::sim::{TrajectoryDataset, STATE_DIM};
use crate::tensor::Tensor;

/// Training window ending at `t + 1`: the `N` poses before `t`, then targets,
/// actions and observations at `t` and `t + 1`.
#[derive(Debug, Clone)]
pub struct Window {
    pub trial: usize,
    pub t: usize,
    pub history: Vec<[f64; STATE_DIM]>,
    pub targets: [[f64; STATE_DIM]; 2],
    pub actions: [Tensor; 2],
    pub bundles: [ModalityBundle; 2],
}

impl Window {
    pub fn new(ds: &TrajectoryDataset, trial: usize, t: usize, history: usize) -> Result<Self> {
        if t < history || t + 1 >= ds.steps() {
            return Err(Error::Invalid(format!(
                "window at t={t} with history {history} does not fit a trial of {} steps",
                ds.steps()
            )));
        }
        Ok(Window {
            trial,
            t,
            history: (t - history..t).map(|k| ds.pose(trial, k)).collect::<Result<_>>()?,
            targets: [ds.pose(trial, t)?, ds.pose(trial, t + 1)?],
            actions: [Tensor::column(ds.action(trial, t)?), Tensor::column(ds.action(trial, t + 1)?)],
            bundles: [ds.bundle(trial, t)?, ds.bundle(trial, t + 1)?],
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub windows: Vec<Window>,
    /// Modalities kept for this batch.
    pub mask: AttentionGainMask,
}

impl Batch {
    /// One window per trial at a uniformly drawn `t`.
    pub fn sample(ds: &TrajectoryDataset, trials: &[usize], history: usize, mask: AttentionGainMask, rng: &mut impl Rng) -> Result<Self> {
        if ds.steps() < history + 2 {
            return Err(Error::Invalid(format!("trials of {} steps are too short for history {history}", ds.steps())));
        }
        let windows = trials
            .iter()
            .map(|&trial| Window::new(ds, trial, rng.random_range(history..ds.steps() - 1), history))
            .collect::<Result<_>>()?;
        Ok(Batch { windows, mask })
    }
}

/// Loss components on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub f: Var,
    pub e2e: Var,
    pub s: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_f")]
    pub f: f64,
    #[serde(rename = "L_e2e")]
    pub e2e: f64,
    #[serde(rename = "L_s")]
    pub s: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        LossBreakdown {
            f: v(self.f),
            e2e: v(self.e2e),
            s: v(self.s),
            total: v(self.total),
        }
    }
}

fn squared_error(tape: &mut Tape, pose: Var, target: &[f64; STATE_DIM]) -> Result<Var> {
    let t = tape.constant(Tensor::column(target.to_vec()))?;
    let d = tape.sub(pose, t)?;
    tape.sum_squares(d)
}

/// Running sums of scalar loss terms.
struct Terms {
    f: Vec<Var>,
    e2e: Vec<Var>,
    s: Vec<Var>,
}

impl Terms {
    fn new() -> Self {
        Terms {
            f: Vec::new(),
            e2e: Vec::new(),
            s: Vec::new(),
        }
    }

    fn finish(self, tape: &mut Tape, batch: usize) -> Result<LossVars> {
        let scale = 1.0 / batch as f64;
        let sum = |tape: &mut Tape, xs: &[Var]| -> Result<Var> {
            let mut acc = tape.constant(Tensor::zeros(1, 1))?;
            for &x in xs {
                acc = tape.add(acc, x)?;
            }
            tape.scale(acc, scale)
        };
        let f = sum(tape, &self.f)?;
        let e2e = sum(tape, &self.e2e)?;
        let s = sum(tape, &self.s)?;
        let fe = tape.add(f, e2e)?;
        let total = tape.add(fe, s)?;
        Ok(LossVars { f, e2e, s, total })
    }
}

/// The three-part loss of the attention-gain filter for one batch: from the
/// lifted history, filter through `t` and `t + 1` (the second step reuses the
/// first posterior) and score the decoded prediction, posterior and every
/// enabled modality's latent at both steps.
pub fn amdf_losses(model: &AmdfModel, tape: &mut Tape, store: &ParameterStore, batch: &Batch, stream: RngStream) -> Result<LossVars> {
    let mut terms = Terms::new();
    let n = model.cfg.history;
    for (b, w) in batch.windows.iter().enumerate() {
        let s = stream.child(b as u64);
        let mut hist = model.auxiliary_lift(tape, store, &w.history, s.named("lift"))?;
        for k in 0..2 {
            let tr = amdf_step(model, tape, store, &hist, &w.actions[k], &w.bundles[k], &batch.mask, s.child(k as u64))?;
            let target = &w.targets[k];
            let prior = decode_mean(model, tape, store, tr.prior)?;
            terms.f.push(squared_error(tape, prior, target)?);
            let post = decode_mean(model, tape, store, tr.post)?;
            terms.e2e.push(squared_error(tape, post, target)?);
            for y in tr.obs.iter().flatten() {
                let d = decode_mean(model, tape, store, *y)?;
                terms.s.push(squared_error(tape, d, target)?);
            }
            if hist.len() == n {
                hist.remove(0);
            }
            hist.push(tr.post);
        }
    }
    terms.finish(tape, batch.windows.len())
}

/// Encoder and decoder only: `L_s` at `t` and `t + 1`.
pub fn encoder_losses(model: &AmdfModel, tape: &mut Tape, store: &ParameterStore, batch: &Batch, stream: RngStream) -> Result<LossVars> {
    let mut terms = Terms::new();
    for (b, w) in batch.windows.iter().enumerate() {
        for k in 0..2 {
            let s = stream.child(b as u64).child(k as u64);
            for m in batch.mask.modalities() {
                let members = column_streams(s.named(m.name()), model.cfg.ensemble);
                let y = model.encoder(m).encode(tape, store, w.bundles[k].get(m)?, &members)?;
                let d = decode_mean(model, tape, store, y)?;
                terms.s.push(squared_error(tape, d, &w.targets[k])?);
            }
        }
    }
    terms.finish(tape, batch.windows.len())
}

/// Ensemble Kalman baselines: start around the pose before `t`, filter
/// through `t` and `t + 1`, score prediction and posterior means.
pub fn denkf_losses(
    model: &DenkfModel,
    fusion: FusionMethod,
    tape: &mut Tape,
    store: &ParameterStore,
    batch: &Batch,
    mask: &AttentionGainMask,
    stream: RngStream,
) -> Result<LossVars> {
    let mut terms = Terms::new();
    for (b, w) in batch.windows.iter().enumerate() {
        let s = stream.child(b as u64);
        let start = w.history.last().expect("history of at least one pose");
        let mut x = tape.input(perturbed_ensemble(start, model.cfg.ensemble, s.named("init"))?)?;
        for k in 0..2 {
            let sk = s.child(k as u64);
            let prior = model.predict(tape, store, x, &w.actions[k], sk)?;
            let pm = tape.row_mean(prior)?;
            terms.f.push(squared_error(tape, pm, &w.targets[k])?);
            x = if mask.modalities().is_empty() {
                prior
            } else {
                let y = fused_observation(model, fusion, tape, store, &w.bundles[k], mask, sk)?;
                model.update(tape, store, prior, y)?
            };
            let xm = tape.row_mean(x)?;
            terms.e2e.push(squared_error(tape, xm, &w.targets[k])?);
        }
    }
    terms.finish(tape, batch.windows.len())
}

/// Supervised pieces of the extended Kalman baseline: one-step transition
/// error (`L_f`), pose-regressor error per modality (`L_s`) and a moment
/// match of the learned variances to the current squared residuals
/// (`L_e2e`).
pub fn dekf_losses(net: &DekfNet, tape: &mut Tape, store: &ParameterStore, batch: &Batch, stream: RngStream) -> Result<LossVars> {
    let mut terms = Terms::new();
    let q = tape.param(store, PROCESS_LOG_VAR)?;
    let q = tape.exp(q)?;
    for (b, w) in batch.windows.iter().enumerate() {
        let s = stream.child(b as u64);
        let mut prev = *w.history.last().expect("history of at least one pose");
        for k in 0..2 {
            let target = &w.targets[k];
            let x = tape.input(Tensor::column(prev.to_vec()))?;
            let a = tape.input(w.actions[k].clone())?;
            let input = tape.concat_rows(&[x, a])?;
            let delta = net.transition.forward(tape, store, input, Noise::Off)?;
            let next = tape.add(x, delta)?;
            terms.f.push(squared_error(tape, next, target)?);
            terms.e2e.push(variance_match(tape, q, next, target)?);
            for m in batch.mask.modalities() {
                let members = column_streams(s.child(k as u64).named(m.name()), net.cfg.samples);
                let y = net.encoder(m).encode(tape, store, w.bundles[k].get(m)?, &members)?;
                let mean = tape.row_mean(y)?;
                terms.s.push(squared_error(tape, mean, target)?);
                let z = net.noise.forward(tape, store, mean, Noise::Off)?;
                let r = tape.exp(z)?;
                terms.e2e.push(variance_match(tape, r, mean, target)?);
            }
            prev = *target;
        }
    }
    terms.finish(tape, batch.windows.len())
}

/// `‖var − (pred − target)²‖²` with the residual held fixed.
fn variance_match(tape: &mut Tape, var: Var, pred: Var, target: &[f64; STATE_DIM]) -> Result<Var> {
    let resid = tape.value(pred).zip(&Tensor::column(target.to_vec()), |a, b| (a - b) * (a - b));
    let resid = tape.constant(resid)?;
    let d = tape.sub(var, resid)?;
    tape.sum_squares(d)
}

/// Losses of whichever estimator is being trained.
pub fn compute_losses(est: &Estimator, tape: &mut Tape, store: &ParameterStore, batch: &Batch, stream: RngStream) -> Result<LossVars> {
    if batch.windows.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    match est {
        Estimator::Amdf(m) => amdf_losses(m, tape, store, batch, stream),
        Estimator::Denkf { model, fusion } => {
            // feature fusion has no notion of a missing modality
            let mask = if *fusion == FusionMethod::Feature { AttentionGainMask::all() } else { batch.mask };
            denkf_losses(model, *fusion, tape, store, batch, &mask, stream)
        }
        Estimator::Dekf(net) => dekf_losses(net, tape, store, batch, stream),
    }
}

/// Parameters updated by encoder pretraining.
pub fn is_encoder_param(name: &str) -> bool {
    Modality::ALL.iter().any(|m| name.starts_with(&format!("enc.{}.", m.name()))) || name.starts_with("dec.")
}
