//! Attention-gain multimodal differentiable filter.

use std::collections::BTreeMap;

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::blocks::{column_streams, AmdfModel};
use crate::error::{Error, Result};
use crate::filters::gain::{attention_gain_update, source_mass, AttentionGainMask, SOURCES};
use crate::filters::{FilterDiagnostics, FilterHistory, LatentEnsemble};
use crate::rng::RngStream;
use crate::sim::render::{Modality, ModalityBundle};
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

/// Everything recorded on the tape by one filter step.
#[derive(Debug, Clone, Copy)]
pub struct StepTrace {
    pub prior: Var,
    pub obs: [Option<Var>; 3],
    pub post: Var,
    pub weights: Var,
}

/// Stochastic transformer prediction of the next latent ensemble.
pub fn amdf_predict(model: &AmdfModel, tape: &mut Tape, store: &ParameterStore, history: &[Var], action: &Tensor, stream: RngStream) -> Result<Var> {
    let members = column_streams(stream.named("predict"), model.cfg.ensemble);
    model.transition(tape, store, history, action, &members)
}

/// Encode every modality enabled in `mask`; others stay `None`.
pub fn encode_observations(
    model: &AmdfModel,
    tape: &mut Tape,
    store: &ParameterStore,
    bundle: &ModalityBundle,
    mask: &AttentionGainMask,
    stream: RngStream,
) -> Result<[Option<Var>; 3]> {
    let mut out = [None; 3];
    for m in mask.modalities() {
        let obs = bundle.get(m)?;
        let members = column_streams(stream.named(m.name()), model.cfg.ensemble);
        out[m.index()] = Some(model.encoder(m).encode(tape, store, obs, &members)?);
    }
    Ok(out)
}

/// Predict, encode and apply the attention gain, all on one tape.
#[allow(clippy::too_many_arguments)]
pub fn amdf_step(
    model: &AmdfModel,
    tape: &mut Tape,
    store: &ParameterStore,
    history: &[Var],
    action: &Tensor,
    bundle: &ModalityBundle,
    mask: &AttentionGainMask,
    stream: RngStream,
) -> Result<StepTrace> {
    let prior = amdf_predict(model, tape, store, history, action, stream)?;
    let obs = encode_observations(model, tape, store, bundle, mask, stream)?;
    let g = attention_gain_update(tape, store, prior, &obs, mask, model.cfg.gain_mode)?;
    Ok(StepTrace {
        prior,
        obs,
        post: g.post,
        weights: g.weights,
    })
}

/// Decode the ensemble mean of `x` to a pose column.
pub fn decode_mean(model: &AmdfModel, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
    let m = tape.row_mean(x)?;
    model.decoder.forward(tape, store, m)
}

fn pose_of(t: &Tensor) -> [f64; STATE_DIM] {
    let mut p = [0.0; STATE_DIM];
    p.copy_from_slice(t.data());
    p
}

/// Recursive inference with a fixed parameter snapshot.
#[derive(Debug, Clone)]
pub struct AmdfFilter<'a> {
    model: &'a AmdfModel,
    store: &'a ParameterStore,
    history: FilterHistory,
    stream: RngStream,
    t: usize,
}

impl<'a> AmdfFilter<'a> {
    /// Start from the mean of the latents of the modalities enabled at `t = 0`.
    pub fn initialize(
        model: &'a AmdfModel,
        store: &'a ParameterStore,
        bundle: &ModalityBundle,
        mask: &AttentionGainMask,
        stream: RngStream,
    ) -> Result<(Self, FilterDiagnostics)> {
        let mods = mask.modalities();
        if mods.is_empty() {
            return Err(Error::Invalid("filter initialization needs at least one modality".into()));
        }
        let mut tape = Tape::new();
        let obs = encode_observations(model, &mut tape, store, bundle, mask, stream.child(0))?;
        let present: Vec<Var> = obs.iter().flatten().copied().collect();
        let mut x = present[0];
        for &y in &present[1..] {
            x = tape.add(x, y)?;
        }
        let x = tape.scale(x, 1.0 / present.len() as f64)?;
        let pose = decode_mean(model, &mut tape, store, x)?;
        let mut history = FilterHistory::new(model.cfg.history);
        history.push(LatentEnsemble::new(tape.value(x).clone(), 0)?);
        let mut mass = BTreeMap::new();
        mass.insert("prediction".to_string(), 0.0);
        for m in Modality::ALL {
            let share = if mask.is_enabled(m) { 1.0 / mods.len() as f64 } else { 0.0 };
            mass.insert(m.name().to_string(), share);
        }
        let diag = FilterDiagnostics {
            t: 0,
            mass,
            innovation: BTreeMap::new(),
            state: pose_of(tape.value(pose)),
        };
        Ok((
            AmdfFilter {
                model,
                store,
                history,
                stream,
                t: 0,
            },
            diag,
        ))
    }

    pub fn history(&self) -> &FilterHistory {
        &self.history
    }

    pub fn step(&mut self, action: &[f64], bundle: &ModalityBundle, mask: &AttentionGainMask) -> Result<FilterDiagnostics> {
        self.t += 1;
        let mut tape = Tape::new();
        let hist: Vec<Var> = self
            .history
            .iter()
            .map(|x| tape.input(x.members.clone()))
            .collect::<Result<_>>()?;
        let action = Tensor::column(action.to_vec());
        let tr = amdf_step(
            self.model,
            &mut tape,
            self.store,
            &hist,
            &action,
            bundle,
            mask,
            self.stream.child(self.t as u64),
        )?;
        let pose = decode_mean(self.model, &mut tape, self.store, tr.post)?;
        let d = self.model.cfg.latent_dim;
        let mass_arr = source_mass(tape.value(tr.weights), d);
        let mut mass = BTreeMap::new();
        mass.insert("prediction".to_string(), mass_arr[0]);
        for m in Modality::ALL {
            mass.insert(m.name().to_string(), mass_arr[1 + m.index()]);
        }
        let prior_mean = tape.value(tr.prior).row_mean();
        let mut innovation = BTreeMap::new();
        for m in mask.modalities() {
            if let Some(y) = tr.obs[m.index()] {
                let diff = tape.value(y).row_mean().zip(&prior_mean, |a, b| a - b);
                innovation.insert(m.name().to_string(), diff.frobenius());
            }
        }
        self.history.push(LatentEnsemble::new(tape.value(tr.post).clone(), self.t)?);
        Ok(FilterDiagnostics {
            t: self.t,
            mass,
            innovation,
            state: pose_of(tape.value(pose)),
        })
    }
}

pub const SOURCE_NAMES: [&str; SOURCES] = ["prediction", "rgb", "depth", "proprio"];
