//! Attention-gain measurement update.

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::blocks::{positional_embed, GainMode, QUERY};
use crate::error::{Error, Result};
use crate::sim::render::Modality;
use crate::tensor::Tensor;

/// Large negative logit used to exclude masked sources.
pub const MASK_LOGIT: f64 = -1e9;

/// Number of sources: the prediction plus one per modality.
pub const SOURCES: usize = 1 + Modality::ALL.len();

/// Per-modality enable flags. The prediction source is always enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AttentionGainMask {
    pub enabled: [bool; 3],
}

impl AttentionGainMask {
    pub fn all() -> Self {
        AttentionGainMask { enabled: [true; 3] }
    }

    pub fn none() -> Self {
        AttentionGainMask { enabled: [false; 3] }
    }

    pub fn only(mods: &[Modality]) -> Self {
        let mut enabled = [false; 3];
        for m in mods {
            enabled[m.index()] = true;
        }
        AttentionGainMask { enabled }
    }

    pub fn is_enabled(&self, m: Modality) -> bool {
        self.enabled[m.index()]
    }

    /// Source `s` (0 = prediction) enabled?
    pub fn source(&self, s: usize) -> bool {
        s == 0 || self.enabled[s - 1]
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|m| self.is_enabled(*m)).collect()
    }

    /// Enable flags intersected with what a bundle actually carries.
    pub fn and(&self, available: [bool; 3]) -> Self {
        let mut enabled = self.enabled;
        for (e, a) in enabled.iter_mut().zip(available) {
            *e &= a;
        }
        AttentionGainMask { enabled }
    }

    /// Boolean `d × (SOURCES·d)` map: row `j` may only look at key row `j`
    /// of each enabled source.
    pub fn matrix(&self, d: usize) -> Vec<Vec<bool>> {
        (0..d)
            .map(|j| (0..SOURCES * d).map(|c| c % d == j && self.source(c / d)).collect())
            .collect()
    }

    /// Human-readable subset label such as `rgb+proprio`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = self.modalities().iter().map(|m| m.name()).collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }

    /// Inverse of [`AttentionGainMask::label`]; `all` is accepted too.
    pub fn parse(label: &str) -> Result<Self> {
        match label.trim() {
            "none" => Ok(Self::none()),
            "all" => Ok(Self::all()),
            s => {
                let mut mask = Self::none();
                for part in s.split(['+', ',']) {
                    mask.enabled[Modality::parse(part.trim())?.index()] = true;
                }
                Ok(mask)
            }
        }
    }

    /// The seven non-empty modality subsets, largest first.
    pub fn subsets() -> Vec<Self> {
        let mut out: Vec<Self> = (1u8..8)
            .map(|bits| AttentionGainMask {
                enabled: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
            })
            .collect();
        out.sort_by_key(|m| (std::cmp::Reverse(m.modalities().len()), m.modalities().iter().map(|x| x.index()).collect::<Vec<_>>()));
        out
    }
}

/// Result of one attention-gain update.
#[derive(Debug, Clone, Copy)]
pub struct GainOutput {
    pub post: Var,
    /// Exclusion mode: `d × SOURCES`; Hadamard mode: `d × (SOURCES·d)`.
    pub weights: Var,
}

fn centered(tape: &mut Tape, x: Var) -> Result<Var> {
    let e = tape.value(x).cols();
    let m = tape.row_mean(x)?;
    let m = tape.broadcast_cols(m, e)?;
    tape.sub(x, m)
}

/// Row block `s` of the key positional code, `d × E`.
fn key_code(d: usize, e: usize) -> Result<Tensor> {
    let positions: Vec<usize> = (0..SOURCES * d).collect();
    Ok(positional_embed(&positions, e, SOURCES * d)?.transpose())
}

fn block(t: &Tensor, s: usize, d: usize) -> Tensor {
    Tensor::from_vec(d, t.cols(), t.data()[s * d * t.cols()..(s + 1) * d * t.cols()].to_vec())
}

/// Attention-gain update of the predicted ensemble `x` (`d × E`) with the
/// latent observations `obs` (indexed by modality).
///
/// Queries are the learned `d × E` matrix plus a positional code; keys are
/// zero-centred sources plus their positional codes; scores are divided by
/// `√E`. In exclusion mode row `j` attends only to row `j` of each enabled
/// source and the output is written in gain form
/// `X + Σ_s w_s ⊙ (Y_s − X)`, which equals the convex combination of values.
/// Disabled modalities are never read.
pub fn attention_gain_update(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    obs: &[Option<Var>; 3],
    mask: &AttentionGainMask,
    mode: GainMode,
) -> Result<GainOutput> {
    let (d, e) = (tape.value(x).rows(), tape.value(x).cols());
    let q = tape.param(store, QUERY)?;
    if tape.value(q).shape() != [d, e] {
        return Err(Error::shape(
            "attention_gain",
            format!("query {:?} for ensemble {d}x{e}", tape.value(q).shape()),
        ));
    }
    let mut values: Vec<Option<Var>> = vec![Some(x)];
    for m in Modality::ALL {
        if mask.is_enabled(m) {
            let y = obs[m.index()].ok_or(Error::ModalityUnavailable(m.name()))?;
            if tape.value(y).shape() != [d, e] {
                return Err(Error::shape(
                    "attention_gain",
                    format!("{} latent {:?}, expected {d}x{e}", m.name(), tape.value(y).shape()),
                ));
            }
            values.push(Some(y));
        } else {
            values.push(None);
        }
    }
    let codes = key_code(d, e)?;
    let qc = tape.constant(block(&codes, 0, d))?;
    let qp = tape.add(q, qc)?;
    let scale = 1.0 / (e as f64).sqrt();

    match mode {
        GainMode::Exclusion => {
            let mut scores = Vec::with_capacity(SOURCES);
            let mut bias = Tensor::zeros(d, SOURCES);
            for (s, v) in values.iter().enumerate() {
                match v {
                    Some(v) => {
                        let k = centered(tape, *v)?;
                        let kc = tape.constant(block(&codes, s, d))?;
                        let k = tape.add(k, kc)?;
                        let prod = tape.mul(qp, k)?;
                        let sc = tape.row_sum(prod)?;
                        scores.push(tape.scale(sc, scale)?);
                    }
                    None => {
                        scores.push(tape.constant(Tensor::zeros(d, 1))?);
                        for j in 0..d {
                            bias.set(j, s, MASK_LOGIT);
                        }
                    }
                }
            }
            let s = tape.concat_cols(&scores)?;
            let b = tape.constant(bias)?;
            let s = tape.add(s, b)?;
            let w = tape.softmax_rows(s)?;
            let mut post = x;
            for (s, v) in values.iter().enumerate().skip(1) {
                if let Some(v) = v {
                    let diff = tape.sub(*v, x)?;
                    let ws = tape.slice_cols(w, s, 1)?;
                    let term = tape.mul_col(diff, ws)?;
                    post = tape.add(post, term)?;
                }
            }
            Ok(GainOutput { post, weights: w })
        }
        GainMode::Hadamard => {
            let zeros = tape.constant(Tensor::zeros(d, e))?;
            let mut keys = Vec::with_capacity(SOURCES);
            let mut vals = Vec::with_capacity(SOURCES);
            for v in &values {
                let v = v.unwrap_or(zeros);
                keys.push(centered(tape, v)?);
                vals.push(v);
            }
            let k = tape.concat_rows(&keys)?;
            let kc = tape.constant(codes)?;
            let k = tape.add(k, kc)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(qp, kt)?;
            let s = tape.scale(s, scale)?;
            let m: Vec<f64> = mask
                .matrix(d)
                .into_iter()
                .flatten()
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect();
            let m = tape.constant(Tensor::from_vec(d, SOURCES * d, m))?;
            let s = tape.mul(s, m)?;
            let w = tape.softmax_rows(s)?;
            let v = tape.concat_rows(&vals)?;
            let post = tape.matmul(w, v)?;
            Ok(GainOutput { post, weights: w })
        }
    }
}

/// Collapse attention weights to `d × SOURCES` (mass per state index and source).
pub fn source_weights(weights: &Tensor, d: usize) -> Tensor {
    if weights.cols() == SOURCES {
        return weights.clone();
    }
    let mut out = Tensor::zeros(d, SOURCES);
    for j in 0..d {
        for c in 0..weights.cols() {
            let s = c / d;
            out.set(j, s, out.get(j, s) + weights.get(j, c));
        }
    }
    out
}

/// Mean attention mass of each source over state indices; sums to one.
pub fn source_mass(weights: &Tensor, d: usize) -> [f64; SOURCES] {
    let w = source_weights(weights, d);
    let mut m = [0.0; SOURCES];
    for (s, v) in m.iter_mut().enumerate() {
        *v = (0..d).map(|j| w.get(j, s)).sum::<f64>() / d as f64;
    }
    m
}
