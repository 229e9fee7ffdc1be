//! Recursive estimators: the attention-gain filter, the differentiable
//! ensemble Kalman filter and an extended Kalman filter baseline.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

pub mod amdf;
pub mod dekf;
pub mod denkf;
pub mod gain;

pub use amdf::{amdf_predict, amdf_step, decode_mean, encode_observations, AmdfFilter, StepTrace, SOURCE_NAMES};
pub use dekf::{dekf_predict, dekf_step, DekfConfig, DekfModels, DekfNet, LearnedDekf, LinearModels};
pub use denkf::{denkf_update, DenkfConfig, DenkfModel};
pub use gain::{attention_gain_update, source_mass, source_weights, AttentionGainMask, GainOutput, MASK_LOGIT, SOURCES};

/// `d × E` ensemble at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEnsemble {
    pub members: Tensor,
    pub t: usize,
}

impl LatentEnsemble {
    pub fn new(members: Tensor, t: usize) -> Result<Self> {
        if members.cols() < 2 {
            return Err(Error::Invalid(format!("ensemble needs at least 2 members, got {}", members.cols())));
        }
        if !members.is_finite() {
            return Err(Error::NonFinite { op: "ensemble" });
        }
        Ok(LatentEnsemble { members, t })
    }

    pub fn mean(&self) -> Vec<f64> {
        ensemble_mean(&self.members)
    }
}

/// Row means of `x`.
pub fn ensemble_mean(x: &Tensor) -> Vec<f64> {
    x.row_mean().into_data()
}

/// Last `N` ensembles, oldest first.
#[derive(Debug, Clone)]
pub struct FilterHistory {
    window: usize,
    items: VecDeque<LatentEnsemble>,
}

impl FilterHistory {
    pub fn new(window: usize) -> Self {
        FilterHistory {
            window: window.max(1),
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, x: LatentEnsemble) {
        if self.items.len() == self.window {
            self.items.pop_front();
        }
        self.items.push_back(x);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LatentEnsemble> {
        self.items.iter()
    }

    pub fn last(&self) -> Option<&LatentEnsemble> {
        self.items.back()
    }
}

/// One JSON line of filter diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub t: usize,
    /// Mean attention mass per source over state indices.
    pub mass: BTreeMap<String, f64>,
    /// Distance between each modality's latent mean and the predicted mean.
    pub innovation: BTreeMap<String, f64>,
    pub state: [f64; STATE_DIM],
}

#[cfg(test)]
mod tests;
