//! Reverse-mode automatic differentiation over dense f64 tensors.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, BLOB_FILE, MANIFEST_FILE};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use params::{Parameter, ParameterStore};
pub use tape::{ConvGeometry, Gradients, Tape, Var, LAYER_NORM_EPS};

#[cfg(test)]
use tape::softmax_rows;
