//! Synthetic multimodal environment: a planar three-link arm with colour
//! camera, depth and inertial streams.

pub mod arm;
pub mod dataset;
pub mod render;

pub use arm::{forward_kinematics, step_dynamics, ArmConfig, ArmState, Mixing, NUM_JOINTS, STATE_DIM};
pub use dataset::{generate_dataset, DatasetManifest, SimConfig, TrajectoryDataset};
pub use render::{apply_drift, background, render_bundle, Modality, ModalityBundle, RenderConfig, PROPRIO_DIM};
