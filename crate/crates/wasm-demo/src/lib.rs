//! Browser bindings for three small views of the filter: the attention-gain
//! weights of one update, precision and crossmodal fusion of Gaussians, and
//! the rendered arm.
//!
//! Each binding wraps a plain function returning `Result<_, String>` so the
//! logic is testable without a JavaScript host.

use mdf_core::autodiff::{ParameterStore, Tape};
use mdf_core::blocks::{GainMode, QUERY};
use mdf_core::filters::{attention_gain_update, source_weights, AttentionGainMask, SOURCES};
use mdf_core::fusion::{crossmodal_fuse, unimodal_fuse, GaussianBelief};
use mdf_core::sim::arm::joint_positions;
use mdf_core::sim::render::{render_depth_clean, render_rgb};
use mdf_core::sim::{forward_kinematics, ArmConfig, ArmState, RenderConfig};
use mdf_core::{RngStream, Tensor};
use wasm_bindgen::prelude::*;

/// `rows × cols` standard normal draws from the core's seeded initializer.
fn normal_tensor(rows: usize, cols: usize, stream: RngStream) -> Tensor {
    let mut s = ParameterStore::new();
    s.insert_normal("n", rows, cols, 1.0, stream).expect("fresh store");
    s.value("n").expect("just inserted").clone()
}

/// One attention-gain update on a random `d × e` prediction ensemble.
///
/// Modality `m`'s latent ensemble is the prediction shifted by
/// `offsets[m]` with its own noise of scale `spreads[m]`. Returns the
/// `d × 4` source weights row-major, then the prior mean and the posterior
/// mean (`d` each).
pub fn gain_weights(d: usize, e: usize, seed: u64, offsets: &[f64], spreads: &[f64], enabled: &[bool], literal: bool) -> Result<Vec<f64>, String> {
    if d == 0 || d > 64 || !(2..=256).contains(&e) {
        return Err(format!("need 1 ≤ d ≤ 64 and 2 ≤ E ≤ 256, got d={d}, E={e}"));
    }
    if offsets.len() != 3 || spreads.len() != 3 || enabled.len() != 3 {
        return Err("offsets, spreads and enabled take one entry per modality".into());
    }
    let root = RngStream(seed);
    let mut store = ParameterStore::new();
    store.insert(QUERY, normal_tensor(d, e, root.named("query")).map(|v| 0.5 * v)).map_err(|e| e.to_string())?;
    let x = normal_tensor(d, e, root.named("prior")).map(|v| 0.3 * v);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone()).map_err(|e| e.to_string())?;
    let mut obs = [None; 3];
    for m in 0..3 {
        let noise = normal_tensor(d, e, root.named("obs").child(m as u64));
        let y = x.zip(&noise, |a, n| a + offsets[m] + spreads[m] * n);
        obs[m] = Some(tape.input(y).map_err(|e| e.to_string())?);
    }
    let mask = AttentionGainMask {
        enabled: [enabled[0], enabled[1], enabled[2]],
    };
    let mode = if literal { GainMode::Hadamard } else { GainMode::Exclusion };
    let out = attention_gain_update(&mut tape, &store, xv, &obs, &mask, mode).map_err(|e| e.to_string())?;
    let mut result = source_weights(tape.value(out.weights), d).data().to_vec();
    result.extend(x.row_mean().data());
    result.extend(tape.value(out.post).row_mean().data());
    Ok(result)
}

/// Fuse 1-d Gaussians. Returns `[unimodal mean, unimodal var, crossmodal
/// mean, crossmodal var]`.
pub fn fuse_gaussians(means: &[f64], vars: &[f64], betas: &[f64]) -> Result<Vec<f64>, String> {
    if means.len() != vars.len() || betas.len() != means.len() {
        return Err("means, variances and betas must have equal length".into());
    }
    let beliefs = means
        .iter()
        .zip(vars)
        .map(|(&m, &v)| GaussianBelief::new(vec![m], vec![v]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let uni = unimodal_fuse(&beliefs).map_err(|e| e.to_string())?;
    let b: Vec<Vec<f64>> = betas.iter().map(|&b| vec![b]).collect();
    let cross = crossmodal_fuse(&beliefs, &b).map_err(|e| e.to_string())?;
    Ok(vec![uni.mean[0], uni.cov[0], cross.mean[0], cross.cov[0]])
}

/// RGBA pixels of the arm at the given joint angles, `size × size`.
/// `depth` selects the noise-free depth field instead of the colour image.
pub fn arm_pixels(angles: &[f64], size: usize, depth: bool) -> Result<Vec<u8>, String> {
    let angles: [f64; 3] = angles.try_into().map_err(|_| "three joint angles expected".to_string())?;
    if !(8..=256).contains(&size) {
        return Err(format!("image size {size} outside [8, 256]"));
    }
    let arm = ArmConfig::default();
    let rc = RenderConfig {
        image_size: size,
        ..RenderConfig::default()
    };
    let s = ArmState::at_rest(angles);
    let n = size * size;
    let mut px = Vec::with_capacity(4 * n);
    if depth {
        let d = render_depth_clean(&arm, &rc, &s);
        for &v in d.data() {
            let g = ((1.0 - v) * 255.0).round() as u8;
            px.extend_from_slice(&[g, g, g, 255]);
        }
    } else {
        let img: Tensor = render_rgb(&arm, &rc, &s);
        for i in 0..n {
            px.extend((0..3).map(|c| (img.data()[c * n + i] * 255.0).round() as u8));
            px.push(255);
        }
    }
    Ok(px)
}

/// End-effector `[x, y]` and joint positions `[x0, y0, …, x3, y3]`.
pub fn arm_geometry(angles: &[f64]) -> Result<Vec<f64>, String> {
    let angles: [f64; 3] = angles.try_into().map_err(|_| "three joint angles expected".to_string())?;
    let arm = ArmConfig::default();
    let pose = forward_kinematics(&arm, &ArmState::at_rest(angles).angles);
    let mut out = vec![pose[0], pose[1]];
    for p in joint_positions(&arm, &angles) {
        out.extend_from_slice(&p);
    }
    Ok(out)
}

pub const NUM_SOURCES: usize = SOURCES;

#[wasm_bindgen(js_name = gainWeights)]
pub fn gain_weights_js(d: usize, e: usize, seed: u32, offsets: &[f64], spreads: &[f64], enabled: &[u8], literal: bool) -> Result<Vec<f64>, JsError> {
    let enabled: Vec<bool> = enabled.iter().map(|&b| b != 0).collect();
    gain_weights(d, e, seed as u64, offsets, spreads, &enabled, literal).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fuseGaussians)]
pub fn fuse_gaussians_js(means: &[f64], vars: &[f64], betas: &[f64]) -> Result<Vec<f64>, JsError> {
    fuse_gaussians(means, vars, betas).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = armPixels)]
pub fn arm_pixels_js(angles: &[f64], size: usize, depth: bool) -> Result<Vec<u8>, JsError> {
    arm_pixels(angles, size, depth).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = armGeometry)]
pub fn arm_geometry_js(angles: &[f64]) -> Result<Vec<f64>, JsError> {
    arm_geometry(angles).map_err(|e| JsError::new(&e))
}
