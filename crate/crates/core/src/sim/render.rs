//! Synthetic sensors: colour stick render, distance-field depth and noisy
//! per-link inertial readings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sim::arm::{joint_positions, link_headings, ArmConfig, ArmState, NUM_JOINTS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Proprio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Proprio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Proprio => "proprio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "proprio" | "imu" => Ok(Modality::Proprio),
            other => Err(Error::Invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// Where each simulated IMU sits: `(link index, fraction along the link)`.
pub const IMU_MOUNTS: [(usize, f64); 5] = [(0, 0.5), (0, 1.0), (1, 0.5), (1, 1.0), (2, 0.5)];
pub const PROPRIO_DIM: usize = 6 * IMU_MOUNTS.len();

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Half-width of the square world window mapped onto the image.
    pub extent: f64,
    pub thickness: f64,
    /// Distance that maps to depth value 1.
    pub depth_range: f64,
    /// Multiplicative per-pixel depth noise.
    pub depth_noise: f64,
    /// Additive Gaussian noise on every proprioceptive channel.
    pub proprio_noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            image_size: 32,
            extent: 1.05,
            thickness: 0.04,
            depth_range: 1.0,
            depth_noise: 0.3,
            proprio_noise: 0.3,
        }
    }
}

/// One timestep of raw observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    /// `3 × (size·size)`, channel-major, values in `[0, 1]`.
    pub rgb: Tensor,
    /// `1 × (size·size)`, values in `[0, 1]`.
    pub depth: Tensor,
    /// `30 × 1`.
    pub proprio: Tensor,
    pub available: [bool; 3],
}

impl ModalityBundle {
    pub fn get(&self, m: Modality) -> Result<&Tensor> {
        if !self.available[m.index()] {
            return Err(Error::ModalityUnavailable(m.name()));
        }
        Ok(match m {
            Modality::Rgb => &self.rgb,
            Modality::Depth => &self.depth,
            Modality::Proprio => &self.proprio,
        })
    }

    pub fn with_available(mut self, available: [bool; 3]) -> Self {
        self.available = available;
        self
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

/// World coordinates of a pixel centre (row 0 at the top).
pub fn pixel_center(rc: &RenderConfig, row: usize, col: usize) -> [f64; 2] {
    let px = 2.0 * rc.extent / rc.image_size as f64;
    [-rc.extent + (col as f64 + 0.5) * px, rc.extent - (row as f64 + 0.5) * px]
}

/// Per-link distances from every pixel centre, `links × pixels`.
fn link_distances(arm: &ArmConfig, rc: &RenderConfig, s: &ArmState) -> Vec<[f64; NUM_JOINTS]> {
    let pts = joint_positions(arm, &s.angles);
    let n = rc.image_size;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let p = pixel_center(rc, r, c);
            let mut d = [0.0; NUM_JOINTS];
            for (k, dk) in d.iter_mut().enumerate() {
                *dk = segment_distance(p, pts[k], pts[k + 1]);
            }
            out.push(d);
        }
    }
    out
}

/// Anti-aliased stick figure, one colour channel per link.
pub fn render_rgb(arm: &ArmConfig, rc: &RenderConfig, s: &ArmState) -> Tensor {
    let px = 2.0 * rc.extent / rc.image_size as f64;
    let dists = link_distances(arm, rc, s);
    let npx = dists.len();
    let mut out = Tensor::zeros(3, npx);
    for (i, d) in dists.iter().enumerate() {
        for k in 0..NUM_JOINTS {
            let v = (1.0 - (d[k] - rc.thickness) / px).clamp(0.0, 1.0);
            out.data_mut()[k * npx + i] = v;
        }
    }
    out
}

/// Noise-free depth, estimated from the colour frame: distance from each
/// pixel centre to the nearest pixel the arm lights to at least half
/// intensity, scaled to `[0, 1]`. It sees only the binary silhouette, so it
/// carries neither link identity nor sub-pixel position.
pub fn depth_from_rgb(rgb: &Tensor, rc: &RenderConfig) -> Tensor {
    let n = rc.image_size;
    let npx = n * n;
    let lit: Vec<[f64; 2]> = (0..npx)
        .filter(|&i| (0..NUM_JOINTS).any(|k| rgb.data()[k * npx + i] >= 0.5))
        .map(|i| pixel_center(rc, i / n, i % n))
        .collect();
    let data = (0..npx)
        .map(|i| {
            let p = pixel_center(rc, i / n, i % n);
            let d2 = lit.iter().map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).fold(f64::INFINITY, f64::min);
            (d2.sqrt() / rc.depth_range).min(1.0)
        })
        .collect();
    Tensor::from_vec(1, npx, data)
}

pub fn render_depth_clean(arm: &ArmConfig, rc: &RenderConfig, s: &ArmState) -> Tensor {
    depth_from_rgb(&render_rgb(arm, rc, s), rc)
}

/// Noise-free inertial readings: per IMU the gravity direction in the link
/// frame, a centripetal term, and the link angular rate.
pub fn proprio_clean(arm: &ArmConfig, s: &ArmState) -> Vec<f64> {
    let headings = link_headings(&s.angles);
    let mut link_rates = [0.0; NUM_JOINTS];
    let mut acc = 0.0;
    for (o, r) in link_rates.iter_mut().zip(&s.rates) {
        acc += r;
        *o = acc;
    }
    let mut out = Vec::with_capacity(PROPRIO_DIM);
    for &(link, frac) in &IMU_MOUNTS {
        let h = headings[link];
        let w = link_rates[link];
        let radius = frac * arm.link_lengths[link];
        out.extend_from_slice(&[h.sin(), h.cos() - w * w * radius, 0.0, 0.0, 0.0, w]);
    }
    out
}

/// Render every modality for one state. Noise (depth and proprio) is drawn
/// from `noise`; everything else is a deterministic function of the state.
pub fn render_bundle(arm: &ArmConfig, rc: &RenderConfig, s: &ArmState, noise: RngStream) -> ModalityBundle {
    let rgb = render_rgb(arm, rc, s);
    let mut depth = depth_from_rgb(&rgb, rc);
    let mut rng = noise.named("depth").rng();
    for v in depth.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        let f = (1.0 + rc.depth_noise * n).max(0.05);
        *v = (*v * f).min(1.0);
    }
    let mut rng = noise.named("proprio").rng();
    let proprio = proprio_clean(arm, s)
        .into_iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            v + rc.proprio_noise * n
        })
        .collect();
    ModalityBundle {
        rgb,
        depth,
        proprio: Tensor::column(proprio),
        available: [true; 3],
    }
}

/// Smooth procedural distractor: a handful of soft coloured blobs.
pub fn background(size: usize, seed: u64) -> Tensor {
    let mut rng = RngStream(seed).named("background").rng();
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..6)
        .map(|_| {
            (
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                rng.random_range(0.08..0.3),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    let npx = size * size;
    let mut out = Tensor::zeros(3, npx);
    for r in 0..size {
        for c in 0..size {
            let p = [(c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64];
            for (center, radius, color) in &blobs {
                let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                let w = (-d2 / (2.0 * radius * radius)).exp();
                for ch in 0..3 {
                    out.data_mut()[ch * npx + r * size + c] += w * color[ch];
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = v.min(1.0);
    }
    out
}

/// Blend a background into an image: `(1 − λ)·rgb + λ·background`, clamped.
pub fn apply_drift(rgb: &Tensor, background: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("blend level {lambda} outside [0, 1]")));
    }
    if !rgb.same_shape(background) {
        return Err(Error::shape(
            "apply_drift",
            format!("{:?} vs {:?}", rgb.shape(), background.shape()),
        ));
    }
    Ok(rgb.zip(background, |a, b| ((1.0 - lambda) * a + lambda * b).clamp(0.0, 1.0)))
}
