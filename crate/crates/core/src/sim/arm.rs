//! Planar three-link tendon-driven arm.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const NUM_JOINTS: usize = 3;
pub const STATE_DIM: usize = 7;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArmConfig {
    pub link_lengths: [f64; NUM_JOINTS],
    /// Largest equilibrium angle each joint can be driven to (rad).
    pub joint_limits: [f64; NUM_JOINTS],
    pub action_dim: usize,
    pub damping: f64,
    pub dt: f64,
    pub mixing_seed: u64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            link_lengths: [0.4, 0.3, 0.3],
            joint_limits: [1.2, 1.0, 1.0],
            action_dim: 40,
            damping: 2.0,
            dt: 1.0 / 30.0,
            mixing_seed: 0x7e45,
        }
    }
}

/// Joint angles and rates. The 7-d pose is derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub angles: [f64; NUM_JOINTS],
    pub rates: [f64; NUM_JOINTS],
}

impl ArmState {
    pub fn at_rest(angles: [f64; NUM_JOINTS]) -> Self {
        ArmState {
            angles: angles.map(wrap_angle),
            rates: [0.0; NUM_JOINTS],
        }
    }
}

/// Wrap into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Absolute link orientations (cumulative joint angles).
pub fn link_headings(angles: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    let mut out = [0.0; NUM_JOINTS];
    let mut acc = 0.0;
    for (o, a) in out.iter_mut().zip(angles) {
        acc += a;
        *o = acc;
    }
    out
}

/// Joint positions from the base (index 0, the origin) to the end effector.
/// Heading zero points along +y, positive angles turn toward −x.
pub fn joint_positions(cfg: &ArmConfig, angles: &[f64; NUM_JOINTS]) -> [[f64; 2]; NUM_JOINTS + 1] {
    let mut pts = [[0.0; 2]; NUM_JOINTS + 1];
    for (k, h) in link_headings(angles).iter().enumerate() {
        let l = cfg.link_lengths[k];
        pts[k + 1] = [pts[k][0] - l * h.sin(), pts[k][1] + l * h.cos()];
    }
    pts
}

/// End-effector pose `[x, y, z, qx, qy, qz, qw]`; the arm moves in the image
/// plane so `z`, `qx` and `qy` are always zero.
pub fn forward_kinematics(cfg: &ArmConfig, angles: &[f64; NUM_JOINTS]) -> [f64; STATE_DIM] {
    let pts = joint_positions(cfg, angles);
    let ee = pts[NUM_JOINTS];
    let heading = link_headings(angles)[NUM_JOINTS - 1];
    let half = 0.5 * heading;
    [ee[0], ee[1], 0.0, 0.0, 0.0, half.sin(), half.cos()]
}

/// Fixed actuator-to-joint mixing. Each joint has an agonist and an
/// antagonist group of actuators; the group weights of a joint sum to
/// `±damping · limit`, so equal group pressures hold the joint at zero and a
/// full pressure difference drives it to its limit. Leftover actuators are
/// padding with zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub weights: Vec<[f64; NUM_JOINTS]>,
    /// `(agonists, antagonists)` per joint.
    pub groups: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Mixing {
    pub fn new(cfg: &ArmConfig) -> Result<Self> {
        let per_group = cfg.action_dim / (2 * NUM_JOINTS);
        if per_group == 0 {
            return Err(Error::Invalid(format!(
                "action_dim {} too small for {} joints",
                cfg.action_dim, NUM_JOINTS
            )));
        }
        let stream = RngStream(cfg.mixing_seed);
        let mut rng = stream.rng();
        let mut order: Vec<usize> = (0..cfg.action_dim).collect();
        order.shuffle(&mut rng);
        let mut weights = vec![[0.0; NUM_JOINTS]; cfg.action_dim];
        let mut groups = Vec::with_capacity(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            let gain = cfg.damping * cfg.joint_limits[j];
            let mut pair = (Vec::new(), Vec::new());
            for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let start = (2 * j + side) * per_group;
                let members: Vec<usize> = order[start..start + per_group].to_vec();
                let raw: Vec<f64> = members.iter().map(|_| rng.random_range(0.8..1.2)).collect();
                let total: f64 = raw.iter().sum();
                for (&m, r) in members.iter().zip(&raw) {
                    weights[m][j] = sign * gain * r / total;
                }
                if side == 0 {
                    pair.0 = members;
                } else {
                    pair.1 = members;
                }
            }
            groups.push(pair);
        }
        Ok(Mixing { weights, groups })
    }

    /// Joint torque-like drive `W · a`.
    pub fn drive(&self, action: &[f64]) -> [f64; NUM_JOINTS] {
        let mut out = [0.0; NUM_JOINTS];
        for (w, a) in self.weights.iter().zip(action) {
            for j in 0..NUM_JOINTS {
                out[j] += w[j] * a;
            }
        }
        out
    }

    /// Action whose fixed point is `angles`; padding actuators sit at 0.5.
    pub fn equilibrium_action(&self, cfg: &ArmConfig, angles: &[f64; NUM_JOINTS]) -> Result<Vec<f64>> {
        let mut a = vec![0.5; cfg.action_dim];
        for (j, (ago, anta)) in self.groups.iter().enumerate() {
            let delta = angles[j] / cfg.joint_limits[j];
            if delta.abs() > 1.0 {
                return Err(Error::Invalid(format!(
                    "joint {j} angle {} beyond limit {}",
                    angles[j], cfg.joint_limits[j]
                )));
            }
            for &i in ago {
                a[i] = 0.5 + 0.5 * delta;
            }
            for &i in anta {
                a[i] = 0.5 - 0.5 * delta;
            }
        }
        Ok(a)
    }
}

fn rates(cfg: &ArmConfig, drive: &[f64; NUM_JOINTS], angles: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
    let mut r = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        r[j] = drive[j] - cfg.damping * angles[j];
    }
    r
}

/// Integrate `θ̇ = W·a − damping·θ` over `duration` with `substeps` RK4 steps.
pub fn integrate(cfg: &ArmConfig, mixing: &Mixing, s: &ArmState, action: &[f64], duration: f64, substeps: usize) -> ArmState {
    let drive = mixing.drive(action);
    let h = duration / substeps as f64;
    let mut th = s.angles;
    let add = |a: &[f64; NUM_JOINTS], k: &[f64; NUM_JOINTS], c: f64| {
        let mut o = *a;
        for j in 0..NUM_JOINTS {
            o[j] += c * k[j];
        }
        o
    };
    for _ in 0..substeps {
        let k1 = rates(cfg, &drive, &th);
        let k2 = rates(cfg, &drive, &add(&th, &k1, 0.5 * h));
        let k3 = rates(cfg, &drive, &add(&th, &k2, 0.5 * h));
        let k4 = rates(cfg, &drive, &add(&th, &k3, h));
        for j in 0..NUM_JOINTS {
            th[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    ArmState {
        angles: th.map(wrap_angle),
        rates: rates(cfg, &drive, &th),
    }
}

/// One control period of the first-order tendon model (single RK4 step).
pub fn step_dynamics(cfg: &ArmConfig, mixing: &Mixing, s: &ArmState, action: &[f64]) -> ArmState {
    integrate(cfg, mixing, s, action, cfg.dt, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ArmConfig, Mixing) {
        let cfg = ArmConfig::default();
        let m = Mixing::new(&cfg).unwrap();
        (cfg, m)
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let (cfg, m) = setup();
        let angles = [0.7, -0.3, 0.95];
        let a = m.equilibrium_action(&cfg, &angles).unwrap();
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let s = ArmState::at_rest(angles);
        let next = step_dynamics(&cfg, &m, &s, &a);
        for j in 0..NUM_JOINTS {
            assert!((next.angles[j] - angles[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_action_from_zero_stays() {
        let (cfg, m) = setup();
        let s = ArmState::at_rest([0.0; 3]);
        let next = step_dynamics(&cfg, &m, &s, &vec![0.0; cfg.action_dim]);
        assert_eq!(next.angles, [0.0; 3]);
    }

    #[test]
    fn rollout_matches_fine_integrator() {
        let (cfg, m) = setup();
        let mut rng = RngStream(9).rng();
        let mut coarse = ArmState::at_rest([0.2, -0.1, 0.4]);
        let mut fine = coarse;
        let mut action: Vec<f64> = vec![0.5; cfg.action_dim];
        for t in 0..100 {
            if t % 10 == 0 {
                action = (0..cfg.action_dim).map(|_| rng.random()).collect();
            }
            coarse = step_dynamics(&cfg, &m, &coarse, &action);
            fine = integrate(&cfg, &m, &fine, &action, cfg.dt, 10);
        }
        for j in 0..NUM_JOINTS {
            assert!((coarse.angles[j] - fine.angles[j]).abs() < 1e-3);
        }
    }

    #[test]
    fn pose_has_unit_quaternion_and_matches_geometry() {
        let cfg = ArmConfig::default();
        let pose = forward_kinematics(&cfg, &[0.0, 0.0, 0.0]);
        assert!((pose[0]).abs() < 1e-12);
        assert!((pose[1] - 1.0).abs() < 1e-12);
        assert_eq!(&pose[3..], &[0.0, 0.0, 0.0, 1.0]);
        let pose = forward_kinematics(&cfg, &[0.3, -1.1, 0.4]);
        let qn: f64 = pose[3..].iter().map(|v| v * v).sum();
        assert!((qn - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.0 * PI + 0.1, 7.5] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-12);
        }
    }
}
