//! Trajectory datasets: in-memory generation and the on-disk layout
//! (`manifest.json` + `trials.bin`).

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sim::arm::{forward_kinematics, step_dynamics, ArmConfig, ArmState, Mixing, NUM_JOINTS, STATE_DIM};
use crate::sim::render::{render_bundle, ModalityBundle, RenderConfig, PROPRIO_DIM};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIALS_FILE: &str = "trials.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    pub arm: ArmConfig,
    pub render: RenderConfig,
    pub trials: usize,
    pub steps: usize,
    /// A new random pressure vector is applied every `segment_len` steps.
    pub segment_len: usize,
    /// Fraction of trials (taken from the end) held out for validation.
    pub val_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            arm: ArmConfig::default(),
            render: RenderConfig::default(),
            trials: 2000,
            steps: 30,
            segment_len: 10,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format: String,
    pub trials: usize,
    pub steps: usize,
    pub records: usize,
    pub seed: u64,
    pub dtype: String,
    /// Field name and width of each record, in file order.
    pub layout: Vec<(String, usize)>,
    pub image_size: usize,
    pub action_dim: usize,
    pub proprio_noise: f64,
    pub depth_noise: f64,
    pub sim: SimConfig,
}

impl DatasetManifest {
    pub fn record_len(&self) -> usize {
        self.layout.iter().map(|(_, n)| n).sum()
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Generated {
        mixing: Mixing,
        states: Vec<Vec<ArmState>>,
        actions: Vec<Vec<Vec<f64>>>,
    },
    Loaded {
        data: Vec<f32>,
    },
}

/// Trials of `(pose, action, bundle)` records. Record `t` of a trial holds the
/// action that drove the arm from step `t − 1` into the state at step `t`.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub manifest: DatasetManifest,
    storage: Storage,
}

fn layout(cfg: &SimConfig) -> Vec<(String, usize)> {
    let px = cfg.render.image_size * cfg.render.image_size;
    vec![
        ("state".into(), STATE_DIM),
        ("action".into(), cfg.arm.action_dim),
        ("proprio".into(), PROPRIO_DIM),
        ("depth".into(), px),
        ("rgb".into(), 3 * px),
    ]
}

fn sample_action(mixing: &Mixing, action_dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let jitter = Normal::new(0.0, 0.05).expect("valid normal");
    let mut a: Vec<f64> = (0..action_dim).map(|_| rng.random()).collect();
    for (ago, anta) in &mixing.groups {
        let (pa, pb): (f64, f64) = (rng.random(), rng.random());
        for &i in ago {
            a[i] = (pa + jitter.sample(rng)).clamp(0.0, 1.0);
        }
        for &i in anta {
            a[i] = (pb + jitter.sample(rng)).clamp(0.0, 1.0);
        }
    }
    a
}

/// Generate a dataset in memory. Images are rendered lazily on access, so
/// memory stays proportional to the number of states.
pub fn generate_dataset(cfg: &SimConfig, seed: u64) -> Result<TrajectoryDataset> {
    if cfg.trials == 0 || cfg.steps == 0 || cfg.segment_len == 0 {
        return Err(Error::Invalid("trials, steps and segment_len must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::Invalid(format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    let mixing = Mixing::new(&cfg.arm)?;
    let root = RngStream(seed);
    let mut states = Vec::with_capacity(cfg.trials);
    let mut actions = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = root.named("trial").child(trial as u64).rng();
        let start_action = sample_action(&mixing, cfg.arm.action_dim, &mut rng);
        let drive = mixing.drive(&start_action);
        let mut angles = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            angles[j] = drive[j] / cfg.arm.damping;
        }
        let mut s = ArmState::at_rest(angles);
        let mut trial_states = Vec::with_capacity(cfg.steps);
        let mut trial_actions = Vec::with_capacity(cfg.steps);
        let mut a = start_action;
        for t in 0..cfg.steps {
            if t % cfg.segment_len == 0 {
                a = sample_action(&mixing, cfg.arm.action_dim, &mut rng);
            }
            s = step_dynamics(&cfg.arm, &mixing, &s, &a);
            trial_states.push(s);
            trial_actions.push(a.clone());
        }
        states.push(trial_states);
        actions.push(trial_actions);
    }
    let manifest = DatasetManifest {
        format: "mdf-trajectories-v1".into(),
        trials: cfg.trials,
        steps: cfg.steps,
        records: cfg.trials * cfg.steps,
        seed,
        dtype: "f32-le".into(),
        layout: layout(cfg),
        image_size: cfg.render.image_size,
        action_dim: cfg.arm.action_dim,
        proprio_noise: cfg.render.proprio_noise,
        depth_noise: cfg.render.depth_noise,
        sim: cfg.clone(),
    };
    Ok(TrajectoryDataset {
        manifest,
        storage: Storage::Generated {
            mixing,
            states,
            actions,
        },
    })
}

impl TrajectoryDataset {
    pub fn num_trials(&self) -> usize {
        self.manifest.trials
    }

    pub fn steps(&self) -> usize {
        self.manifest.steps
    }

    pub fn sim(&self) -> &SimConfig {
        &self.manifest.sim
    }

    pub fn train_trials(&self) -> Range<usize> {
        0..self.num_trials() - self.num_val()
    }

    pub fn val_trials(&self) -> Range<usize> {
        self.num_trials() - self.num_val()..self.num_trials()
    }

    fn num_val(&self) -> usize {
        let n = (self.num_trials() as f64 * self.manifest.sim.val_fraction).round() as usize;
        n.clamp(usize::from(self.num_trials() > 1), self.num_trials().saturating_sub(1))
    }

    /// Validation trials of fold `k` when the set is split into `folds` equal
    /// contiguous blocks.
    pub fn fold_trials(&self, k: usize, folds: usize) -> Range<usize> {
        let n = self.num_trials();
        (k * n / folds)..((k + 1) * n / folds)
    }

    fn check(&self, trial: usize, t: usize) -> Result<()> {
        if trial >= self.num_trials() || t >= self.steps() {
            return Err(Error::Invalid(format!(
                "record ({trial}, {t}) outside {}x{}",
                self.num_trials(),
                self.steps()
            )));
        }
        Ok(())
    }

    fn record(&self, trial: usize, t: usize) -> Range<usize> {
        let len = self.manifest.record_len();
        let start = (trial * self.steps() + t) * len;
        start..start + len
    }

    fn field(&self, name: &str) -> (usize, usize) {
        let mut off = 0;
        for (n, w) in &self.manifest.layout {
            if n == name {
                return (off, *w);
            }
            off += w;
        }
        unreachable!("layout always has {name}")
    }

    fn loaded_field(&self, data: &[f32], trial: usize, t: usize, name: &str) -> Vec<f64> {
        let r = self.record(trial, t);
        let (off, w) = self.field(name);
        data[r.start + off..r.start + off + w].iter().map(|&v| v as f64).collect()
    }

    /// Ground-truth 7-d pose.
    pub fn pose(&self, trial: usize, t: usize) -> Result<[f64; STATE_DIM]> {
        self.check(trial, t)?;
        Ok(match &self.storage {
            Storage::Generated { states, .. } => forward_kinematics(&self.manifest.sim.arm, &states[trial][t].angles),
            Storage::Loaded { data } => {
                let v = self.loaded_field(data, trial, t, "state");
                let mut out = [0.0; STATE_DIM];
                out.copy_from_slice(&v);
                out
            }
        })
    }

    pub fn action(&self, trial: usize, t: usize) -> Result<Vec<f64>> {
        self.check(trial, t)?;
        Ok(match &self.storage {
            Storage::Generated { actions, .. } => actions[trial][t].clone(),
            Storage::Loaded { data } => self.loaded_field(data, trial, t, "action"),
        })
    }

    /// Joint state, only known for generated datasets.
    pub fn arm_state(&self, trial: usize, t: usize) -> Option<ArmState> {
        match &self.storage {
            Storage::Generated { states, .. } => states.get(trial).and_then(|s| s.get(t)).copied(),
            Storage::Loaded { .. } => None,
        }
    }

    pub fn mixing(&self) -> Option<&Mixing> {
        match &self.storage {
            Storage::Generated { mixing, .. } => Some(mixing),
            Storage::Loaded { .. } => None,
        }
    }

    pub fn bundle(&self, trial: usize, t: usize) -> Result<ModalityBundle> {
        self.check(trial, t)?;
        let px = self.manifest.image_size * self.manifest.image_size;
        Ok(match &self.storage {
            Storage::Generated { states, .. } => {
                let noise = RngStream(self.manifest.seed)
                    .named("noise")
                    .child(trial as u64)
                    .child(t as u64);
                render_bundle(&self.manifest.sim.arm, &self.manifest.sim.render, &states[trial][t], noise)
            }
            Storage::Loaded { data } => ModalityBundle {
                rgb: Tensor::from_vec(3, px, self.loaded_field(data, trial, t, "rgb")),
                depth: Tensor::from_vec(1, px, self.loaded_field(data, trial, t, "depth")),
                proprio: Tensor::column(self.loaded_field(data, trial, t, "proprio")),
                available: [true; 3],
            },
        })
    }

    /// Write `manifest.json` followed by the record blob.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(TRIALS_FILE);
        let file = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut w = BufWriter::new(file);
        for trial in 0..self.num_trials() {
            for t in 0..self.steps() {
                let b = self.bundle(trial, t)?;
                let pose = self.pose(trial, t)?;
                let action = self.action(trial, t)?;
                let fields: [&[f64]; 5] = [&pose, &action, b.proprio.data(), b.depth.data(), b.rgb.data()];
                for f in fields {
                    for &v in f {
                        w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(&bpath, e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&text)?;
        let bpath = dir.join(TRIALS_FILE);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let expected = manifest.records * manifest.record_len() * 4;
        if bytes.len() != expected || manifest.records != manifest.trials * manifest.steps {
            return Err(Error::Format(format!(
                "{}: {} bytes, manifest implies {}",
                bpath.display(),
                bytes.len(),
                expected
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(TrajectoryDataset {
            manifest,
            storage: Storage::Loaded { data },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize, steps: usize) -> SimConfig {
        SimConfig {
            trials,
            steps,
            segment_len: 3,
            ..SimConfig::default()
        }
    }

    #[test]
    fn record_count() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(2, 5), 1).unwrap();
        ds.write(dir.path()).unwrap();
        let back = TrajectoryDataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest.records, 10);
        let bytes = std::fs::metadata(dir.path().join(TRIALS_FILE)).unwrap().len() as usize;
        assert_eq!(bytes, 10 * back.manifest.record_len() * 4);
        assert_eq!(back.manifest.record_len(), 7 + 40 + 30 + 1024 + 3072);
        let p = ds.pose(1, 4).unwrap();
        let q = back.pose(1, 4).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(back.bundle(0, 2).unwrap().rgb.len(), 3072);
    }

    #[test]
    fn same_seed_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&small(3, 4), 77).unwrap().write(d1.path()).unwrap();
        generate_dataset(&small(3, 4), 77).unwrap().write(d2.path()).unwrap();
        for f in [MANIFEST_FILE, TRIALS_FILE] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn angle_marginals_cover_reachable_range() {
        let cfg = small(500, 30);
        let ds = generate_dataset(&cfg, 3).unwrap();
        const BINS: usize = 20;
        for j in 0..NUM_JOINTS {
            let lim = cfg.arm.joint_limits[j];
            let mut hist = [0usize; BINS];
            for trial in 0..cfg.trials {
                for t in 0..cfg.steps {
                    let a = ds.arm_state(trial, t).unwrap().angles[j];
                    let b = (((a + lim) / (2.0 * lim)) * BINS as f64).floor() as isize;
                    hist[b.clamp(0, BINS as isize - 1) as usize] += 1;
                }
            }
            let covered = hist.iter().filter(|&&c| c > 0).count();
            assert!(covered as f64 >= 0.8 * BINS as f64, "joint {j}: {hist:?}");
        }
    }

    #[test]
    fn poses_match_kinematics() {
        let ds = generate_dataset(&small(2, 6), 4).unwrap();
        for t in 0..6 {
            let s = ds.arm_state(1, t).unwrap();
            let p = forward_kinematics(&ds.sim().arm, &s.angles);
            assert_eq!(p, ds.pose(1, t).unwrap());
        }
    }

    #[test]
    fn validation_split_is_the_tail() {
        let ds = generate_dataset(&small(20, 2), 4).unwrap();
        assert_eq!(ds.train_trials(), 0..18);
        assert_eq!(ds.val_trials(), 18..20);
    }
}
