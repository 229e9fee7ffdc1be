//! Training: losses, AdamW, the latent-space conditioning curriculum and
//! checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, ParameterStore, Tape};
use crate::blocks::ModelConfig;
use crate::error::{Error, Result};
use crate::estimator::{Architecture, Estimator, Method};
use crate::eval::{evaluate_trials, MaeStats};
use crate::filters::{AttentionGainMask, DekfConfig, DenkfConfig};
use crate::rng::RngStream;
use crate::sim::render::Modality;
use crate::sim::TrajectoryDataset;
use crate::tensor::Tensor;

mod losses;
mod optim;

pub use losses::{amdf_losses, compute_losses, dekf_losses, denkf_losses, encoder_losses, is_encoder_param, Batch, LossBreakdown, LossVars, Window};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};

pub const LOSS_LOG: &str = "loss.jsonl";
pub const PRETRAIN_LOG: &str = "pretrain.jsonl";
pub const VAL_LOG: &str = "val.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// One epoch draws one window from every training trial.
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Per-batch probability of dropping each modality.
    pub mask_prob: f64,
    /// Encoder-only steps run before end-to-end training (attention-gain
    /// filter only).
    pub pretrain_steps: usize,
    pub val_every: usize,
    /// Number of held-out trials rolled out at each validation.
    pub val_trials: usize,
    pub checkpoint_every: usize,
    /// With `folds > 1` the held-out trials are fold `fold` of `folds`;
    /// otherwise the last trials of the dataset.
    pub folds: usize,
    pub fold: usize,
    /// Start from these parameters where names match.
    pub init_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub denkf: DenkfConfig,
    pub dekf: DekfConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Amdf,
            seed: 0,
            lr: 1e-4,
            batch_size: 64,
            epochs: 1,
            max_steps: None,
            weight_decay: 1e-2,
            clip_norm: 5.0,
            mask_prob: 0.2,
            pretrain_steps: 0,
            val_every: 100,
            val_trials: 20,
            checkpoint_every: 0,
            folds: 1,
            fold: 0,
            init_checkpoint: None,
            model: ModelConfig::small(),
            denkf: DenkfConfig::default(),
            dekf: DekfConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and nonnegative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Invalid(format!("mask probability {} outside [0, 1]", self.mask_prob)));
        }
        if self.folds > 1 && self.fold >= self.folds {
            return Err(Error::Invalid(format!("fold {} of {}", self.fold, self.folds)));
        }
        self.model.validate()
    }

    pub fn arch(&self) -> Architecture {
        Architecture {
            amdf: self.model.clone(),
            denkf: self.denkf.clone(),
            dekf: self.dekf.clone(),
        }
    }

    /// Past posteriors a training window carries.
    pub fn history(&self) -> usize {
        match self.method {
            Method::Amdf => self.model.history,
            _ => 1,
        }
    }

    /// Training and held-out trial indices.
    pub fn split(&self, ds: &TrajectoryDataset) -> (Vec<usize>, Vec<usize>) {
        let held = if self.folds > 1 {
            ds.fold_trials(self.fold, self.folds)
        } else {
            ds.val_trials()
        };
        let train = (0..ds.num_trials()).filter(|t| !held.contains(t)).collect();
        (train, held.collect())
    }
}

/// Checkpoint metadata: enough to rebuild the estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: Method,
    pub arch: Architecture,
    pub step: usize,
}

pub fn write_checkpoint(dir: &Path, est: &Estimator, arch: &Architecture, store: &ParameterStore, seed: u64, step: usize) -> Result<()> {
    let meta = CheckpointMeta {
        method: est.method(),
        arch: arch.clone(),
        step,
    };
    save_checkpoint(dir, store, seed, serde_json::to_value(meta)?)
}

/// Rebuild an estimator and its parameters from a checkpoint directory.
pub fn read_checkpoint(dir: &Path) -> Result<(Estimator, ParameterStore, CheckpointMeta)> {
    let (store, manifest) = load_checkpoint(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
        .map_err(|e| Error::Format(format!("checkpoint metadata in {}: {e}", dir.display())))?;
    let est = Estimator::new(meta.method, &meta.arch)?;
    let fresh = est.init(0)?;
    for (name, p) in fresh.iter() {
        let got = store.value(name)?;
        if got.shape() != p.value.shape() {
            return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {:?}", got.shape(), p.value.shape())));
        }
    }
    Ok((est, store, meta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub ee_mae: f64,
    pub q_mae: f64,
}

#[derive(Debug, Clone)]
pub enum TrainEvent {
    Pretrain(StepRecord),
    Step(StepRecord),
    Validation(ValRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub steps: usize,
    pub pretrain_steps: usize,
    pub initial_val: Option<ValRecord>,
    pub final_val: Option<ValRecord>,
    pub checkpoint: PathBuf,
}

fn jsonl(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line(w: &mut BufWriter<File>, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Per-batch modality mask: each modality dropped independently.
pub fn sample_mask(p: f64, rng: &mut impl Rng) -> AttentionGainMask {
    let mut mask = AttentionGainMask::all();
    for m in Modality::ALL {
        mask.enabled[m.index()] = rng.random::<f64>() >= p;
    }
    mask
}

/// Batches for one epoch: shuffled training trials, chunked.
fn epoch_batches(train: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut RngStream(seed).named("epoch").child(epoch as u64).rng());
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Validation over the first `cfg.val_trials` held-out trials with every
/// modality enabled.
pub fn validate(est: &Estimator, store: &ParameterStore, ds: &TrajectoryDataset, cfg: &TrainConfig, step: usize) -> Result<ValRecord> {
    let (_, held) = cfg.split(ds);
    let trials: Vec<usize> = held.into_iter().take(cfg.val_trials.max(1)).collect();
    let stats: MaeStats = evaluate_trials(est, store, ds, &trials, &AttentionGainMask::all(), &[cfg.seed])?;
    Ok(ValRecord {
        step,
        ee_mae: stats.ee_mae,
        q_mae: stats.q_mae,
    })
}

fn non_finite(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::SingularInnovation => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// One forward/backward pass and optimizer update. Returns the loss before
/// the update.
#[allow(clippy::too_many_arguments)]
fn optimize_once(
    est: &Estimator,
    store: &mut ParameterStore,
    opt: &mut AdamW,
    batch: &Batch,
    stream: RngStream,
    clip: f64,
    step: usize,
    encoders_only: bool,
) -> Result<LossBreakdown> {
    store.zero_grad();
    let mut tape = Tape::new();
    let vars = match (est, encoders_only) {
        (Estimator::Amdf(m), true) => encoder_losses(m, &mut tape, store, batch, stream),
        _ => compute_losses(est, &mut tape, store, batch, stream),
    }
    .map_err(|e| non_finite(e, step))?;
    let loss = vars.values(&tape);
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    tape.backward(vars.total, &Tensor::filled(1, 1, 1.0), store)
        .map_err(|e| non_finite(e, step))?;
    let norm = clip_grad_norm(store, clip);
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    if encoders_only {
        opt.step(store, &is_encoder_param);
    } else {
        opt.step(store, &|_| true);
    }
    Ok(loss)
}

/// Encoder-only training on `L_s`; every other parameter is left untouched.
pub fn pretrain_encoders(
    cfg: &TrainConfig,
    est: &Estimator,
    store: &mut ParameterStore,
    ds: &TrajectoryDataset,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if !matches!(est, Estimator::Amdf(_)) {
        return Err(Error::Invalid("encoder pretraining applies to the attention-gain filter only".into()));
    }
    let (train, _) = cfg.split(ds);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let base = RngStream(cfg.seed).named("pretrain");
    let mut records = Vec::new();
    let mut epoch = 0;
    'outer: loop {
        for chunk in epoch_batches(&train, cfg.batch_size, cfg.seed ^ 0x9e37, epoch) {
            let step = records.len();
            if step >= cfg.pretrain_steps {
                break 'outer;
            }
            let mut rng = base.child(step as u64).rng();
            let mask = sample_mask(cfg.mask_prob, &mut rng);
            let batch = Batch::sample(ds, &chunk, cfg.history(), mask, &mut rng)?;
            let loss = optimize_once(est, store, &mut opt, &batch, base.named("noise").child(step as u64), cfg.clip_norm, step, true)?;
            let rec = StepRecord { step, loss };
            on_step(&rec);
            records.push(rec);
        }
        epoch += 1;
        if train.is_empty() {
            break;
        }
    }
    Ok(records)
}

/// Full training run. Writes the loss log, validation log, summary and
/// final checkpoint under `out`.
pub fn train(cfg: &TrainConfig, ds: &TrajectoryDataset, out: &Path) -> Result<TrainSummary> {
    train_with(cfg, ds, out, &mut |_| {})
}

pub fn train_with(cfg: &TrainConfig, ds: &TrajectoryDataset, out: &Path, on_event: &mut dyn FnMut(&TrainEvent)) -> Result<TrainSummary> {
    cfg.validate()?;
    if ds.manifest.action_dim != cfg.model.action_dim {
        return Err(Error::Invalid(format!(
            "dataset action width {} does not match the model's {}",
            ds.manifest.action_dim, cfg.model.action_dim
        )));
    }
    if ds.manifest.image_size != cfg.model.image_size && cfg.method == Method::Amdf {
        return Err(Error::Invalid(format!(
            "dataset images are {}px but the model expects {}px",
            ds.manifest.image_size, cfg.model.image_size
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let arch = cfg.arch();
    let est = Estimator::new(cfg.method, &arch)?;
    let mut store = est.init(cfg.seed)?;
    if let Some(path) = &cfg.init_checkpoint {
        let (init, _) = load_checkpoint(path)?;
        for (name, p) in init.iter() {
            if store.contains(name) {
                store.set_value(name, p.value.clone())?;
            }
        }
    }
    let ckpt = out.join(CHECKPOINT_DIR);

    let mut pretrain_steps = 0;
    if cfg.pretrain_steps > 0 && cfg.method == Method::Amdf {
        let path = out.join(PRETRAIN_LOG);
        let mut log = jsonl(&path)?;
        let mut err = Ok(());
        let recs = pretrain_encoders(cfg, &est, &mut store, ds, &mut |r| {
            if err.is_ok() {
                err = write_line(&mut log, &path, r);
            }
            on_event(&TrainEvent::Pretrain(r.clone()));
        });
        log.flush().map_err(|e| Error::io(&path, e))?;
        err?;
        pretrain_steps = recs?.len();
    }

    let (train, _) = cfg.split(ds);
    let spe = train.len().div_ceil(cfg.batch_size);
    let mut total = cfg.epochs * spe;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }

    let loss_path = out.join(LOSS_LOG);
    let val_path = out.join(VAL_LOG);
    let mut loss_log = jsonl(&loss_path)?;
    let mut val_log = jsonl(&val_path)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let base = RngStream(cfg.seed).named("train");

    let mut initial_val = None;
    let mut final_val = None;
    if cfg.val_every > 0 && total > 0 {
        let v = validate(&est, &store, ds, cfg, 0)?;
        write_line(&mut val_log, &val_path, &v)?;
        on_event(&TrainEvent::Validation(v.clone()));
        initial_val = Some(v);
    }

    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for chunk in epoch_batches(&train, cfg.batch_size, cfg.seed, epoch) {
            if step >= total {
                break 'epochs;
            }
            let mut rng = base.child(step as u64).rng();
            let mask = sample_mask(cfg.mask_prob, &mut rng);
            let batch = Batch::sample(ds, &chunk, cfg.history(), mask, &mut rng)?;
            let loss = match optimize_once(&est, &mut store, &mut opt, &batch, base.named("noise").child(step as u64), cfg.clip_norm, step, false) {
                Ok(l) => l,
                Err(e) => {
                    // store still holds the last parameters that produced a finite loss
                    loss_log.flush().map_err(|err| Error::io(&loss_path, err))?;
                    write_checkpoint(&ckpt, &est, &arch, &store, cfg.seed, step)?;
                    return Err(e);
                }
            };
            let rec = StepRecord { step, loss };
            write_line(&mut loss_log, &loss_path, &rec)?;
            on_event(&TrainEvent::Step(rec));
            step += 1;
            if cfg.val_every > 0 && (step % cfg.val_every == 0 || step == total) {
                let v = validate(&est, &store, ds, cfg, step)?;
                write_line(&mut val_log, &val_path, &v)?;
                on_event(&TrainEvent::Validation(v.clone()));
                final_val = Some(v);
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                write_checkpoint(&ckpt, &est, &arch, &store, cfg.seed, step)?;
            }
        }
    }
    loss_log.flush().map_err(|e| Error::io(&loss_path, e))?;
    val_log.flush().map_err(|e| Error::io(&val_path, e))?;
    write_checkpoint(&ckpt, &est, &arch, &store, cfg.seed, step)?;
    let summary = TrainSummary {
        method: cfg.method,
        steps: step,
        pretrain_steps,
        initial_val,
        final_val,
        checkpoint: ckpt,
    };
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
