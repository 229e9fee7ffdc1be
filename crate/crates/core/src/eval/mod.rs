//! Experiment harness: error metrics, modality ablations, attention
//! reports, concept drift and latency benchmarks.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, Method};
use crate::filters::{AmdfFilter, AttentionGainMask, FilterDiagnostics, SOURCE_NAMES};
use crate::rng::RngStream;
use crate::sim::render::{apply_drift, background, ModalityBundle};
use crate::sim::{TrajectoryDataset, STATE_DIM};

mod stats;

pub use stats::{mean_se, median, spearman};

/// Euclidean end-effector position error.
pub fn ee_error(est: &[f64; STATE_DIM], truth: &[f64; STATE_DIM]) -> f64 {
    (0..3).map(|i| (est[i] - truth[i]).powi(2)).sum::<f64>().sqrt()
}

/// Mean absolute quaternion component error after flipping the ground truth
/// onto the estimate's hemisphere.
pub fn quat_error(est: &[f64; STATE_DIM], truth: &[f64; STATE_DIM]) -> f64 {
    let dot: f64 = (3..7).map(|i| est[i] * truth[i]).sum();
    let s = if dot < 0.0 { -1.0 } else { 1.0 };
    (3..7).map(|i| (est[i] - s * truth[i]).abs()).sum::<f64>() / 4.0
}

/// Errors of one rollout over steps `1..`; the first step is skipped because
/// the Kalman-type baselines start from the true pose.
pub fn rollout_errors(estimates: &[[f64; STATE_DIM]], truth: &[[f64; STATE_DIM]]) -> (f64, f64, usize) {
    let mut ee = 0.0;
    let mut q = 0.0;
    let n = estimates.len().min(truth.len());
    for t in 1..n {
        ee += ee_error(&estimates[t], &truth[t]);
        q += quat_error(&estimates[t], &truth[t]);
    }
    (ee, q, n.saturating_sub(1))
}

/// Mean ± standard error over seeds of the per-seed MAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeStats {
    pub ee_mae: f64,
    pub ee_se: Option<f64>,
    pub q_mae: f64,
    pub q_se: Option<f64>,
    /// `(ee, q)` per seed.
    pub per_seed: Vec<(f64, f64)>,
}

pub fn dataset_bundles(ds: &TrajectoryDataset, trial: usize) -> Result<Vec<ModalityBundle>> {
    (0..ds.steps()).map(|t| ds.bundle(trial, t)).collect()
}

fn truth(ds: &TrajectoryDataset, trial: usize) -> Result<Vec<[f64; STATE_DIM]>> {
    (0..ds.steps()).map(|t| ds.pose(trial, t)).collect()
}

pub fn eval_stream(seed: u64, trial: usize) -> RngStream {
    RngStream(seed).named("eval").child(trial as u64)
}

/// Roll `est` over `trials` for every seed with bundles produced by
/// `bundles(trial)`.
pub fn evaluate_with(
    est: &Estimator,
    store: &ParameterStore,
    ds: &TrajectoryDataset,
    trials: &[usize],
    mask: &AttentionGainMask,
    seeds: &[u64],
    bundles: &dyn Fn(usize) -> Result<Vec<ModalityBundle>>,
) -> Result<MaeStats> {
    est.check_mask(mask)?;
    if trials.is_empty() || seeds.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one trial and one seed".into()));
    }
    let masks = vec![*mask; ds.steps()];
    let mut cache = BTreeMap::new();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (mut ee, mut q, mut n) = (0.0, 0.0, 0);
        for &trial in trials {
            if let Entry::Vacant(e) = cache.entry(trial) {
                e.insert((bundles(trial)?, truth(ds, trial)?));
            }
            let (b, gt) = &cache[&trial];
            let r = est.rollout(store, ds, trial, b, &masks, eval_stream(seed, trial))?;
            let (e, qq, k) = rollout_errors(&r.estimates, gt);
            ee += e;
            q += qq;
            n += k;
        }
        let n = n.max(1) as f64;
        per_seed.push((ee / n, q / n));
    }
    let (ee_mae, ee_se) = mean_se(&per_seed.iter().map(|p| p.0).collect::<Vec<_>>());
    let (q_mae, q_se) = mean_se(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(MaeStats {
        ee_mae,
        ee_se,
        q_mae,
        q_se,
        per_seed,
    })
}

pub fn evaluate_trials(
    est: &Estimator,
    store: &ParameterStore,
    ds: &TrajectoryDataset,
    trials: &[usize],
    mask: &AttentionGainMask,
    seeds: &[u64],
) -> Result<MaeStats> {
    evaluate_with(est, store, ds, trials, mask, seeds, &|trial| dataset_bundles(ds, trial))
}

/// Held-out trials of a dataset, optionally truncated.
pub fn held_out(ds: &TrajectoryDataset, limit: Option<usize>) -> Vec<usize> {
    let v: Vec<usize> = ds.val_trials().collect();
    match limit {
        Some(n) => v.into_iter().take(n).collect(),
        None => v,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub method: Method,
    pub modalities: String,
    pub trials: usize,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub stats: MaeStats,
}

pub fn evaluate(
    est: &Estimator,
    store: &ParameterStore,
    ds: &TrajectoryDataset,
    mask: &AttentionGainMask,
    trials: &[usize],
    seeds: &[u64],
) -> Result<MaeReport> {
    let stats = evaluate_trials(est, store, ds, trials, mask, seeds)?;
    Ok(MaeReport {
        method: est.method(),
        modalities: mask.label(),
        trials: trials.len(),
        seeds: seeds.to_vec(),
        stats,
    })
}

fn fmt_se(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |s| format!("{s:.4}"))
}

pub fn mae_markdown(title: &str, rows: &[MaeReport]) -> String {
    let mut s = format!("# {title}\n\n| method | modalities | EE MAE (m) | ± se | q MAE | ± se |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {} | {:.4} | {} |",
            r.method,
            r.modalities,
            r.stats.ee_mae,
            fmt_se(r.stats.ee_se),
            r.stats.q_mae,
            fmt_se(r.stats.q_se)
        );
    }
    let _ = writeln!(s, "\nMeans ± standard errors over {} seed(s).", rows.first().map_or(0, |r| r.seeds.len()));
    s
}

/// One evaluation per non-empty modality subset the method supports.
pub fn ablate(est: &Estimator, store: &ParameterStore, ds: &TrajectoryDataset, trials: &[usize], seeds: &[u64]) -> Result<Vec<MaeReport>> {
    AttentionGainMask::subsets()
        .iter()
        .filter(|m| est.check_mask(m).is_ok())
        .map(|m| evaluate(est, store, ds, m, trials, seeds))
        .collect()
}

/// Per-step attention masses of the attention-gain filter under a mask
/// schedule (`schedule[t]` for step `t`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionReport {
    pub trials: Vec<usize>,
    pub schedule: Vec<String>,
    /// Mean mass per source at each step, averaged over trials.
    pub mean_mass: Vec<BTreeMap<String, f64>>,
    pub ee_mae: f64,
    pub diagnostics: Vec<Vec<FilterDiagnostics>>,
}

pub fn attention_report(
    est: &Estimator,
    store: &ParameterStore,
    ds: &TrajectoryDataset,
    trials: &[usize],
    schedule: &[AttentionGainMask],
    seed: u64,
) -> Result<AttentionReport> {
    if !matches!(est, Estimator::Amdf(_)) {
        return Err(Error::Invalid("attention reports need an attention-gain filter checkpoint".into()));
    }
    if schedule.len() != ds.steps() {
        return Err(Error::Invalid(format!("schedule has {} entries for {} steps", schedule.len(), ds.steps())));
    }
    if schedule[0].modalities().is_empty() {
        return Err(Error::Invalid("the first step needs at least one modality".into()));
    }
    let mut diagnostics = Vec::new();
    let (mut ee, mut n) = (0.0, 0);
    for &trial in trials {
        let r = est.rollout(store, ds, trial, &dataset_bundles(ds, trial)?, schedule, eval_stream(seed, trial))?;
        let (e, _, k) = rollout_errors(&r.estimates, &truth(ds, trial)?);
        ee += e;
        n += k;
        diagnostics.push(r.diagnostics);
    }
    let mut mean_mass = Vec::new();
    for t in 0..ds.steps() {
        let mut m = BTreeMap::new();
        for name in SOURCE_NAMES {
            let v: f64 = diagnostics.iter().map(|d| d[t].mass[name]).sum::<f64>() / diagnostics.len() as f64;
            m.insert(name.to_string(), v);
        }
        mean_mass.push(m);
    }
    Ok(AttentionReport {
        trials: trials.to_vec(),
        schedule: schedule.iter().map(|m| m.label()).collect(),
        mean_mass,
        ee_mae: ee / n.max(1) as f64,
        diagnostics,
    })
}

/// Parse a schedule such as `0:all,15:depth+proprio` into one mask per step.
pub fn parse_schedule(spec: &str, steps: usize) -> Result<Vec<AttentionGainMask>> {
    let mut points = Vec::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (t, label) = part
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("schedule entry `{part}` is not `step:modalities`")))?;
        let t: usize = t.trim().parse().map_err(|_| Error::Invalid(format!("bad step in `{part}`")))?;
        points.push((t, AttentionGainMask::parse(label)?));
    }
    points.sort_by_key(|p| p.0);
    if points.first().map(|p| p.0) != Some(0) {
        return Err(Error::Invalid("schedule must start at step 0".into()));
    }
    let mut out = Vec::with_capacity(steps);
    let mut k = 0;
    for t in 0..steps {
        while k + 1 < points.len() && points[k + 1].0 <= t {
            k += 1;
        }
        out.push(points[k].1);
    }
    Ok(out)
}

pub fn attention_markdown(r: &AttentionReport) -> String {
    let mut s = String::from("# Attention mass per source\n\n| t | modalities |");
    for n in SOURCE_NAMES {
        let _ = write!(s, " {n} |");
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(SOURCE_NAMES.len()));
    s.push('\n');
    for (t, m) in r.mean_mass.iter().enumerate() {
        let _ = write!(s, "| {t} | {} |", r.schedule[t]);
        for n in SOURCE_NAMES {
            let _ = write!(s, " {:.4} |", m[n]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\nEE MAE over the schedule: {:.4} m ({} trials).", r.ee_mae, r.trials.len());
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftPoint {
    pub lambda: f64,
    #[serde(flatten)]
    pub stats: MaeStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftCurve {
    pub background_seed: u64,
    pub modalities: String,
    pub points: Vec<DriftPoint>,
    /// Rank correlation between the blend level and the seed-averaged EE MAE.
    pub spearman: f64,
}

pub const DEFAULT_DRIFT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[allow(clippy::too_many_arguments)]
pub fn drift(
    est: &Estimator,
    store: &ParameterStore,
    ds: &TrajectoryDataset,
    trials: &[usize],
    mask: &AttentionGainMask,
    grid: &[f64],
    background_seed: u64,
    seeds: &[u64],
) -> Result<DriftCurve> {
    if !mask.is_enabled(crate::sim::Modality::Rgb) {
        return Err(Error::Invalid("drift needs the rgb modality enabled".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) || grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Invalid("blend grid must be sorted and inside [0, 1]".into()));
    }
    let bg = background(ds.manifest.image_size, background_seed);
    let mut points = Vec::new();
    for &lambda in grid {
        let stats = evaluate_with(est, store, ds, trials, mask, seeds, &|trial| {
            let mut b = dataset_bundles(ds, trial)?;
            for x in &mut b {
                x.rgb = apply_drift(&x.rgb, &bg, lambda)?;
            }
            Ok(b)
        })?;
        points.push(DriftPoint { lambda, stats });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.stats.ee_mae).collect();
    Ok(DriftCurve {
        background_seed,
        modalities: mask.label(),
        spearman: spearman(&xs, &ys),
        points,
    })
}

pub fn drift_markdown(c: &DriftCurve) -> String {
    let mut s = format!("# Concept drift ({})\n\n| λ | EE MAE (m) | ± se | q MAE |\n|---|---|---|---|\n", c.modalities);
    for p in &c.points {
        let _ = writeln!(s, "| {:.2} | {:.4} | {} | {:.4} |", p.lambda, p.stats.ee_mae, fmt_se(p.stats.ee_se), p.stats.q_mae);
    }
    let _ = writeln!(s, "\nSpearman ρ(λ, EE MAE) = {:.3}; background seed {}.", c.spearman, c.background_seed);
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub modalities: String,
    pub steps: usize,
    pub reps: usize,
    /// Median over repetitions of the mean per-step latency, seconds.
    pub median: f64,
    pub stderr: Option<f64>,
    pub samples: Vec<f64>,
}

/// Mean wall-clock seconds per filter step over `steps` steps, starting a
/// new trial whenever one runs out. Initialization is not timed.
pub fn time_steps(est: &Estimator, store: &ParameterStore, ds: &TrajectoryDataset, trials: &[usize], mask: &AttentionGainMask, steps: usize, seed: u64) -> Result<f64> {
    est.check_mask(mask)?;
    if trials.is_empty() || ds.steps() < 2 {
        return Err(Error::Invalid("benchmark needs at least one trial of two or more steps".into()));
    }
    let mut elapsed = 0.0;
    let mut done = 0;
    let masks = vec![*mask; ds.steps()];
    'outer: for k in 0.. {
        let trial = trials[k % trials.len()];
        let bundles = dataset_bundles(ds, trial)?;
        match est {
            Estimator::Amdf(model) => {
                let (mut f, _) = AmdfFilter::initialize(model, store, &bundles[0], mask, eval_stream(seed, trial))?;
                for (t, b) in bundles.iter().enumerate().skip(1) {
                    let action = ds.action(trial, t)?;
                    let start = Instant::now();
                    f.step(&action, b, mask)?;
                    elapsed += start.elapsed().as_secs_f64();
                    done += 1;
                    if done == steps {
                        break 'outer;
                    }
                }
            }
            _ => {
                // whole-rollout timing divided by its steps
                let n = (ds.steps() - 1).min(steps - done);
                let start = Instant::now();
                est.rollout(store, ds, trial, &bundles[..=n], &masks[..=n], eval_stream(seed, trial))?;
                elapsed += start.elapsed().as_secs_f64();
                done += n;
                if done >= steps {
                    break 'outer;
                }
            }
        }
    }
    Ok(elapsed / done as f64)
}

pub fn bench(
    est: &Estimator,
    store: &ParameterStore,
    ds: &TrajectoryDataset,
    trials: &[usize],
    mask: &AttentionGainMask,
    steps: usize,
    reps: usize,
) -> Result<BenchRow> {
    if steps == 0 || reps == 0 {
        return Err(Error::Invalid("bench needs at least one step and one repetition".into()));
    }
    // warm-up
    time_steps(est, store, ds, trials, mask, 1, 0)?;
    let samples = (0..reps)
        .map(|r| time_steps(est, store, ds, trials, mask, steps, r as u64))
        .collect::<Result<Vec<_>>>()?;
    let (_, se) = mean_se(&samples);
    Ok(BenchRow {
        method: est.method(),
        modalities: mask.label(),
        steps,
        reps,
        median: median(&samples),
        stderr: se,
        samples,
    })
}

pub fn bench_markdown(rows: &[BenchRow]) -> String {
    let mut s = String::from("# Per-step latency\n\n| method | modalities | steps | reps | median (s) | ± se |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {} | {} | {:.6} | {} |", r.method, r.modalities, r.steps, r.reps, r.median, r.stderr.map_or("n/a".into(), |v| format!("{v:.6}")));
    }
    s
}
