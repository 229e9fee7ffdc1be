use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mdf_core::eval::{self, BenchRow, MaeReport};
use mdf_core::filters::AttentionGainMask;
use mdf_core::sim::{generate_dataset, SimConfig, TrajectoryDataset};
use mdf_core::train::{self, read_checkpoint, TrainConfig, TrainEvent, CHECKPOINT_DIR};
use mdf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mdf", version, about = "Differentiable multimodal filtering on a synthetic arm")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trials and write manifest.json + trials.bin
    Gen {
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 30)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
    },
    /// Train one estimator from a TOML config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out MAE for one modality subset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        modalities: String,
    },
    /// Evaluate every non-empty modality subset
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Attention mass per source under a modality schedule
    Attn {
        #[command(flatten)]
        common: Common,
        /// `step:modalities` pairs, e.g. `0:all,15:depth+proprio`
        #[arg(long, default_value = "0:all")]
        schedule: String,
    },
    /// Error as the image background is blended in
    Drift {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_DRIFT_GRID)]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        background_seed: u64,
        #[arg(long, default_value = "all")]
        modalities: String,
    },
    /// Per-step latency with all modalities and with one
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Modality of the single-sensor row
        #[arg(long, default_value = "rgb")]
        single: String,
    },
}

#[derive(Args)]
struct Common {
    /// Training output directory or checkpoint directory; repeat to compare
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N held-out trials
    #[arg(long)]
    trials: Option<usize>,
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("checkpoint.json").exists() {
        p.to_path_buf()
    } else {
        p.join(CHECKPOINT_DIR)
    }
}

fn write_report(out: &Path, stem: &str, value: &impl Serialize, markdown: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(&json, e))?;
    let md = out.join(format!("{stem}.md"));
    fs::write(&md, markdown).map_err(|e| Error::io(&md, e))?;
    println!("{}", json.display());
    Ok(())
}

fn json_line(v: &impl Serialize) {
    if let Ok(s) = serde_json::to_string(v) {
        eprintln!("{s}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Gen { trials, steps, seed, out, image_size, val_fraction } => {
            let mut sim = SimConfig { trials, steps, val_fraction, ..SimConfig::default() };
            sim.render.image_size = image_size;
            generate_dataset(&sim, seed)?.write(&out)?;
            println!("{}", out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = TrajectoryDataset::load(&data)?;
            let summary = train::train_with(&cfg, &ds, &out, &mut |e| match e {
                TrainEvent::Pretrain(r) => json_line(&serde_json::json!({"phase": "pretrain", "record": r})),
                TrainEvent::Step(r) => json_line(&serde_json::json!({"phase": "train", "record": r})),
                TrainEvent::Validation(v) => json_line(&serde_json::json!({"phase": "val", "record": v})),
            })?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Eval { common, modalities } => {
            let mask = AttentionGainMask::parse(&modalities)?;
            let ds = TrajectoryDataset::load(&common.data)?;
            let trials = eval::held_out(&ds, common.trials);
            let mut rows: Vec<MaeReport> = Vec::new();
            for ck in &common.checkpoint {
                let (est, store, _) = read_checkpoint(&checkpoint_dir(ck))?;
                rows.push(eval::evaluate(&est, &store, &ds, &mask, &trials, &common.seeds)?);
            }
            write_report(&common.out, "eval", &rows, &eval::mae_markdown("Held-out error", &rows))?;
        }
        Command::Ablate { common } => {
            let ds = TrajectoryDataset::load(&common.data)?;
            let trials = eval::held_out(&ds, common.trials);
            let mut rows = Vec::new();
            for ck in &common.checkpoint {
                let (est, store, _) = read_checkpoint(&checkpoint_dir(ck))?;
                rows.extend(eval::ablate(&est, &store, &ds, &trials, &common.seeds)?);
            }
            write_report(&common.out, "ablation", &rows, &eval::mae_markdown("Modality ablation", &rows))?;
        }
        Command::Attn { common, schedule } => {
            let ds = TrajectoryDataset::load(&common.data)?;
            let trials = eval::held_out(&ds, common.trials);
            let sched = eval::parse_schedule(&schedule, ds.steps())?;
            let (est, store, _) = read_checkpoint(&checkpoint_dir(single(&common.checkpoint)?))?;
            let seed = common.seeds.first().copied().unwrap_or(0);
            let r = eval::attention_report(&est, &store, &ds, &trials, &sched, seed)?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            let mut lines = String::new();
            for (trial, diags) in r.trials.iter().zip(&r.diagnostics) {
                for d in diags {
                    lines.push_str(&serde_json::to_string(&serde_json::json!({"trial": trial, "diagnostics": d}))?);
                    lines.push('\n');
                }
            }
            let path = common.out.join("attention.jsonl");
            fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
            write_report(&common.out, "attention", &r, &eval::attention_markdown(&r))?;
        }
        Command::Drift { common, lambdas, background_seed, modalities } => {
            let mask = AttentionGainMask::parse(&modalities)?;
            let ds = TrajectoryDataset::load(&common.data)?;
            let trials = eval::held_out(&ds, common.trials);
            let (est, store, _) = read_checkpoint(&checkpoint_dir(single(&common.checkpoint)?))?;
            let c = eval::drift(&est, &store, &ds, &trials, &mask, &lambdas, background_seed, &common.seeds)?;
            write_report(&common.out, "drift", &c, &eval::drift_markdown(&c))?;
        }
        Command::Bench { common, steps, reps, single } => {
            let one = AttentionGainMask::parse(&single)?;
            let ds = TrajectoryDataset::load(&common.data)?;
            let trials = eval::held_out(&ds, common.trials);
            let mut rows: Vec<BenchRow> = Vec::new();
            for ck in &common.checkpoint {
                let (est, store, _) = read_checkpoint(&checkpoint_dir(ck))?;
                rows.push(eval::bench(&est, &store, &ds, &trials, &AttentionGainMask::all(), steps, reps)?);
                if est.check_mask(&one).is_ok() {
                    rows.push(eval::bench(&est, &store, &ds, &trials, &one, steps, reps)?);
                }
            }
            write_report(&common.out, "bench", &rows, &eval::bench_markdown(&rows))?;
        }
    }
    Ok(())
}

fn single(paths: &[PathBuf]) -> Result<&Path> {
    match paths {
        [p] => Ok(p),
        _ => Err(Error::Invalid("this command takes exactly one --checkpoint".into())),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
