use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use objslot::checks;
use objslot::dataset::{make_split, write_dataset, Manifest, Split};
use objslot::segmentation::{evaluate_clip, export_masks, ClipReport};
use objslot::train::data::{load_entry, load_split};
use objslot::train::eval::{analyze_all, clip_masks};
use objslot::train::{Checkpoint, Trainer, TrainConfig};

#[derive(Parser)]
#[command(name = "objslot", version, about = "Object-centric video adaptation: train, evaluate, segment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes logs and a checkpoint to the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the run directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, zero-shot segmentation and state-change norms for one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Dataset manifest; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export slot masks of one clip as STF and PGM files.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the trainable blocks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Generate the synthetic action dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        clips: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<objslot::Error>() {
                Some(objslot::Error::NonFinite { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, out } => train(&config, out),
        Command::Eval { ckpt, split, data } => eval(&ckpt, split, data),
        Command::Segment { ckpt, clip, out, data } => segment(&ckpt, &clip, &out, data),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
        Command::GenData {
            out,
            clips,
            seed,
            classes,
            frames,
            canvas,
        } => {
            let manifest = make_split(clips, classes, seed, frames, (canvas, canvas))?;
            let path = write_dataset(&manifest, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "manifest": path,
                    "clips": manifest.clips.len(),
                    "train": manifest.split(Split::Train).len(),
                    "val": manifest.split(Split::Val).len(),
                })
            );
            Ok(())
        }
    }
}

fn jsonl(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn train(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    let run_dir = cfg.out.clone();
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let mut trainer = Trainer::from_config(cfg)?;
    log::info!(
        "{} train / {} val clips, {} steps",
        trainer.train.len(),
        trainer.val.len(),
        trainer.total_steps()
    );
    let mut log = jsonl(&run_dir.join("train_log.jsonl"))?;
    let mut eval_log = jsonl(&run_dir.join("eval_log.jsonl"))?;
    trainer.run(&mut log, Some(&mut eval_log))?;
    eval_log.flush()?;

    let ckpt_dir = run_dir.join("checkpoint");
    trainer.checkpoint().save(&ckpt_dir)?;
    let report = serde_json::json!({
        "step": trainer.step,
        "checkpoint": ckpt_dir,
        "train": trainer.evaluate(Split::Train)?,
        "val": trainer.evaluate(Split::Val)?,
    });
    fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "{}",
        serde_json::json!({
            "step": trainer.step,
            "train_accuracy": report["train"]["accuracy"],
            "val_accuracy": report["val"]["accuracy"],
            "run_dir": run_dir,
        })
    );
    Ok(())
}

fn manifest_path(ckpt: &Checkpoint, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| ckpt.config.data.clone())
}

fn eval(ckpt_dir: &Path, split: Split, data: Option<PathBuf>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let model = ckpt.model()?;
    let samples = load_split(manifest_path(&ckpt, data), split, &model)?;
    let report = objslot::train::eval::evaluate(&model, &samples, ckpt.config.baseline_samples, ckpt.config.seed)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn segment(ckpt_dir: &Path, clip: &str, out: &Path, data: Option<PathBuf>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(ckpt_dir)?;
    let model = ckpt.model()?;
    let path = manifest_path(&ckpt, data);
    let manifest = Manifest::load(&path)?;
    let entry = manifest
        .find(clip)
        .ok_or_else(|| objslot::Error::Contract(format!("clip '{clip}' is not in {}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new(""));
    let sample = load_entry(root, entry, &model)?;
    let analysis = analyze_all(&model, std::slice::from_ref(&sample))?.remove(0);
    let image = (manifest.canvas.0, manifest.canvas.1);
    let masks = clip_masks(&analysis, &sample, image)?;
    let files = export_masks(&masks, out, clip)?;
    let score = match &sample.gt_masks {
        Some(gt) => {
            let s = evaluate_clip(&masks, gt)?;
            (!s.empty_foreground).then(|| ClipReport::new(clip, &s))
        }
        None => None,
    };
    println!(
        "{}",
        serde_json::json!({
            "clip": clip,
            "predicted": analysis.predicted(),
            "label": sample.label,
            "files": files,
            "score": score,
        })
    );
    Ok(())
}

fn gradcheck(module: Option<&str>) -> anyhow::Result<()> {
    let results = checks::check_all(module)?;
    for r in &results {
        println!("{}", serde_json::to_string(r)?);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.module.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(objslot::Error::Contract(format!(
            "gradient check above tolerance {} for: {}",
            checks::TOL,
            failed.join(", ")
        ))))
    }
}
