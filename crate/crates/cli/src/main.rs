//! Command-line front end: scene generation, training, rendering,
//! extrapolation, evaluation and ablation runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pdsplat::evaluate::{evaluate_frames, split_frames, summarize, write_metrics_csv, write_plots, FrameMetrics, Split};
use pdsplat::gaussian::save_snapshot;
use pdsplat::render::save_png;
use pdsplat::scene::{center_error, generate_scene, Dataset, MotionKind, SceneSpec};
use pdsplat::trainer::{write_log_csv, Ablation, AblationAxis, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "pdsplat", version, about = "Gaussian particles with latent dynamics")]
struct Cli {
    /// JSON file with optional `scene` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scene sampling and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dynamic scene to a dataset directory.
    GenerateScene {
        #[arg(long)]
        kind: Option<MotionKind>,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
    /// Warm up and jointly train on the training split.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Render every camera of the dataset at one time.
    Render {
        #[command(flatten)]
        ck: CheckpointArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
    /// Roll the model forward past the training window.
    Extrapolate {
        #[command(flatten)]
        ck: CheckpointArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0.75)]
        from: f64,
        #[arg(long, default_value_t = 1.0)]
        to: f64,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value = "extrapolation")]
        out: PathBuf,
    },
    /// Per-frame metrics on both splits, plus plots.
    Evaluate {
        #[command(flatten)]
        ck: CheckpointArg,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train with an axis on and off from one shared warm-up and compare.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `generate-scene`.
    #[arg(long, default_value = "scene")]
    data: PathBuf,
}

#[derive(Args)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    scene: SceneSpec,
    train: TrainConfig,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            rc.train.seed = s;
        }
        rc.train.validate()?;
        Ok(rc)
    }
}

fn load_dataset(d: &DataArg) -> Result<Dataset> {
    Dataset::load(&d.data).with_context(|| format!("cannot load dataset {}", d.data.display()))
}

fn load_trainer(ck: &CheckpointArg) -> Result<Trainer> {
    if !ck.checkpoint.is_file() {
        bail!("checkpoint not found: {}", ck.checkpoint.display());
    }
    Trainer::load(&ck.checkpoint).with_context(|| format!("cannot read checkpoint {}", ck.checkpoint.display()))
}

fn frames_for(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<(usize, Split)>> {
    let thr = cfg.split_threshold.unwrap_or(ds.split_threshold);
    let rule = cfg.split_rule.unwrap_or(ds.split_rule);
    Ok(split_frames(ds, thr, rule)?)
}

fn train_indices(frames: &[(usize, Split)]) -> Vec<usize> {
    frames.iter().filter(|f| f.1 == Split::Train).map(|f| f.0).collect()
}

fn write_eval(trainer: &Trainer, ds: &Dataset, frames: &[(usize, Split)], out: &Path) -> Result<Vec<FrameMetrics>> {
    let rows = evaluate_frames(ds, frames, |cam, t| trainer.model.render(cam, t))?;
    write_metrics_csv(&rows, out.join("metrics.csv"))?;
    write_plots(&rows, out)?;
    for split in [Split::Train, Split::Extrapolation] {
        let s = summarize(&rows, split);
        println!(
            "{:<13} frames {:>4}  psnr {:>7.3}  ssim {:.4}  l1 {:.5}",
            split.name(),
            s.frames,
            s.psnr,
            s.ssim,
            s.l1
        );
    }
    Ok(rows)
}

fn train(rc: &RunConfig, data: &DataArg, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let frames = frames_for(&ds, &rc.train)?;
    let train = train_indices(&frames);
    std::fs::create_dir_all(out)?;
    let ck_path = out.join("checkpoint.bin");
    let every = rc.train.checkpoint_every;
    let mut trainer = Trainer::new(rc.train.clone(), &ds)?;
    trainer.run(&ds, &train, |t| {
        if every > 0 && t.step % every == 0 {
            t.save(&ck_path)?;
        }
        Ok(())
    })?;
    trainer.save(&ck_path)?;
    write_log_csv(&trainer.log, out.join("train_log.csv"))?;
    write_eval(&trainer, &ds, &frames, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate(rc: &RunConfig, axis: AblationAxis, data: &DataArg, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let frames = frames_for(&ds, &rc.train)?;
    let train = train_indices(&frames);
    std::fs::create_dir_all(out)?;
    let mut base = Trainer::new(rc.train.clone(), &ds)?;
    base.warmup(&ds, rc.train.warmup_steps)?;
    let mut csv = String::from("axis,arm,train_psnr,train_ssim,extrapolation_psnr,extrapolation_ssim,center_error_t0_9\n");
    for on in [true, false] {
        let arm = if on { "on" } else { "off" };
        let ab: Ablation = rc.train.ablation.with(axis, on);
        let mut t = base.fork(ab)?;
        t.run(&ds, &train, |_| Ok(()))?;
        let dir = out.join(arm);
        std::fs::create_dir_all(&dir)?;
        t.save(dir.join("checkpoint.bin"))?;
        println!("{} {arm}", axis.name());
        let rows = write_eval(&t, &ds, &frames, &dir)?;
        let (tr, ex) = (summarize(&rows, Split::Train), summarize(&rows, Split::Extrapolation));
        let ce = center_error(&ds.spec, &t.model.kernels.positions(), &t.model.kernels_at(0.9)?.positions(), 0.9)?;
        csv.push_str(&format!(
            "{},{arm},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            axis.name(),
            tr.psnr,
            tr.ssim,
            ex.psnr,
            ex.ssim,
            ce
        ));
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let rc = cli.run_config()?;
    match &cli.command {
        Command::GenerateScene { kind, out } => {
            let mut spec = rc.scene.clone();
            if let Some(k) = kind {
                spec.kind = *k;
            }
            let ds = generate_scene(&spec, rc.train.seed)?;
            ds.save(out).with_context(|| format!("cannot write dataset {}", out.display()))?;
            println!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::Train { data, out } => train(&rc, data, out)?,
        Command::Render { ck, data, t, out } => {
            let trainer = load_trainer(ck)?;
            let ds = load_dataset(data)?;
            std::fs::create_dir_all(out)?;
            let mut seen = std::collections::BTreeSet::new();
            for f in &ds.frames {
                if seen.insert(f.camera_index) {
                    let img = trainer.model.render(&f.camera, *t)?;
                    save_png(&img, out.join(format!("c{:02}_t{t:.3}.png", f.camera_index)))?;
                }
            }
            println!("rendered {} views to {}", seen.len(), out.display());
        }
        Command::Extrapolate {
            ck,
            data,
            from,
            to,
            steps,
            out,
        } => {
            if *steps < 1 || !(to >= from) {
                bail!("need --steps >= 1 and --to >= --from");
            }
            let trainer = load_trainer(ck)?;
            let ds = load_dataset(data)?;
            let cam = &ds.frames.first().context("dataset has no frames")?.camera;
            std::fs::create_dir_all(out)?;
            for i in 0..=*steps {
                let t = from + (to - from) * i as f64 / *steps as f64;
                save_png(&trainer.model.render(cam, t)?, out.join(format!("t{t:.3}.png")))?;
                save_snapshot(&trainer.model.particles_at(t)?, out.join(format!("particles_t{t:.3}.bin")))?;
            }
            println!("wrote {} time steps to {}", steps + 1, out.display());
        }
        Command::Evaluate { ck, data, out } => {
            let trainer = load_trainer(ck)?;
            let ds = load_dataset(data)?;
            let frames = frames_for(&ds, trainer.cfg())?;
            std::fs::create_dir_all(out)?;
            write_eval(&trainer, &ds, &frames, out)?;
        }
        Command::Ablate { axis, data, out } => ablate(&rc, *axis, data, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
