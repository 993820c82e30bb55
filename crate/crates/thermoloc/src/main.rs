use std::path::PathBuf;

use clap::{Parser, Subcommand};

use thermoloc::data::{
    default_split, load_dataset, synth_scene_generate, write_metrics_report, write_sequence,
    Sequence,
};
use thermoloc::error::{Error, Result};
use thermoloc::harness::{ablate, bridge_grid, depth_grid, evaluate, train, TrainConfig};
use thermoloc::model::shape_trace;
use thermoloc::preproc::preprocess;

#[derive(Parser)]
#[command(name = "thermoloc", version, about = "Thermal-image absolute pose regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance every frame of a dataset, preserving its layout.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional TOML config; its [preproc] table supplies the parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Contrast gain override.
        #[arg(long)]
        a: Option<f64>,
        /// Brightness offset override.
        #[arg(long)]
        b: Option<f64>,
        /// Sharpening intensity override.
        #[arg(long)]
        h: Option<f64>,
        /// Gaussian standard deviation override.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train on the per-scene training split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the extractor shape table for this config and dataset, then exit.
        #[arg(long)]
        describe: bool,
    },
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the depth and bridge ablation grids.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic pose-annotated scene.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per sequence.
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Sequences in the scene (the last becomes the default test split).
        #[arg(long, default_value_t = 3)]
        sequences: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

/// Held-out sequences if the split has any, otherwise everything.
fn eval_side(sequences: Vec<Sequence>) -> Vec<Sequence> {
    let all = sequences.clone();
    let split = default_split(sequences);
    if split.test.is_empty() {
        all
    } else {
        split.test
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            dataset,
            out,
            config,
            a,
            b,
            h,
            sigma,
        } => {
            let mut cfg = load_config(&config)?.preproc;
            if let Some(a) = a {
                cfg.a = a;
            }
            if let Some(b) = b {
                cfg.b = b;
            }
            if let Some(h) = h {
                cfg.h = h;
            }
            if let Some(sigma) = sigma {
                cfg.sigma = sigma;
            }
            cfg.validate()?;
            let sequences = load_dataset(&dataset)?;
            for seq in &sequences {
                let mut frames = Vec::with_capacity(seq.records.len());
                for rec in &seq.records {
                    frames.push((rec.timestamp, rec.pose, preprocess(&rec.load_frame()?, &cfg)?));
                }
                write_sequence(&out.join(&seq.scene).join(&seq.name), &frames)?;
            }
            println!("preprocessed {} sequences into {}", sequences.len(), out.display());
        }
        Command::Train {
            dataset,
            out,
            config,
            seed,
            describe,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let sequences = load_dataset(&dataset)?;
            if describe {
                let frame = sequences[0].records[0].load_frame()?;
                let trace = shape_trace(&cfg.model, frame.height(), frame.width())?;
                println!("{:<16} {:>8} {:>8} {:>8}", "layer", "channels", "height", "width");
                for e in trace {
                    println!("{:<16} {:>8} {:>8} {:>8}", e.name, e.channels, e.height, e.width);
                }
                return Ok(());
            }
            let split = default_split(sequences);
            let summary = train(&cfg, &split.train, &out)?;
            println!(
                "trained {} epochs, final loss {}, checkpoint at {}",
                summary.loss_curve.len(),
                summary.loss_curve.last().copied().unwrap_or(f64::NAN),
                summary.checkpoint_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let sequences = eval_side(load_dataset(&dataset)?);
            let report = evaluate(&checkpoint, &sequences, Some(&out.join("plots")))?;
            std::fs::create_dir_all(&out)?;
            write_metrics_report(&report, &out.join("metrics.csv"))?;
            let avg = report.average();
            println!(
                "average: median {} m / {} deg, mean {} m / {} deg",
                avg.median_pos_m, avg.median_rot_deg, avg.mean_pos_m, avg.mean_rot_deg
            );
        }
        Command::Ablate {
            dataset,
            out,
            config,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let split = default_split(load_dataset(&dataset)?);
            if split.test.is_empty() {
                return Err(Error::InvalidInput(
                    "ablation needs at least one scene with two or more sequences".into(),
                ));
            }
            for (name, grid) in [
                ("depth", depth_grid(&cfg, &[1, 2, 3, 4, 5, 6], true)),
                ("bridge", bridge_grid(&cfg)),
            ] {
                let rows = ablate(&grid, &split.train, &split.test, &out.join(name))?;
                println!("{name} grid:");
                for row in rows {
                    match (row.mean_pos_m, row.mean_rot_deg) {
                        (Some(p), Some(r)) => println!("  {:<14} {p:.4} m  {r:.4} deg", row.variant),
                        _ => println!(
                            "  {:<14} failed: {}",
                            row.variant,
                            row.error.as_deref().unwrap_or("unknown")
                        ),
                    }
                }
            }
        }
        Command::Synth {
            out,
            seed,
            frames,
            width,
            height,
            sequences,
        } => {
            if sequences == 0 {
                return Err(Error::InvalidInput("need at least one sequence".into()));
            }
            for s in 0..sequences {
                let scene = synth_scene_generate(seed.wrapping_add(s as u64), frames, (width, height))?;
                write_sequence(&out.join("scene").join(format!("s{}", s + 1)), &scene)?;
            }
            println!(
                "wrote {sequences} sequences of {frames} {width}x{height} frames to {}",
                out.display()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
