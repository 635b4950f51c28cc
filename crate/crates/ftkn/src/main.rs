use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ftkn::config::{load, PipelineConfig, Preset};
use ftkn::experiments::{
    ablation_suite, bench_efficiency, evaluate_model, robustness_sweep, splits, AblationGroup, DROP_RATES,
};
use ftkn::io::{load_model, read_scene_dir, save_model, scene_file_name, scene_text, write_scene};
use ftkn::pipeline::{init_threads, PipelineOptions};
use ftkn::report::{metrics_text, write_csv, write_predictions, write_text, TaggedMetrics};
use ftkn::scene::{generate_split, Scene};
use ftkn::train::staged_train;
use ftkn_core::FasterModel;

#[derive(Parser)]
#[command(name = "ftkn", version, about = "Temporal proposal refinement on synthetic lidar scenes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON or TOML file with overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset; defaults to the file's `preset` key, then `desk`.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and eval splits as scene files.
    Generate {
        /// Also write a text export next to each scene.
        #[arg(long)]
        text: bool,
    },
    /// Staged training; writes model.ckpt, model.json and the loss curves.
    Train {
        /// Read training scenes from a directory instead of generating them.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Refine the eval split and write predictions.csv.
    Infer(ModelArgs),
    /// Refine the eval split and write predictions.csv and metrics.csv.
    Eval(ModelArgs),
    /// Attention cells, wall time and storage with and without scaling.
    Bench {
        /// Number of eval scenes to execute.
        #[arg(long, default_value_t = 2)]
        scenes: usize,
    },
    /// Train and evaluate ablation variants.
    Ablate {
        #[arg(long, value_enum, value_delimiter = ',')]
        groups: Vec<AblationGroup>,
    },
    /// Drop historical points or boxes at inference.
    Robust(ModelArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint stem (`<stem>.ckpt` + `<stem>.json`); a freshly
    /// initialised model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Read eval scenes from a directory instead of generating them.
    #[arg(long)]
    scenes: Option<PathBuf>,
}

fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = load(g.config.as_deref(), g.preset, Preset::Desk)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn model_for(args: &ModelArgs, cfg: &PipelineConfig) -> Result<FasterModel> {
    match &args.checkpoint {
        Some(stem) => Ok(load_model(stem).with_context(|| format!("loading {}", stem.display()))?),
        None => Ok(FasterModel::new(cfg.model.clone(), ftkn::seeds::derive(cfg.seed, "init", &[]))?),
    }
}

fn eval_scenes(dir: Option<&Path>, cfg: &PipelineConfig) -> Result<Vec<Scene>> {
    match dir {
        Some(d) => Ok(read_scene_dir(d)?),
        None => Ok(generate_split(&cfg.scene, cfg.seed, "eval", cfg.data.eval_scenes)),
    }
}

fn main() -> Result<()> {
    init_threads();
    let cli = Cli::parse();
    let mut cfg = config(&cli.global)?;
    let out = &cli.global.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Generate { text } => {
            let s = splits(&cfg);
            for (name, scenes) in [("train", &s.train), ("eval", &s.eval)] {
                let dir = out.join(name);
                fs::create_dir_all(&dir)?;
                for (i, scene) in scenes.iter().enumerate() {
                    let path = dir.join(scene_file_name(i));
                    write_scene(&path, scene)?;
                    if text {
                        fs::write(path.with_extension("txt"), scene_text(scene))?;
                    }
                }
            }
            write_text(&out.join("config.json"), &cfg.to_json())?;
            println!("wrote {} train and {} eval scenes to {}", s.train.len(), s.eval.len(), out.display());
        }
        Command::Train { scenes } => {
            let train = match scenes {
                Some(d) => read_scene_dir(&d)?,
                None => generate_split(&cfg.scene, cfg.seed, "train", cfg.data.train_scenes),
            };
            let (model, report) = staged_train(&train, &cfg, &mut |e| {
                println!("epoch {} ({:?}): mean loss {:.5}", e.epoch + 1, e.phase, e.mean_loss);
            })?;
            save_model(&out.join("model"), &model)?;
            write_csv(&out.join("train_steps.csv"), &report.steps)?;
            write_csv(&out.join("train_epochs.csv"), &report.epochs)?;
            write_text(&out.join("config.json"), &cfg.to_json())?;
            let summary = format!(
                "trained {} parameters on {} scenes, {} epochs, {} steps in {:.1} s\n",
                model.param_count(),
                train.len(),
                report.epochs.len(),
                report.steps.len(),
                report.wall_s
            );
            write_text(&out.join("train_summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Infer(args) => {
            let model = model_for(&args, &cfg)?;
            cfg.model = model.config.clone();
            let scenes = eval_scenes(args.scenes.as_deref(), &cfg)?;
            let (metrics, output) = evaluate_model(&model, &scenes, &cfg, PipelineOptions::default())?;
            write_predictions(&out.join("predictions.csv"), &output.rows)?;
            write_csv(&out.join("telemetry.csv"), &output.telemetry)?;
            let text = format!("{}wall time {:.1} ms\n", metrics_text(&metrics), output.wall_ms);
            write_text(&out.join("infer_summary.txt"), &text)?;
            print!("{text}");
        }
        Command::Eval(args) => {
            let model = model_for(&args, &cfg)?;
            cfg.model = model.config.clone();
            let scenes = eval_scenes(args.scenes.as_deref(), &cfg)?;
            let (metrics, output) = evaluate_model(&model, &scenes, &cfg, PipelineOptions::default())?;
            write_predictions(&out.join("predictions.csv"), &output.rows)?;
            write_csv(&out.join("metrics.csv"), std::slice::from_ref(&metrics))?;
            write_csv(&out.join("metrics_buckets.csv"), &metrics.buckets)?;
            let text = metrics_text(&metrics);
            write_text(&out.join("eval_summary.txt"), &text)?;
            print!("{text}");
        }
        Command::Bench { scenes } => {
            let eval = generate_split(&cfg.scene, cfg.seed, "eval", scenes);
            let report = bench_efficiency(&cfg, &eval)?;
            write_csv(&out.join("bench.csv"), &report.rows)?;
            let mut text = String::new();
            for r in &report.rows {
                text += &format!(
                    "{:<18} analytic cells {:>12}  measured {:>12}  wall {:>9.1} ms  peak points {}\n",
                    r.setting, r.analytic_cells, r.measured_cells, r.wall_ms, r.peak_points
                );
            }
            text += &format!(
                "full-scale cell ratio {:.2}  wall-time ratio {:.2}  storage ratio {:.2}\n",
                report.full_cell_ratio, report.wall_ratio, report.storage_ratio
            );
            write_text(&out.join("bench_summary.txt"), &text)?;
            print!("{text}");
        }
        Command::Ablate { groups } => {
            let groups = if groups.is_empty() { AblationGroup::ALL.to_vec() } else { groups };
            let rows: Vec<TaggedMetrics> = ablation_suite(&cfg, &groups, &mut |g, v, m| {
                println!("{g:<10} {v:<24} before {:.4} after {:.4}", m.mean_iou_before, m.mean_iou_after);
            })?;
            write_csv(&out.join("ablation.csv"), &rows)?;
        }
        Command::Robust(args) => {
            let model = model_for(&args, &cfg)?;
            cfg.model = model.config.clone();
            let scenes = eval_scenes(args.scenes.as_deref(), &cfg)?;
            let rows = robustness_sweep(&model, &scenes, &cfg, &DROP_RATES)?;
            write_csv(&out.join("robust.csv"), &rows)?;
            let mut text = String::new();
            for r in &rows {
                text += &format!("{:<6} rate {:.1}  mean IoU after {:.4}\n", r.kind, r.rate, r.metrics.mean_iou_after);
            }
            write_text(&out.join("robust_summary.txt"), &text)?;
            print!("{text}");
        }
    }
    Ok(())
}
