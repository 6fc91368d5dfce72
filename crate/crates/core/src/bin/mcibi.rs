//! Command-line front end.
//!
//! Outputs go under `$MCIBI_OUTPUT_ROOT` (default `runs`). Exit codes: 0 on
//! success, 2 for configuration errors, 3 for runtime failures, 4 when a
//! requested acceptance threshold is not met.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcibi::ablation::{run_grid, GridSpec};
use mcibi::checkpoint;
use mcibi::config::ExperimentConfig;
use mcibi::data::{batch_from_clips, Split, VideoClip};
use mcibi::error::{Error, Result};
use mcibi::experiment::{
    eval_table, evaluate, initial_bank, load_split, stage_chart_svg, train, write_report, EvalOptions, ReportKind,
};
use mcibi::iis::{run_iis, IisConfig};
use mcibi::segmentor::argmax_labels;

const OUTPUT_ROOT_VAR: &str = "MCIBI_OUTPUT_ROOT";
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

#[derive(Parser)]
#[command(name = "mcibi", version, about = "Segmentation with a dataset-level distribution memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set memory.momentum=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Historical frames for the video model; enables video data when > 0.
    #[arg(long = "history", value_name = "H")]
    history: Option<usize>,
    /// Train with the memory bank frozen at its initial state.
    #[arg(long)]
    frozen_memory: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run name under the output root.
        #[arg(long, default_value = "train")]
        name: String,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even when the checkpoint was written under another config.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage counts to evaluate, e.g. `1,2`.
        #[arg(long = "iis-stages", value_delimiter = ',')]
        iis_stages: Vec<usize>,
        /// Aggregate with ground-truth weights (diagnostic only).
        #[arg(long)]
        gt_weights: bool,
        /// Evaluate with the bank as it was before any update.
        #[arg(long)]
        frozen_memory: bool,
        /// Dotted-key override applied to the stored config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Exit with code 4 when the final mIoU falls below this value.
        #[arg(long)]
        min_miou: Option<f64>,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Predict a label map for one image or clip.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames oldest first; the last one is segmented.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "iis-stages")]
        iis_stages: Option<usize>,
    },
    /// Run an ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of fusion, momentum, lossweight, memory, iis, video.
        #[arg(long)]
        preset: Option<String>,
        /// Axis `KEY=V1,V2,...`; several axes form a product.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablate")]
        name: String,
    },
    /// Print or save the memory bank of a checkpoint.
    ExportMemory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

enum Outcome {
    Done,
    BelowThreshold(String),
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = split_override(o)?;
        cfg.set_optional(k, v)?;
    }
    if let Some(h) = args.history {
        cfg.video.history = h;
        if h > 0 {
            cfg.video.enabled = true;
        }
    }
    if args.frozen_memory {
        cfg.memory.update = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn cmd_train(args: &ConfigArgs, name: &str, resume: Option<&Path>, force: bool) -> Result<Outcome> {
    let cfg = resolve_config(args)?;
    let dir = output_root().join(name);
    std::fs::create_dir_all(&dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let trainer = match resume {
        Some(path) => {
            let ckpt = checkpoint::load_for_resume(path, &cfg, force)?;
            log::info!("resuming from iteration {}", ckpt.trainer.iteration);
            Some(ckpt.trainer)
        }
        None => None,
    };
    let train_data = load_split(&cfg, Split::Train)?;
    let outcome = train(&cfg, &train_data, trainer, Some(&dir))?;
    log::info!(
        "trained {} iterations in {:.1}s; checkpoint {}",
        outcome.trainer.iteration,
        outcome.seconds,
        outcome.final_checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string())
    );
    Ok(Outcome::Done)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint_path: &Path,
    stages: &[usize],
    gt_weights: bool,
    frozen_memory: bool,
    overrides: &[String],
    min_miou: Option<f64>,
    name: &str,
) -> Result<Outcome> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let mut cfg = ckpt.config.clone();
    for o in overrides {
        let (k, v) = split_override(o)?;
        cfg.set_optional(k, v)?;
    }
    let stages = if stages.is_empty() { vec![cfg.inference.iis_stages] } else { stages.to_vec() };
    let val = load_split(&cfg, Split::Val)?;
    let bank = if frozen_memory {
        initial_bank(&ckpt.config, &load_split(&ckpt.config, Split::Train)?)?
    } else {
        ckpt.trainer.bank.clone()
    };
    let dir = output_root().join(name);
    let mut reports = Vec::new();
    for &n in &stages {
        let mut report = evaluate(&ckpt.trainer.model, &bank, &cfg, &val, EvalOptions { stages: n, gt_weights })?;
        if frozen_memory {
            report.kind = ReportKind::AblationFrozenMemory;
        }
        let stem = match report.kind {
            ReportKind::Standard => format!("eval_stages{n}"),
            ReportKind::DiagnosticGtWeights => "diagnostic_gt_weights".to_string(),
            ReportKind::AblationFrozenMemory => format!("ablation_frozen_memory_stages{n}"),
        };
        let table = eval_table(&report);
        print!("{table}");
        write_report(&dir, &stem, &report, &table)?;
        write_text(&dir.join(format!("{stem}.svg")), &stage_chart_svg(&report))?;
        reports.push(report);
        if gt_weights {
            break;
        }
    }
    if reports.len() > 1 {
        let base = reports[0].miou();
        let mut delta = format!("{:<8} {:>8} {:>9}\n", "stages", "mIoU", "delta");
        for (n, r) in stages.iter().zip(&reports) {
            delta.push_str(&format!("{n:<8} {:>8.4} {:>+9.4}\n", r.miou(), r.miou() - base));
        }
        print!("{delta}");
        write_text(&dir.join("stage_delta.txt"), &delta)?;
    }
    if let Some(min) = min_miou {
        let got = reports.last().expect("one report").miou();
        if got < min {
            return Ok(Outcome::BelowThreshold(format!("mIoU {got:.4} is below the threshold {min:.4}")));
        }
    }
    Ok(Outcome::Done)
}

fn cmd_infer(checkpoint_path: &Path, inputs: &[PathBuf], output: &Path, stages: Option<usize>) -> Result<Outcome> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let frames = inputs
        .iter()
        .map(|p| Ok(image_to_array(&image::open(p)?.to_rgb8())))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].dim().1, frames[0].dim().2);
    let clip = VideoClip { id: "input".into(), frames, labels: ndarray::Array2::zeros((h, w)) };
    let (batch, padded) = batch_from_clips(&[&clip], ckpt.trainer.model.history())?;
    if padded {
        log::warn!("fewer frames than the model's history; the earliest frame was repeated");
    }
    let cfg = &ckpt.config;
    let iis = IisConfig::new(stages.unwrap_or(cfg.inference.iis_stages))?;
    let out = run_iis(&ckpt.trainer.model, &batch.frames, &ckpt.trainer.bank, cfg.inference.sampling, cfg.inference.seed, iis)?;
    let labels = argmax_labels(&out.last().probs);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([labels[[0, y as usize, x as usize]]]));
    img.save(output)?;
    log::info!("wrote {}", output.display());
    Ok(Outcome::Done)
}

fn image_to_array(img: &image::RgbImage) -> ndarray::Array3<f32> {
    let (w, h) = img.dimensions();
    ndarray::Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
}

fn cmd_ablate(args: &ConfigArgs, preset: Option<&str>, grid: &[String], seeds: Vec<u64>, name: &str) -> Result<Outcome> {
    let base = resolve_config(args)?;
    let spec = match (preset, grid.is_empty()) {
        (Some(p), true) => GridSpec::preset(p, seeds)?,
        (None, false) => {
            let axes = grid
                .iter()
                .map(|g| {
                    let (k, v) = split_override(g)?;
                    Ok((k.to_string(), v.split(',').map(str::to_string).collect()))
                })
                .collect::<Result<Vec<_>>>()?;
            GridSpec::from_axes(name, &axes, seeds)
        }
        _ => return Err(Error::Config("give exactly one of --preset or --grid".into())),
    };
    let report = run_grid(&spec, &base, Some(&output_root().join(name)))?;
    print!("{}", report.to_table());
    Ok(Outcome::Done)
}

fn cmd_export(checkpoint_path: &Path, format: &str, output: Option<&Path>) -> Result<Outcome> {
    let bank = checkpoint::load(checkpoint_path)?.trainer.bank;
    let text = match format {
        "table" => bank.to_table(),
        "json" => serde_json::to_string_pretty(&bank)? + "\n",
        other => return Err(Error::Config(format!("unknown format `{other}`; use table or json"))),
    };
    match output {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(Outcome::Done)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train { cfg, name, resume, force } => cmd_train(&cfg, &name, resume.as_deref(), force),
        Command::Eval { checkpoint, iis_stages, gt_weights, frozen_memory, overrides, min_miou, name } => {
            cmd_eval(&checkpoint, &iis_stages, gt_weights, frozen_memory, &overrides, min_miou, &name)
        }
        Command::Infer { checkpoint, input, output, iis_stages } => cmd_infer(&checkpoint, &input, &output, iis_stages),
        Command::Ablate { cfg, preset, grid, seeds, name } => cmd_ablate(&cfg, preset.as_deref(), &grid, seeds, &name),
        Command::ExportMemory { checkpoint, format, output } => cmd_export(&checkpoint, &format, output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::BelowThreshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(EXIT_THRESHOLD)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
