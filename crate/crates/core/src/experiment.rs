//! Training and evaluation runs driven by an [`ExperimentConfig`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataSource, ExperimentConfig, MemoryInit};
use crate::data::{
    batch_from_clips, generate_synthetic_dataset, generate_synthetic_video, load_clips, load_dataset, Split,
    VideoClip,
};
use crate::error::{Error, Result};
use crate::iis::{gt_weight_oracle, run_iis_with_reps, IisConfig};
use crate::memory_bank::MemoryBank;
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::optim::Optimizer;
use crate::segmentor::{argmax_labels, Segmentor};
use crate::train::{derive_seed, Batch, StepReport, TrainOptions, Trainer};

const MODEL_STREAM: u64 = 0x6d6f_6465_6c;
const ORDER_STREAM: u64 = 0x6f72_6465_72;

/// Loads one split. Still images become one-frame clips so image and video
/// runs share the same plumbing.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<VideoClip>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let synth = cfg.synthetic();
            if cfg.video.enabled {
                generate_synthetic_video(&synth, &cfg.video_config(), split)
            } else {
                Ok(generate_synthetic_dataset(&synth, split)?
                    .into_iter()
                    .map(|s| VideoClip { id: s.id, frames: vec![s.image], labels: s.labels })
                    .collect())
            }
        }
        DataSource::Manifest => {
            let path = match split {
                Split::Train => cfg.data.train_manifest.as_ref(),
                Split::Val => cfg.data.val_manifest.as_ref(),
            }
            .ok_or_else(|| Error::Config(format!("no manifest configured for the {split:?} split")))?;
            let (num_classes, ignore, clips) = if cfg.video.enabled {
                let (m, clips) = load_clips(path)?;
                (m.num_classes, m.ignore_index, clips)
            } else {
                let (m, samples) = load_dataset(path)?;
                let clips = samples
                    .into_iter()
                    .map(|s| VideoClip { id: s.id, frames: vec![s.image], labels: s.labels })
                    .collect();
                (m.num_classes, m.ignore_index, clips)
            };
            if num_classes != cfg.model.num_classes || ignore != cfg.training.ignore_index {
                return Err(Error::Config(format!(
                    "manifest {} declares K={num_classes}, ignore={ignore}; config has K={}, ignore={}",
                    path.display(),
                    cfg.model.num_classes,
                    cfg.training.ignore_index
                )));
            }
            Ok(clips)
        }
    }
}

/// Fresh model, bank and optimizer for `cfg`.
pub fn build_trainer(cfg: &ExperimentConfig) -> Result<Trainer<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.training.seed, MODEL_STREAM));
    let mut model = Segmentor::<f32>::new(cfg.model_config(), &mut rng)?;
    if cfg.model.zero_init_context {
        if let Some(dca) = model.dca_mut() {
            dca.silence_output();
        }
    }
    let bank = MemoryBank::new(cfg.model.num_classes, cfg.model.feature_dim, cfg.memory.momentum)?
        .with_epsilon_std(cfg.memory.epsilon_std);
    let optimizer = Optimizer::new(cfg.training.optimizer.clone(), cfg.training.iterations);
    let options = TrainOptions {
        alpha: cfg.training.alpha,
        ignore_index: cfg.training.ignore_index,
        update_memory: cfg.memory.update,
        seed: cfg.training.seed,
    };
    Trainer::new(model, bank, optimizer, options)
}

/// Sample order: a fresh permutation of the training set per epoch, derived
/// from the training seed, so any iteration's batch can be recomputed.
pub struct BatchSchedule {
    len: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        Self { len, batch_size, seed, cached: None }
    }

    pub fn indices(&mut self, iteration: u64) -> Vec<usize> {
        (0..self.batch_size)
            .map(|j| {
                let pos = iteration * self.batch_size as u64 + j as u64;
                let epoch = pos / self.len as u64;
                if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..self.len).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ ORDER_STREAM, epoch)));
                    self.cached = Some((epoch, perm));
                }
                self.cached.as_ref().expect("cached").1[(pos % self.len as u64) as usize]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer<f32>,
    pub log: Vec<StepReport>,
    pub seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

fn clip_batch(clips: &[VideoClip], idx: &[usize], history: usize) -> Result<Batch<f32>> {
    let refs: Vec<_> = idx.iter().map(|&i| &clips[i]).collect();
    Ok(batch_from_clips(&refs, history)?.0)
}

/// Pre-scan initialization: one random pixel per class, in data order.
pub fn prescan_bank(trainer: &mut Trainer<f32>, cfg: &ExperimentConfig, train: &[VideoClip]) -> Result<()> {
    let idx: Vec<usize> = (0..train.len()).collect();
    let batches = idx
        .chunks(cfg.training.batch_size)
        .map(|c| clip_batch(train, c, cfg.history()))
        .collect::<Result<Vec<_>>>()?;
    trainer.prescan(&batches)
}

/// Runs (or continues) training to `cfg.training.iterations`. With an
/// output directory, a JSON-lines log and periodic checkpoints are written.
pub fn train(
    cfg: &ExperimentConfig,
    train_data: &[VideoClip],
    resume: Option<Trainer<f32>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_data.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let mut trainer = match resume {
        Some(t) => t,
        None => build_trainer(cfg)?,
    };
    if trainer.iteration == 0 && cfg.memory.init == MemoryInit::Prescan && trainer.model.has_dataset_context() {
        prescan_bank(&mut trainer, cfg, train_data)?;
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::file(&path, e))?,
            )
        }
        None => None,
    };
    let mut schedule = BatchSchedule::new(train_data.len(), cfg.training.batch_size, cfg.training.seed);
    let mut log = Vec::new();
    let start = Instant::now();
    let t = &cfg.training;
    while trainer.iteration < t.iterations {
        let idx = schedule.indices(trainer.iteration);
        let batch = clip_batch(train_data, &idx, cfg.history())?;
        let report = trainer.train_step(&batch)?;
        let done = trainer.iteration;
        if t.log_every > 0 && (report.iteration % t.log_every == 0 || done == t.iterations) {
            log::info!(
                "iter {:>6}  L_W {:.4}  L_O {:.4}  total {:.4}  lr {:.2e}  bank mean {:.4} std {:.4}",
                report.iteration,
                report.loss.loss_w,
                report.loss.loss_o,
                report.loss.total,
                report.lr,
                report.bank_mean,
                report.bank_std
            );
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&report)?)?;
            }
            log.push(report);
        }
        if let Some(dir) = out_dir {
            if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.iterations {
                checkpoint::save(&dir.join(format!("checkpoints/iter_{done:06}.ckpt")), &trainer, cfg)?;
            }
        }
    }
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            checkpoint::save(&path, &trainer, cfg)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { trainer, log, seconds: start.elapsed().as_secs_f64(), final_checkpoint })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Standard,
    /// Ground-truth aggregation weights; an upper-bound probe, not a result.
    DiagnosticGtWeights,
    /// Trained weights evaluated with the bank as initialized, never updated.
    AblationFrozenMemory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub stages: usize,
    pub gt_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub metrics: MetricReport,
    /// Summed wall time of stages `1..=stage` over the evaluation set.
    pub cumulative_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub stages: Vec<StageReport>,
    pub num_samples: usize,
    /// Clips that were shorter than the model's history and got padded.
    pub padded_clips: usize,
    pub inference_seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
}

impl EvalReport {
    pub fn last(&self) -> &StageReport {
        self.stages.last().expect("at least one stage")
    }

    pub fn miou(&self) -> f64 {
        self.last().metrics.miou
    }
}

/// Evaluates `model` with `bank` on `data`. Each sample gets its own
/// representation draw, derived from the inference seed.
pub fn evaluate(
    model: &Segmentor<f32>,
    bank: &MemoryBank,
    cfg: &ExperimentConfig,
    data: &[VideoClip],
    opts: EvalOptions,
) -> Result<EvalReport> {
    let iis = IisConfig::new(opts.stages)?;
    model.check_bank(bank)?;
    let k = cfg.model.num_classes;
    let ignore = cfg.training.ignore_index;
    let stage_count = if opts.gt_weights { 1 } else { iis.stages };
    let mut cms = vec![ConfusionMatrix::new(k, ignore); stage_count];
    let mut seconds = vec![0.0; stage_count];
    let mut padded_clips = 0;
    for (i, clip) in data.iter().enumerate() {
        let (batch, padded) = batch_from_clips(&[clip], model.history())?;
        padded_clips += usize::from(padded);
        let seed = derive_seed(cfg.inference.seed, i as u64);
        let reps = model
            .has_dataset_context()
            .then(|| std::sync::Arc::new(bank.representations(cfg.inference.sampling, seed).as_real::<f32>()));
        if opts.gt_weights {
            let reps = reps.ok_or_else(|| Error::Config("--gt-weights needs the dataset-level context".into()))?;
            let start = Instant::now();
            let probs = gt_weight_oracle(model, &batch.frames, &batch.labels, &reps, ignore)?;
            seconds[0] += start.elapsed().as_secs_f64();
            cms[0].add(&argmax_labels(&probs), &batch.labels)?;
        } else {
            let out = run_iis_with_reps(model, &batch.frames, reps, iis)?;
            for (s, stage) in out.stages.iter().enumerate() {
                seconds[s] += stage.elapsed.as_secs_f64();
                cms[s].add(&argmax_labels(&stage.probs), &batch.labels)?;
            }
        }
    }
    let stages = cms
        .iter()
        .zip(seconds)
        .enumerate()
        .map(|(s, (cm, secs))| Ok(StageReport { stage: s + 1, metrics: cm.report()?, cumulative_seconds: secs }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        kind: if opts.gt_weights { ReportKind::DiagnosticGtWeights } else { ReportKind::Standard },
        stages,
        num_samples: data.len(),
        padded_clips,
        inference_seed: cfg.inference.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
    })
}

/// The bank a run with frozen memory would have used: the same initial
/// model and initialization pass, no updates.
pub fn initial_bank(cfg: &ExperimentConfig, train_data: &[VideoClip]) -> Result<MemoryBank> {
    let mut trainer = build_trainer(cfg)?;
    if cfg.memory.init == MemoryInit::Prescan {
        prescan_bank(&mut trainer, cfg, train_data)?;
    }
    Ok(trainer.bank)
}

/// Writes `<stem>.json` and `<stem>.txt` under `dir`.
pub fn write_report<T: Serialize>(dir: &Path, stem: &str, report: &T, table: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::file(&json, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, table).map_err(|e| Error::file(&txt, e))
}

pub fn eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    if report.kind != ReportKind::Standard {
        out.push_str(&format!("# {:?}: not comparable with standard results\n", report.kind));
    }
    out.push_str(&format!(
        "# samples {}  inference seed {}  config {}\n",
        report.num_samples,
        report.inference_seed,
        &report.config_hash[..12]
    ));
    out.push_str(&format!("{:<6} {:>8} {:>8} {:>8} {:>10}\n", "stage", "mIoU", "pixAcc", "mAcc", "time(s)"));
    for s in &report.stages {
        out.push_str(&format!(
            "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>10.3}\n",
            s.stage, s.metrics.miou, s.metrics.pixel_accuracy, s.metrics.mean_class_accuracy, s.cumulative_seconds
        ));
    }
    out.push('\n');
    out.push_str(&report.last().metrics.to_table());
    out
}

/// Bar chart of mIoU per stage as a standalone SVG document.
pub fn stage_chart_svg(report: &EvalReport) -> String {
    let (w, h, pad) = (80.0 * report.stages.len() as f64 + 80.0, 240.0, 40.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\">mIoU per inference stage</text>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
        y0 = h - pad,
        x1 = w - pad / 2.0
    );
    let plot_h = h - 2.0 * pad - 10.0;
    for (i, s) in report.stages.iter().enumerate() {
        let bar = s.metrics.miou.clamp(0.0, 1.0) * plot_h;
        let x = pad + 10.0 + 80.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y:.1}\" width=\"50\" height=\"{bar:.1}\" fill=\"#4a7ab7\"/>\n\
             <text x=\"{tx}\" y=\"{ly:.1}\" text-anchor=\"middle\">{v:.3}</text>\n\
             <text x=\"{tx}\" y=\"{sy}\" text-anchor=\"middle\">stage {st}</text>\n",
            y = h - pad - bar,
            tx = x + 25.0,
            ly = h - pad - bar - 4.0,
            v = s.metrics.miou,
            sy = h - pad + 16.0,
            st = s.stage
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
