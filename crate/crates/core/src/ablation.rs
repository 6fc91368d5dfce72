//! Ablation grids: rows of config overrides evaluated over several seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Split, VideoClip};
use crate::error::{Error, Result};
use crate::experiment::{evaluate, train, EvalOptions};

/// One row of a grid: dotted-key overrides applied to the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub name: String,
    pub rows: Vec<GridRow>,
    pub seeds: Vec<u64>,
}

pub const PRESETS: [&str; 6] = ["fusion", "momentum", "lossweight", "memory", "iis", "video"];

fn row(label: &str, overrides: &[(&str, &str)]) -> GridRow {
    GridRow {
        label: label.to_string(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

fn single_key(key: &str, values: &[&str]) -> Vec<GridRow> {
    values.iter().map(|v| row(&format!("{key}={v}"), &[(key, v)])).collect()
}

impl GridSpec {
    pub fn preset(name: &str, seeds: Vec<u64>) -> Result<Self> {
        let rows = match name {
            "fusion" => {
                let mut rows = vec![row("fcn", &[("model.dataset_context", "false")])];
                rows.extend(single_key("model.fusion", &["add", "weighted_add", "concatenation"]));
                rows
            }
            "momentum" => single_key("memory.momentum", &["0.01", "0.1", "0.5", "0.9"]),
            "lossweight" => single_key("training.alpha", &["0.2", "0.4", "0.6", "0.8", "1.0"]),
            "memory" => vec![
                row("frozen, no IIS", &[("memory.update", "false"), ("inference.iis_stages", "1")]),
                row("frozen, IIS", &[("memory.update", "false"), ("inference.iis_stages", "2")]),
                row("updated, no IIS", &[("memory.update", "true"), ("inference.iis_stages", "1")]),
                row("updated, IIS", &[("memory.update", "true"), ("inference.iis_stages", "2")]),
            ],
            "iis" => single_key("inference.iis_stages", &["1", "2", "3", "4"]),
            "video" => vec![
                row("image", &[("video.enabled", "true"), ("video.history", "0")]),
                row("C_bi^{N-i}", &[("video.enabled", "true"), ("video.temporal", "dataset_context")]),
                row("R_{N-i}", &[("video.enabled", "true"), ("video.temporal", "raw_features")]),
            ],
            other => return Err(Error::UnknownGridKey(other.to_string())),
        };
        Ok(Self { name: name.to_string(), rows, seeds })
    }

    /// Cartesian product of `key=v1,v2,...` axes.
    pub fn from_axes(name: &str, axes: &[(String, Vec<String>)], seeds: Vec<u64>) -> Self {
        let mut rows = vec![GridRow { label: String::new(), overrides: Vec::new() }];
        for (key, values) in axes {
            rows = rows
                .into_iter()
                .flat_map(|r| {
                    values.iter().map(move |v| {
                        let mut next = r.clone();
                        next.overrides.push((key.clone(), v.clone()));
                        next.label = next.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
                        next
                    })
                })
                .collect();
        }
        Self { name: name.to_string(), rows, seeds }
    }

    /// Resolves every cell's config without running anything, so bad keys
    /// fail before any compute.
    pub fn resolve(&self, base: &ExperimentConfig) -> Result<Vec<Vec<ExperimentConfig>>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an ablation grid needs at least one seed".into()));
        }
        self.rows
            .iter()
            .map(|r| {
                self.seeds
                    .iter()
                    .map(|&seed| {
                        let mut cfg = base.clone();
                        cfg.training.seed = seed;
                        cfg.inference.seed = seed;
                        for (k, v) in &r.overrides {
                            cfg.set(k, v)?;
                        }
                        Ok(cfg)
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub per_seed_miou: Vec<f64>,
    pub mean_miou: f64,
    /// Mean over seeds of `(this row − first row)`.
    pub mean_delta: f64,
    pub per_seed_eval_seconds: Vec<f64>,
    pub config_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub spec: GridSpec,
    pub cells: Vec<CellResult>,
    pub base_config: ExperimentConfig,
    pub trainings: usize,
}

impl GridReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("# grid {}  seeds {:?}  trainings {}\n", self.spec.name, self.spec.seeds, self.trainings);
        out.push_str(&format!("{:<40} {:>8} {:>9}   per seed\n", "row", "mIoU", "delta"));
        for c in &self.cells {
            let per: Vec<String> = c.per_seed_miou.iter().map(|v| format!("{v:.4}")).collect();
            out.push_str(&format!("{:<40} {:>8.4} {:>+9.4}   {}\n", c.label, c.mean_miou, c.mean_delta, per.join(" ")));
        }
        out
    }
}

/// Key used to share trained models between cells that only differ in
/// inference settings.
fn training_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.inference = Default::default();
    c.hash()
}

/// Runs every cell. Trained models are reused across cells whose configs
/// differ only in the inference section.
pub fn run_grid(spec: &GridSpec, base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<GridReport> {
    let configs = spec.resolve(base)?;
    let mut data_cache: BTreeMap<String, (Vec<VideoClip>, Vec<VideoClip>)> = BTreeMap::new();
    let mut models = BTreeMap::new();
    let mut cells = Vec::with_capacity(spec.rows.len());
    let mut baseline: Option<Vec<f64>> = None;
    for (row, cfgs) in spec.rows.iter().zip(&configs) {
        let mut per_seed = Vec::new();
        let mut secs = Vec::new();
        let mut hashes = Vec::new();
        for cfg in cfgs {
            let data_key = serde_json::to_string(&(&cfg.data, &cfg.video, cfg.model.num_classes))?;
            if !data_cache.contains_key(&data_key) {
                let train = crate::experiment::load_split(cfg, Split::Train)?;
                let val = crate::experiment::load_split(cfg, Split::Val)?;
                data_cache.insert(data_key.clone(), (train, val));
            }
            let (train_data, val_data) = &data_cache[&data_key];
            let key = training_key(cfg);
            if !models.contains_key(&key) {
                log::info!("grid {}: training {} (seed {})", spec.name, row.label, cfg.training.seed);
                let dir = out_dir.map(|d| d.join("runs").join(&key[..16]));
                let outcome = train(cfg, train_data, None, dir.as_deref())?;
                models.insert(key.clone(), outcome.trainer);
            }
            let trainer = &models[&key];
            let report = evaluate(
                &trainer.model,
                &trainer.bank,
                cfg,
                val_data,
                EvalOptions { stages: cfg.inference.iis_stages, gt_weights: false },
            )?;
            per_seed.push(report.miou());
            secs.push(report.last().cumulative_seconds);
            hashes.push(cfg.hash());
        }
        let base_vals = baseline.get_or_insert_with(|| per_seed.clone()).clone();
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let delta = per_seed.iter().zip(&base_vals).map(|(a, b)| a - b).sum::<f64>() / per_seed.len() as f64;
        cells.push(CellResult {
            label: row.label.clone(),
            per_seed_miou: per_seed,
            mean_miou: mean,
            mean_delta: delta,
            per_seed_eval_seconds: secs,
            config_hashes: hashes,
        });
    }
    let report = GridReport { spec: spec.clone(), cells, base_config: base.clone(), trainings: models.len() };
    if let Some(dir) = out_dir {
        crate::experiment::write_report(dir, &format!("ablation_{}", spec.name), &report, &report.to_table())?;
    }
    Ok(report)
}
