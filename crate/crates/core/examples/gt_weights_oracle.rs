//! Compares aggregation with predicted weights against aggregation with
//! ground-truth one-hot weights after a short training run.

use mcibi::config::ExperimentConfig;
use mcibi::data::Split;
use mcibi::experiment::{evaluate, load_split, train, EvalOptions};

fn main() -> mcibi::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.training.iterations = 150;
    cfg.training.log_every = 0;
    let train_data = load_split(&cfg, Split::Train)?;
    let val_data = load_split(&cfg, Split::Val)?;
    let t = train(&cfg, &train_data, None, None)?.trainer;
    let predicted = evaluate(&t.model, &t.bank, &cfg, &val_data, EvalOptions { stages: 1, gt_weights: false })?;
    let oracle = evaluate(&t.model, &t.bank, &cfg, &val_data, EvalOptions { stages: 1, gt_weights: true })?;
    println!("predicted weights mIoU {:.4}", predicted.miou());
    println!("ground-truth weights mIoU {:.4} (diagnostic)", oracle.miou());
    println!("gap {:+.4}", oracle.miou() - predicted.miou());
    Ok(())
}
