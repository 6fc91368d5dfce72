//! Trains a small model on synthetic shapes and evaluates it.
//!
//! `cargo run --release --example train_segmentor -- [iterations] [out_dir]`

use std::path::PathBuf;

use mcibi::config::ExperimentConfig;
use mcibi::data::Split;
use mcibi::experiment::{eval_table, evaluate, load_split, train, EvalOptions};

fn main() -> mcibi::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(Ok(300), |s| s.parse()).expect("iterations must be an integer");
    let out_dir = args.next().map(PathBuf::from);

    let mut cfg = ExperimentConfig::default();
    cfg.training.iterations = iterations;
    cfg.training.log_every = 50;
    let train_data = load_split(&cfg, Split::Train)?;
    let val_data = load_split(&cfg, Split::Val)?;

    let outcome = train(&cfg, &train_data, None, out_dir.as_deref())?;
    println!("trained {} iterations in {:.1}s", outcome.trainer.iteration, outcome.seconds);
    let report = evaluate(&outcome.trainer.model, &outcome.trainer.bank, &cfg, &val_data, EvalOptions { stages: 2, gt_weights: false })?;
    print!("{}", eval_table(&report));
    Ok(())
}
