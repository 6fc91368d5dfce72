//! Runs a tiny custom grid over memory momentum and the number of
//! inference stages, two seeds each. Models are shared between rows that
//! only change inference settings.

use mcibi::ablation::{run_grid, GridSpec};
use mcibi::config::ExperimentConfig;

fn main() -> mcibi::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut base = ExperimentConfig::default();
    base.training.iterations = 40;
    base.data.train_images = 16;
    base.data.val_images = 8;
    let axes = vec![
        ("memory.momentum".to_string(), vec!["0.1".to_string(), "0.9".to_string()]),
        ("inference.iis_stages".to_string(), vec!["1".to_string(), "2".to_string()]),
    ];
    let spec = GridSpec::from_axes("momentum_x_stages", &axes, vec![0, 1]);
    let report = run_grid(&spec, &base, None)?;
    print!("{}", report.to_table());
    Ok(())
}
