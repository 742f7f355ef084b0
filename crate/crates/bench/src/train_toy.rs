//! Train the toy classifier described by a [`RunConfig`].

use anyhow::Result;
use softattn::model::{
    make_synthetic_task, train, Dataset, TaskConfig, ToyModel, ToyModelConfig, TrainReport,
};

use crate::config::{DataConfig, RunConfig};

/// Train and test splits; the test split uses the next seed.
pub fn datasets(
    model: &ToyModelConfig,
    task: &TaskConfig,
    data: &DataConfig,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train_set = make_synthetic_task(model, task, data.train_per_class, seed)?;
    let test = make_synthetic_task(model, task, data.test_per_class, seed.wrapping_add(1))?;
    Ok((train_set, test))
}

/// `timed = false` zeroes the wall time so the report is reproducible
/// byte for byte.
pub fn run(cfg: &RunConfig, timed: bool) -> Result<TrainReport> {
    let (train_set, test) = datasets(&cfg.model, &cfg.task, &cfg.data, cfg.seed)?;
    let mut model = ToyModel::new(cfg.model.clone())?;
    let mut report = train(&mut model, &train_set, &test, &cfg.train)?;
    if !timed {
        report.wall_time_s = 0.0;
    }
    Ok(report)
}
