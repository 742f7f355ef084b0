//! Retrain the toy model once per bottleneck length or sampling method.

use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use softattn::matcore::with_alloc_tracking;
use softattn::model::{train, ToyModel, ToyModelConfig};
use softattn::sampling::{valid_spatial_m, SamplerMethod};

use crate::config::{AblationAxis, RunConfig};
use crate::train_toy::datasets;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub final_accuracy: f64,
    pub train_seconds: f64,
    pub peak_bytes: usize,
}

/// The configured values, or every valid one when none are given.
pub fn axis_values(cfg: &RunConfig) -> Vec<String> {
    if !cfg.ablate.values.is_empty() {
        return cfg.ablate.values.clone();
    }
    match cfg.ablate.axis {
        AblationAxis::Bottleneck => {
            let ms: Vec<usize> = if cfg.model.sampler.is_spatial() {
                valid_spatial_m(cfg.model.grid())
            } else {
                (1..=cfg.model.n()).collect()
            };
            ms.into_iter().map(|m| m.to_string()).collect()
        }
        AblationAxis::Sampling => SamplerMethod::ALL
            .iter()
            .map(|s| s.name().to_string())
            .collect(),
    }
}

fn model_for(cfg: &RunConfig, value: &str) -> Result<ToyModelConfig> {
    let mut model = cfg.model.clone();
    match cfg.ablate.axis {
        AblationAxis::Bottleneck => {
            model.m = value
                .parse()
                .with_context(|| format!("bottleneck length {value:?}"))?;
        }
        AblationAxis::Sampling => {
            model.sampler = value.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
        }
    }
    model.attention_config()?;
    Ok(model)
}

/// Every value is checked before any training starts. Peak bytes cover
/// model construction and the whole training run.
pub fn run(cfg: &RunConfig, timed: bool) -> Result<Vec<AblationRow>> {
    let values = axis_values(cfg);
    let models = values
        .iter()
        .map(|v| model_for(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let mut tcfg = cfg.train.clone();
    if let Some(e) = cfg.ablate.epochs {
        tcfg.epochs = e;
    }
    let (train_set, test) = datasets(&cfg.model, &cfg.task, &cfg.data, cfg.seed)?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, model_cfg) in values.into_iter().zip(models) {
        let start = Instant::now();
        let (report, stats) = with_alloc_tracking(|| -> Result<_> {
            let mut model = ToyModel::new(model_cfg)?;
            Ok(train(&mut model, &train_set, &test, &tcfg)?)
        });
        let report = report?;
        rows.push(AblationRow {
            axis: cfg.ablate.axis.name().to_string(),
            value,
            final_accuracy: report.final_accuracy,
            train_seconds: if timed {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            peak_bytes: stats.peak_live_bytes,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;

    fn tiny(axis: AblationAxis) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.grid_h = 4;
        cfg.model.grid_w = 4;
        cfg.model.d_e = 8;
        cfg.model.m = 4;
        cfg.model.layers = 1;
        cfg.data = DataConfig {
            train_per_class: 2,
            test_per_class: 1,
        };
        cfg.train.batch_size = 8;
        cfg.ablate.axis = axis;
        cfg.ablate.epochs = Some(1);
        cfg
    }

    #[test]
    fn default_values() {
        assert_eq!(
            axis_values(&tiny(AblationAxis::Bottleneck)),
            ["1", "4", "16"]
        );
        assert_eq!(axis_values(&tiny(AblationAxis::Sampling)).len(), 4);
    }

    #[test]
    fn incompatible_m_lists_valid_values() {
        let mut cfg = tiny(AblationAxis::Bottleneck);
        cfg.ablate.values = vec!["4".into(), "5".into()];
        let msg = format!("{:#}", run(&cfg, false).unwrap_err());
        assert!(msg.contains("shape error") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn unknown_sampler_rejected() {
        let mut cfg = tiny(AblationAxis::Sampling);
        cfg.ablate.values = vec!["nearest".into()];
        assert!(run(&cfg, false).is_err());
    }

    #[test]
    fn rows_follow_values() {
        let rows = run(&tiny(AblationAxis::Sampling), false).unwrap();
        let names: Vec<_> = rows.iter().map(|r| r.value.as_str()).collect();
        assert_eq!(names, ["avg_pool", "conv", "random", "biased"]);
        assert!(rows
            .iter()
            .all(|r| r.train_seconds == 0.0 && r.peak_bytes > 0));
    }
}
