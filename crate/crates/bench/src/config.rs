//! Run configuration read from a JSON file.
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! anywhere in the document are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use softattn::model::{TaskConfig, ToyModelConfig, TrainConfig};
use softattn::sampling::SamplerMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seeds data generation and benchmark inputs. `--seed` also copies it
    /// into `model.seed` and `train.seed`.
    pub seed: u64,
    pub model: ToyModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub scaling: ScalingConfig,
    pub pinv: PinvBenchConfig,
    pub ablate: AblateConfig,
    pub heatmap: HeatmapConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            anyhow::anyhow!(
                "invalid config at line {}, column {}: {e}",
                e.line(),
                e.column()
            )
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Sizes of the synthetic train and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_per_class: 128,
            test_per_class: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Soft,
    ExactGaussian,
    SoftmaxExact,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Soft => "soft",
            Mechanism::ExactGaussian => "exact_gaussian",
            Mechanism::SoftmaxExact => "softmax_exact",
        }
    }

    pub fn is_exact(self) -> bool {
        self != Mechanism::Soft
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub n_list: Vec<usize>,
    pub m: usize,
    pub d_e: usize,
    pub heads: usize,
    /// Landmark selection for the `soft` rows. `random` works for every `n`.
    pub sampler: SamplerMethod,
    pub mechanisms: Vec<Mechanism>,
    pub repeats: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            n_list: vec![1024, 2048, 4096, 8192],
            m: 49,
            d_e: 64,
            heads: 2,
            sampler: SamplerMethod::Random,
            mechanisms: vec![
                Mechanism::Soft,
                Mechanism::ExactGaussian,
                Mechanism::SoftmaxExact,
            ],
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinvBenchConfig {
    pub m_list: Vec<usize>,
    pub trials: usize,
    pub max_iters: usize,
    /// Dimension of the random tokens whose Gram matrix is inverted.
    pub token_dim: usize,
}

impl Default for PinvBenchConfig {
    fn default() -> Self {
        PinvBenchConfig {
            m_list: vec![49],
            trials: 100,
            max_iters: 20,
            token_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Bottleneck,
    Sampling,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Bottleneck => "bottleneck",
            AblationAxis::Sampling => "sampling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: AblationAxis,
    /// Bottleneck lengths or sampler names. Empty means every valid value.
    pub values: Vec<String>,
    /// Overrides `train.epochs` for each ablation run.
    pub epochs: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: AblationAxis::Bottleneck,
            values: Vec::new(),
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub input: Option<PathBuf>,
    pub query_index: usize,
    /// `[H, W]`; by default `H` is the largest divisor of `n` not above `√n`.
    pub grid: Option<[usize; 2]>,
    /// Defaults to `n / 4`.
    pub m: Option<usize>,
    pub sampler: SamplerMethod,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            input: None,
            query_index: 0,
            grid: None,
            m: None,
            sampler: SamplerMethod::AvgPool,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_line_and_key() {
        let err = RunConfig::from_json("{\n  \"model\": {\n    \"layerz\": 3\n  }\n}").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("layerz"), "{msg}");
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg =
            RunConfig::from_json(r#"{"train": {"epochs": 3}, "scaling": {"m": 16}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.scaling.m, 16);
        assert_eq!(cfg.scaling.n_list, ScalingConfig::default().n_list);
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig::default().with_seed(11);
        assert_eq!((cfg.seed, cfg.model.seed, cfg.train.seed), (11, 11, 11));
    }
}
