//! Synthetic sequence classification.
//!
//! Every sample is `n` tokens. A fixed fraction of positions carry the
//! class signal `μ_c + σ·ε`; the remaining positions are class-independent
//! noise `σ·ε`. No single token reveals the class reliably at the default
//! `σ`, so a classifier has to aggregate over tokens.

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ToyModelConfig;
use crate::error::{domain_err, Result};
use crate::matcore::{Matrix, Real};

/// Where the signal tokens sit in the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// A fresh random subset of positions per sample.
    #[default]
    Scattered,
    /// The last positions of the sequence.
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub sigma: Real,
    pub signal_fraction: Real,
    pub placement: Placement,
    /// Seed for the class means, shared by train and test splits.
    pub mean_seed: u64,
    /// Give every class the same mean (a task with no signal).
    pub shared_means: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            sigma: 0.5,
            signal_fraction: 0.25,
            placement: Placement::Scattered,
            mean_seed: 7,
            shared_means: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unit-norm class means.
pub fn class_means(d: usize, classes: usize, task: &TaskConfig) -> Vec<Vec<Real>> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.mean_seed);
    let mut draw = || {
        let v: Vec<Real> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        v.into_iter().map(|x| x / norm).collect::<Vec<Real>>()
    };
    if task.shared_means {
        let mu = draw();
        vec![mu; classes]
    } else {
        (0..classes).map(|_| draw()).collect()
    }
}

/// `samples_per_class · classes` samples, labels interleaved. Sample `i`
/// draws from its own stream of `seed`, so the result does not depend on
/// how the work is split across threads.
pub fn make_synthetic_task(
    cfg: &ToyModelConfig,
    task: &TaskConfig,
    samples_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(domain_err!("need at least two classes"));
    }
    if !(task.sigma >= 0.0) || !(0.0..=1.0).contains(&task.signal_fraction) {
        return Err(domain_err!(
            "sigma must be ≥ 0 and signal_fraction in [0, 1]"
        ));
    }
    let (n, d) = (cfg.n(), cfg.d_e);
    let signal = (task.signal_fraction * n as Real).round() as usize;
    let means = class_means(d, cfg.classes, task);
    let total = samples_per_class * cfg.classes;
    let inputs: Vec<Matrix> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mu = &means[i % cfg.classes];
            let mut x = Matrix::random_normal(n, d, 1.0, &mut rng);
            x.map_inplace(|v| v * task.sigma);
            let rows = match task.placement {
                Placement::Scattered => index::sample(&mut rng, n, signal).into_vec(),
                Placement::Tail => (n - signal..n).collect(),
            };
            for r in rows {
                for (v, m) in x.row_mut(r).iter_mut().zip(mu) {
                    *v += m;
                }
            }
            x
        })
        .collect();
    Ok(Dataset {
        inputs,
        labels: (0..total).map(|i| i % cfg.classes).collect(),
        classes: cfg.classes,
    })
}
