//! Residual traces of the Newton pseudoinverse on random Gram matrices.

use anyhow::{bail, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use softattn::kernel::gaussian_attention_matrix;
use softattn::pinv::{newton_pinv, NewtonConfig, PinvReport};
use softattn::Matrix;

use crate::config::PinvBenchConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinvRow {
    pub m: usize,
    pub trial: usize,
    pub iter: usize,
    pub residual: f64,
}

/// Gaussian-kernel Gram matrix of `m` standard normal tokens in `d`
/// dimensions. Each `(m, trial)` pair has its own random stream.
pub fn trial_gram(m: usize, d: usize, seed: u64, trial: usize) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((m as u64) << 32) | trial as u64);
    let q = Matrix::random_normal(m, d, 1.0, &mut rng);
    Ok(gaussian_attention_matrix(&q, &q, d)?)
}

/// `(m, trial, gram, newton_pinv, report)` for one trial.
pub type Trial = (usize, usize, Matrix, Matrix, PinvReport);

/// The Gram matrix of every trial with its Newton result.
pub fn run_trials(cfg: &PinvBenchConfig, newton: &NewtonConfig, seed: u64) -> Result<Vec<Trial>> {
    if cfg.trials == 0 {
        bail!("trials must be at least 1");
    }
    let ncfg = NewtonConfig {
        max_iters: cfg.max_iters,
        ..newton.clone()
    };
    let mut out = Vec::with_capacity(cfg.m_list.len() * cfg.trials);
    for &m in &cfg.m_list {
        for trial in 0..cfg.trials {
            let a = trial_gram(m, cfg.token_dim, seed, trial)?;
            let (p, report) = newton_pinv(&a, &ncfg)?;
            out.push((m, trial, a, p, report));
        }
    }
    Ok(out)
}

pub fn run(cfg: &PinvBenchConfig, newton: &NewtonConfig, seed: u64) -> Result<Vec<PinvRow>> {
    let mut rows = Vec::new();
    for (m, trial, _, _, report) in run_trials(cfg, newton, seed)? {
        rows.extend(
            report
                .residuals
                .iter()
                .enumerate()
                .map(|(iter, &residual)| PinvRow {
                    m,
                    trial,
                    iter,
                    residual,
                }),
        );
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use softattn::pinv::{convergence_residual, newton_start};

    fn small() -> PinvBenchConfig {
        PinvBenchConfig {
            m_list: vec![4, 9],
            trials: 3,
            max_iters: 20,
            token_dim: 8,
        }
    }

    #[test]
    fn one_trace_per_trial() {
        let rows = run(&small(), &NewtonConfig::default(), 1).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 21);
        assert_eq!(rows[0].iter, 0);
        assert_eq!(rows[20].iter, 20);
    }

    #[test]
    fn trace_head_is_the_start_residual() {
        let cfg = small();
        let ncfg = NewtonConfig::default();
        for (m, trial, a, _, report) in run_trials(&cfg, &ncfg, 2).unwrap() {
            let (init, _) = newton_start(&a, &ncfg).unwrap();
            let r0 = convergence_residual(&a, &a.scale(init.alpha), ncfg.norm_kind).unwrap();
            assert_eq!(report.residuals[0], r0, "m={m} trial={trial}");
        }
    }

    #[test]
    fn zero_trials_rejected() {
        let cfg = PinvBenchConfig {
            trials: 0,
            ..small()
        };
        assert!(run(&cfg, &NewtonConfig::default(), 0).is_err());
    }
}
