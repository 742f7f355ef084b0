//! Time and memory of one attention forward pass as `n` grows.

use std::time::Instant;

use anyhow::{bail, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use softattn::attention::{exact_attention, soft_attention, AttentionConfig};
use softattn::kernel::{project, ExactKernel, ProjectionWeights, TokenSequence};
use softattn::matcore::with_alloc_tracking;
use softattn::pinv::NewtonConfig;
use softattn::sampling::SamplerSpec;
use softattn::Matrix;

use crate::config::{Mechanism, ScalingConfig};
use crate::{grid_for, median};

/// Largest `n` an exact mechanism runs at without `--force`.
pub const EXACT_GUARD: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: String,
    pub n: usize,
    pub m: usize,
    pub d_e: usize,
    pub wall_time_s: f64,
    pub peak_bytes: usize,
    pub repeats: usize,
    pub seed: u64,
}

/// Projection followed by attention, the unit that is timed.
fn forward(
    mech: Mechanism,
    x: &TokenSequence,
    w: &ProjectionWeights,
    cfg: &AttentionConfig,
) -> softattn::Result<Matrix> {
    let (q, v) = project(x, w)?;
    match mech {
        Mechanism::Soft => Ok(soft_attention(&q, &v, cfg)?.values_out),
        Mechanism::ExactGaussian => {
            exact_attention(q.features(), v.features(), cfg.heads, ExactKernel::Gaussian)
        }
        Mechanism::SoftmaxExact => {
            exact_attention(q.features(), v.features(), cfg.heads, ExactKernel::Softmax)
        }
    }
}

pub fn validate(cfg: &ScalingConfig, force: bool) -> Result<()> {
    if cfg.n_list.is_empty() || cfg.n_list.windows(2).any(|p| p[0] >= p[1]) {
        bail!("n_list must be non-empty and strictly ascending");
    }
    if cfg.repeats < 3 {
        bail!("repeats must be at least 3, got {}", cfg.repeats);
    }
    let max_n = *cfg.n_list.last().expect("non-empty");
    if !force && max_n > EXACT_GUARD {
        if let Some(mech) = cfg.mechanisms.iter().find(|m| m.is_exact()) {
            bail!(
                "{} at n = {max_n} materialises an n x n matrix; the limit is n = {EXACT_GUARD} without --force",
                mech.name()
            );
        }
    }
    Ok(())
}

/// One row per (mechanism, n). Timing is the median of `repeats` runs after
/// a warm-up run; memory is the peak of the warm-up run. `timed = false`
/// skips the repeats and reports zero time.
///
/// The timed runs of one mechanism go in rounds over every `n`, so a slow
/// stretch on a shared machine lands on all lengths alike.
pub fn run(cfg: &ScalingConfig, seed: u64, force: bool, timed: bool) -> Result<Vec<BenchRow>> {
    validate(cfg, force)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_e;
    let std = 1.0 / (d as f64).sqrt();
    let w = ProjectionWeights::new(
        Matrix::random_normal(d, d, std, &mut rng),
        Matrix::random_normal(d, d, std, &mut rng),
    )?;
    let mut cases = Vec::new();
    for &n in &cfg.n_list {
        let (gh, gw) = grid_for(n);
        let mut xrng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let x = TokenSequence::new(Matrix::random_normal(n, d, 1.0, &mut xrng), gh, gw)?;
        let spec = SamplerSpec::for_grid(cfg.sampler, (gh, gw), cfg.m, seed)?;
        let att = AttentionConfig::new(d, cfg.heads, spec)?.with_newton(NewtonConfig::default());
        cases.push((n, x, att));
    }

    let mut rows = Vec::new();
    for (n, x, att) in &cases {
        for &mech in &cfg.mechanisms {
            let (out, stats) = with_alloc_tracking(|| forward(mech, x, &w, att));
            out?;
            rows.push(BenchRow {
                mechanism: mech.name().to_string(),
                n: *n,
                m: cfg.m,
                d_e: d,
                wall_time_s: 0.0,
                peak_bytes: stats.peak_live_bytes,
                repeats: cfg.repeats,
                seed,
            });
        }
    }
    if !timed {
        return Ok(rows);
    }

    let n_mech = cfg.mechanisms.len();
    for (j, &mech) in cfg.mechanisms.iter().enumerate() {
        let mut times = vec![Vec::with_capacity(cfg.repeats); cases.len()];
        for _ in 0..cfg.repeats {
            for (i, (_, x, att)) in cases.iter().enumerate() {
                let t = Instant::now();
                std::hint::black_box(forward(mech, x, &w, att)?);
                times[i].push(t.elapsed().as_secs_f64());
            }
        }
        for (i, ts) in times.into_iter().enumerate() {
            rows[i * n_mech + j].wall_time_s = median(ts);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScalingConfig {
        ScalingConfig {
            n_list: vec![64, 128],
            m: 8,
            d_e: 8,
            heads: 2,
            repeats: 3,
            ..ScalingConfig::default()
        }
    }

    #[test]
    fn guard_refuses_large_exact_runs() {
        let mut cfg = small();
        cfg.n_list = vec![4096, 16384];
        assert!(validate(&cfg, false).is_err());
        assert!(validate(&cfg, true).is_ok());
        cfg.mechanisms = vec![Mechanism::Soft];
        assert!(validate(&cfg, false).is_ok());
    }

    #[test]
    fn rejects_bad_lists() {
        let mut cfg = small();
        cfg.n_list = vec![128, 64];
        assert!(validate(&cfg, false).is_err());
        cfg.n_list = vec![64];
        cfg.repeats = 2;
        assert!(validate(&cfg, false).is_err());
    }

    #[test]
    fn untimed_rows_are_reproducible() {
        let a = run(&small(), 3, false, false).unwrap();
        let b = run(&small(), 3, false, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|r| r.wall_time_s == 0.0 && r.peak_bytes > 0));
    }

    #[test]
    fn timed_rows_are_positive() {
        let rows = run(&small(), 3, false, true).unwrap();
        assert!(rows.iter().all(|r| r.wall_time_s > 0.0));
    }
}
