//! Query rows of the approximate and exact attention matrices laid out on
//! the token grid.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softattn::attention::{nystrom_heads, AttentionConfig, DENSE_GUARD};
use softattn::kernel::{gaussian_attention_matrix, TokenSequence};
use softattn::pinv::NewtonConfig;
use softattn::sampling::SamplerSpec;
use softattn::{Error, Matrix};

use crate::config::HeatmapConfig;
use crate::grid_for;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub grid: (usize, usize),
    /// Row `query` of `Ŝ`, row-major over the grid.
    pub soft: Vec<f64>,
    /// Row `query` of `S`.
    pub exact: Vec<f64>,
}

/// Tokens from a headerless CSV, one token per line.
pub fn read_tokens(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            anyhow::bail!(
                "{}: line {} has {} values, expected {}",
                path.display(),
                i + 1,
                rec.len(),
                cols.unwrap()
            );
        }
        for field in rec.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .with_context(|| format!("{}: line {}: {field:?}", path.display(), i + 1))?,
            );
        }
        rows += 1;
    }
    Ok(Matrix::new(rows, cols.unwrap_or(0), data)?)
}

/// `h·w` tokens of dimension `d` whose features vary slowly over the grid:
/// each feature is a sum of three low-frequency plane waves.
pub fn smooth_token_field(h: usize, w: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = h.max(w) as f64;
    let mut out = Matrix::zeros(h * w, d);
    for j in 0..d {
        for _ in 0..3 {
            let fy = rng.random_range(-2.0..2.0) * std::f64::consts::PI / span;
            let fx = rng.random_range(-2.0..2.0) * std::f64::consts::PI / span;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.5);
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x, j)] += amp * (fy * y as f64 + fx * x as f64 + phase).sin();
                }
            }
        }
    }
    out
}

pub fn compute(
    tokens: Matrix,
    cfg: &HeatmapConfig,
    newton: &NewtonConfig,
    seed: u64,
) -> Result<Heatmaps> {
    let n = tokens.rows();
    let d = tokens.cols();
    if cfg.query_index >= n {
        return Err(
            Error::Domain(format!("query index {} is outside 0..{n}", cfg.query_index)).into(),
        );
    }
    if n > DENSE_GUARD {
        return Err(Error::Domain(format!(
            "heatmaps materialise n x n matrices; n = {n} exceeds {DENSE_GUARD}"
        ))
        .into());
    }
    let grid = cfg.grid.map(|[h, w]| (h, w)).unwrap_or_else(|| grid_for(n));
    let q = TokenSequence::new(tokens, grid.0, grid.1)?;
    let m = cfg.m.unwrap_or((n / 4).max(1));
    let spec = SamplerSpec::for_grid(cfg.sampler, grid, m, seed)?;
    let att = AttentionConfig::new(d, 1, spec)?.with_newton(newton.clone());
    let heads = nystrom_heads(&q, &att)?;
    let s_hat = heads[0].s_hat()?;
    let s = gaussian_attention_matrix(q.features(), q.features(), d)?;
    Ok(Heatmaps {
        grid,
        soft: s_hat.row(cfg.query_index).to_vec(),
        exact: s.row(cfg.query_index).to_vec(),
    })
}

/// `H` lines of `W` comma-separated values.
pub fn grid_csv(values: &[f64], grid: (usize, usize)) -> String {
    let mut s = String::new();
    for row in values.chunks(grid.1) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Binary PGM, min-max normalised to 0..=255. A constant map renders as 0.
pub fn pgm(values: &[f64], grid: (usize, usize)) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", grid.1, grid.0).into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `<prefix>_soft.csv`, `<prefix>_exact.csv` and the matching
/// `.pgm` files; returns the paths written.
pub fn write(maps: &Heatmaps, prefix: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (tag, values) in [("soft", &maps.soft), ("exact", &maps.exact)] {
        let base = prefix.as_os_str().to_string_lossy();
        let csv_path = PathBuf::from(format!("{base}_{tag}.csv"));
        let pgm_path = PathBuf::from(format!("{base}_{tag}.pgm"));
        std::fs::write(&csv_path, grid_csv(values, maps.grid))
            .with_context(|| format!("writing {}", csv_path.display()))?;
        std::fs::File::create(&pgm_path)
            .and_then(|mut f| f.write_all(&pgm(values, maps.grid)))
            .with_context(|| format!("writing {}", pgm_path.display()))?;
        written.extend([csv_path, pgm_path]);
    }
    Ok(written)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_row_peaks_at_query() {
        let tokens = smooth_token_field(8, 8, 4, 1);
        let cfg = HeatmapConfig {
            query_index: 19,
            ..HeatmapConfig::default()
        };
        let maps = compute(tokens, &cfg, &NewtonConfig::default(), 0).unwrap();
        assert_eq!(maps.exact[19], 1.0);
        assert!(maps.exact.iter().all(|&v| v <= 1.0));
    }

    #[test]
    fn identical_tokens_are_flat() {
        let tokens = Matrix::filled(16, 3, 0.4);
        let maps = compute(
            tokens,
            &HeatmapConfig::default(),
            &NewtonConfig::default(),
            0,
        )
        .unwrap();
        assert!(maps.exact.iter().all(|&v| v == 1.0));
        let first = maps.soft[0];
        assert!(
            maps.soft.iter().all(|&v| (v - first).abs() <= 1e-9),
            "{:?}",
            maps.soft
        );
        assert!(pgm(&maps.exact, maps.grid)[11..].iter().all(|&b| b == 0));
    }

    #[test]
    fn query_out_of_range() {
        let cfg = HeatmapConfig {
            query_index: 16,
            ..HeatmapConfig::default()
        };
        let err = compute(
            Matrix::filled(16, 2, 1.0),
            &cfg,
            &NewtonConfig::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(
            err.downcast_ref::<Error>(),
            Some(Error::Domain(_))
        ));
    }

    #[test]
    fn pgm_header_and_range() {
        let img = pgm(&[0.0, 0.5, 1.0, 2.0, 1.0, 0.0], (2, 3));
        assert!(img.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&img[11..], &[0, 64, 128, 255, 128, 0]);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(grid_csv(&[1.0, 0.25, 3.0, 4.5], (2, 2)), "1,0.25\n3,4.5\n");
    }

    #[test]
    fn pearson_of_affine_copy() {
        let a = [1.0, 2.0, 4.0, 3.0];
        let b: Vec<f64> = a.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-12);
    }
}
