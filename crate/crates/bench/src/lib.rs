//! Benchmarks, ablations and heatmap dumps for the `softattn` crate, plus
//! the `softattn` command-line front end built on them.

pub mod ablate;
pub mod config;
pub mod heatmap;
pub mod pinv_bench;
pub mod scaling;
pub mod train_toy;

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

pub use config::RunConfig;

/// `(H, W)` with `H` the largest divisor of `n` that is at most `√n`.
pub fn grid_for(n: usize) -> (usize, usize) {
    let h = (1..=n)
        .take_while(|h| h * h <= n)
        .filter(|h| n.is_multiple_of(*h))
        .last()
        .unwrap_or(1);
    (h, n / h.max(1))
}

/// CSV with a header taken from the row type, `\n` line endings and
/// shortest round-trip float formatting.
pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(std::io::BufWriter::new(f), rows)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[k]
    } else {
        0.5 * (xs[k - 1] + xs[k])
    }
}
