use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use softattn_bench::config::{AblationAxis, RunConfig};
use softattn_bench::{ablate, heatmap, pinv_bench, scaling, train_toy, write_csv, write_csv_file};

#[derive(Parser)]
#[command(
    name = "softattn",
    version,
    about = "Benchmarks and experiments for softmax-free attention"
)]
struct Cli {
    /// JSON run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or file prefix for `heatmap`. Defaults to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow exact mechanisms above the size guard.
    #[arg(long, global = true)]
    force: bool,
    /// Report zero for every timing column.
    #[arg(long, global = true)]
    no_time: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time and memory of soft and exact attention across sequence lengths.
    BenchScaling {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Newton pseudoinverse residual traces on random Gram matrices.
    BenchPinv {
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Retrain the toy model over bottleneck lengths or sampling methods.
    Ablate {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated values; every valid value when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Attention heatmaps of one query token.
    Heatmap {
        /// Headerless CSV of tokens, one per line.
        input: Option<PathBuf>,
        #[arg(long)]
        query: Option<usize>,
    },
    /// Train the toy classifier and write its report as JSON.
    TrainToy,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Axis {
    Bottleneck,
    Sampling,
}

fn emit_csv<T: serde::Serialize>(out: &Option<PathBuf>, rows: &[T]) -> Result<()> {
    match out {
        Some(p) => write_csv_file(p, rows),
        None => write_csv(std::io::stdout().lock(), rows),
    }
}

/// Benchmarks allocate and drop multi-megabyte buffers in a loop. By default
/// glibc returns them to the kernel and refaults them on the next repeat,
/// but only above a size threshold it adjusts on the fly, which bends the
/// timing curve at arbitrary `n`. Keep freed memory in the process instead.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn retain_freed_memory() {
    // SAFETY: plain allocator tuning, called before any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn retain_freed_memory() {}

fn main() -> Result<()> {
    retain_freed_memory();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let timed = !cli.no_time;

    match cli.cmd {
        Command::BenchScaling { n, m, repeats } => {
            if let Some(n) = n {
                cfg.scaling.n_list = n;
            }
            if let Some(m) = m {
                cfg.scaling.m = m;
            }
            if let Some(r) = repeats {
                cfg.scaling.repeats = r;
            }
            let rows = scaling::run(&cfg.scaling, cfg.seed, cli.force, timed)?;
            emit_csv(&cli.out, &rows)?;
        }
        Command::BenchPinv { m, trials, iters } => {
            if let Some(m) = m {
                cfg.pinv.m_list = m;
            }
            if let Some(t) = trials {
                cfg.pinv.trials = t;
            }
            if let Some(i) = iters {
                cfg.pinv.max_iters = i;
            }
            let rows = pinv_bench::run(&cfg.pinv, &cfg.model.newton, cfg.seed)?;
            emit_csv(&cli.out, &rows)?;
        }
        Command::Ablate { axis, values } => {
            if let Some(a) = axis {
                cfg.ablate.axis = match a {
                    Axis::Bottleneck => AblationAxis::Bottleneck,
                    Axis::Sampling => AblationAxis::Sampling,
                };
            }
            if let Some(v) = values {
                cfg.ablate.values = v;
            }
            let rows = ablate::run(&cfg, timed)?;
            emit_csv(&cli.out, &rows)?;
        }
        Command::Heatmap { input, query } => {
            let input = input
                .or(cfg.heatmap.input.clone())
                .context("heatmap needs an input token CSV (argument or heatmap.input)")?;
            if let Some(q) = query {
                cfg.heatmap.query_index = q;
            }
            let tokens = heatmap::read_tokens(&input)?;
            let maps = heatmap::compute(tokens, &cfg.heatmap, &cfg.model.newton, cfg.seed)?;
            let prefix = cli.out.unwrap_or_else(|| PathBuf::from("heatmap"));
            for p in heatmap::write(&maps, &prefix)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::TrainToy => {
            let report = train_toy::run(&cfg, timed)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            match &cli.out {
                Some(p) => {
                    std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{json}"),
            }
        }
    }
    Ok(())
}
