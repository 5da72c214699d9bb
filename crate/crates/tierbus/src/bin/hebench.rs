//! Homomorphic-vs-symmetric aggregation benchmark.

use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use rand::rngs::OsRng;

use tierbus::hebaseline::{he_benchmark, total_mean_stddev, BenchRow, GroupParams, BENCH_CSV_HEADER};

#[derive(Parser, Debug)]
#[command(name = "hebench", about = "homomorphic aggregation baseline benchmark")]
struct Args {
    /// Batch sizes (meters or measurements aggregated together).
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,200,400,800,1000")]
    sizes: Vec<usize>,
    /// Timed repetitions per size.
    #[arg(long, default_value_t = 10)]
    runs: u32,
    /// Largest single reading in milliwatts.
    #[arg(long, default_value_t = 1 << 24)]
    reading_max: u64,
    /// rfc3526 (2048-bit, the honest comparison) or small (fast checks).
    #[arg(long, default_value = "rfc3526")]
    group: String,
    /// Write the CSV here (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let params = match args.group.as_str() {
        "rfc3526" => GroupParams::rfc3526_2048(),
        "small" => GroupParams::test_small(),
        other => anyhow::bail!("unknown group {other:?} (rfc3526 or small)"),
    };

    let rows = he_benchmark(&params, &args.sizes, args.runs, args.reading_max, &mut OsRng);

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for row in &rows {
        writeln!(out, "{}", row.csv_row())?;
    }
    out.flush()?;

    // per-size mean +/- stddev summary on stderr
    for &size in &args.sizes {
        for scheme in ["he", "symmetric"] {
            let subset: Vec<BenchRow> = rows
                .iter()
                .filter(|r| r.size == size && r.scheme == scheme)
                .cloned()
                .collect();
            let (mean, stddev) = total_mean_stddev(&subset);
            eprintln!(
                "{scheme:>9} size {size:>5}: total {:>12.1} us (stddev {:>10.1})",
                mean, stddev
            );
        }
    }
    Ok(())
}
