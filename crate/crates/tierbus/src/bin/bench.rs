//! Evaluation orchestrator: runs the measurement scenarios against a
//! broker child process and writes plot-ready CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use tierbus::bench::{
    plateau_band, spearman, write_cpu_csv, write_ideal_csv, write_samples_csv, write_summary_row,
    BenchPipeline, PipelineOpts, RunReport, CPU_CSV_HEADER, IDEAL_CSV_HEADER, SAMPLES_CSV_HEADER,
    SUMMARY_CSV_HEADER,
};
use tierbus::broker::BrokerMode;

#[derive(Parser, Debug)]
#[command(name = "bench", about = "pipeline evaluation scenarios")]
struct Args {
    /// single | burst | sweep | periodic
    #[arg(long)]
    scenario: String,
    /// secure | regular
    #[arg(long, default_value = "regular")]
    mode: BrokerMode,
    /// Output directory for the CSV files.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Explicit rate ladder for the sweep (messages/s); measured
    /// saturation drives a geometric ladder when omitted.
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    repeats: u32,
    /// Seconds per sweep repeat.
    #[arg(long, default_value_t = 3.0)]
    duration_s: f64,
    /// Burst size (desk scale default; --paper-scale raises it).
    #[arg(long)]
    total: Option<u64>,
    /// Samples for the single-message scenario.
    #[arg(long, default_value_t = 60)]
    count: u64,
    /// Interval between single-message publications, milliseconds.
    #[arg(long, default_value_t = 1000)]
    interval_ms: u64,
    /// Per-cycle rate for the periodic scenario.
    #[arg(long, default_value_t = 1000)]
    rate: u64,
    /// Paper-scale settings: burst of one million, sixty repeats.
    #[arg(long)]
    paper_scale: bool,
    /// Broker ingress queue capacity.
    #[arg(long, default_value_t = 65_536)]
    capacity: usize,
    /// Per-message overhead hook (ns) in secure mode.
    #[arg(long, default_value_t = 0)]
    overhead_ns: u64,
    /// Broker executable; defaults to the sibling "broker" binary.
    #[arg(long)]
    broker_exe: Option<PathBuf>,
    /// Run the broker inside this process (no CPU isolation).
    #[arg(long)]
    in_process_broker: bool,
    /// Publish straight to the broker, skipping the gateway hop.
    #[arg(long)]
    direct: bool,
}

fn sibling_binary(name: &str) -> anyhow::Result<PathBuf> {
    let exe = std::env::current_exe()?;
    let dir = exe.parent().context("bench executable has no parent")?;
    let candidate = dir.join(name);
    if candidate.is_file() {
        Ok(candidate)
    } else {
        anyhow::bail!("{} not found next to bench; pass --broker-exe", candidate.display())
    }
}

struct OutFiles {
    samples: BufWriter<File>,
    cpu: BufWriter<File>,
    summary: BufWriter<File>,
    ideal: BufWriter<File>,
}

impl OutFiles {
    fn create(dir: &Path) -> anyhow::Result<OutFiles> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> anyhow::Result<BufWriter<File>> {
            let mut f = BufWriter::new(File::create(dir.join(name))?);
            writeln!(f, "{header}")?;
            Ok(f)
        };
        Ok(OutFiles {
            samples: open("samples.csv", SAMPLES_CSV_HEADER)?,
            cpu: open("cpu.csv", CPU_CSV_HEADER)?,
            summary: open("summary.csv", SUMMARY_CSV_HEADER)?,
            ideal: open("ideal_vs_actual.csv", IDEAL_CSV_HEADER)?,
        })
    }

    fn record(&mut self, report: &RunReport) -> anyhow::Result<()> {
        write_samples_csv(&mut self.samples, report)?;
        write_cpu_csv(&mut self.cpu, report)?;
        write_summary_row(&mut self.summary, report)?;
        Ok(())
    }

    fn flush(&mut self) -> anyhow::Result<()> {
        self.samples.flush()?;
        self.cpu.flush()?;
        self.summary.flush()?;
        self.ideal.flush()?;
        Ok(())
    }
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let broker_exe = if args.in_process_broker {
        None
    } else {
        Some(match &args.broker_exe {
            Some(p) => p.clone(),
            None => sibling_binary("broker")?,
        })
    };
    let opts = PipelineOpts {
        mode: args.mode,
        capacity: args.capacity,
        subscriber_buffer: 1 << 17,
        overhead_ns: args.overhead_ns,
        broker_exe,
        direct: args.direct,
    };
    let mut out = OutFiles::create(&args.out)?;
    let mut pipeline =
        BenchPipeline::start(opts).map_err(|e| anyhow::anyhow!("pipeline startup: {e}"))?;
    let run = |e: tierbus::clients::ClientError| anyhow::anyhow!("scenario run: {e}");

    match args.scenario.as_str() {
        "single" => {
            let report = pipeline
                .run_single(args.count, Duration::from_millis(args.interval_ms))
                .map_err(run)?;
            out.record(&report)?;
            println!(
                "single mode={:?}: {} samples, mean {:.1} us, p99 {} us, max {} us, loss {}",
                args.mode,
                report.received,
                report.stats.mean_us,
                report.stats.p99_us,
                report.stats.max_us,
                report.sent - report.received
            );
        }
        "burst" => {
            let total = args
                .total
                .unwrap_or(if args.paper_scale { 1_000_000 } else { 100_000 });
            let report = pipeline.run_burst(total).map_err(run)?;
            out.record(&report)?;
            let max_depth = report.queue.iter().map(|q| q.1).max().unwrap_or(0);
            println!(
                "burst mode={:?}: {}/{} delivered in {} ms, p50 {} us, max queue depth {} (capacity {})",
                args.mode, report.received, report.sent, report.wall_ms,
                report.stats.p50_us, max_depth, args.capacity
            );
            // plateau over the saturated phase
            if let Some(t_sat) = report
                .queue
                .iter()
                .find(|(_, d)| *d * 100 >= args.capacity * 95)
                .map(|(t, _)| *t)
            {
                let start = report.samples.first().map(|s| s.send_us).unwrap_or(0);
                let lats: Vec<u64> = report
                    .samples
                    .iter()
                    .filter(|s| s.send_us.saturating_sub(start) >= t_sat + 500_000)
                    .map(|s| s.latency_us())
                    .collect();
                if let Some(band) = plateau_band(&lats) {
                    println!(
                        "plateau: p10 {} us, median {} us, p90 {} us, bounded band: {}",
                        band.p10_us,
                        band.median_us,
                        band.p90_us,
                        band.is_bounded()
                    );
                }
            }
        }
        "sweep" => {
            let repeats = if args.paper_scale { 60 } else { args.repeats };
            let rates = match &args.rates {
                Some(r) => r.clone(),
                None => {
                    let sat = pipeline.estimate_saturation(50_000).map_err(run)?;
                    pipeline.quiesce().map_err(run)?;
                    println!("estimated saturation: {sat:.0} msg/s");
                    vec![sat / 8.0, sat / 4.0, sat / 2.0, sat, 2.0 * sat]
                }
            };
            let entries = pipeline
                .run_rate_sweep(&rates, repeats, Duration::from_secs_f64(args.duration_s))
                .map_err(run)?;
            for e in &entries {
                for r in &e.reports {
                    out.record(r)?;
                }
                println!(
                    "rate {:>9.0}/s: {} ({}/{} votes), broker cpu {} ms",
                    e.rate_hz,
                    if e.sustainable { "sustainable" } else { "saturating" },
                    e.sustainable_votes,
                    e.repeats,
                    e.cpu_ms
                );
            }
            let sustainable: Vec<&_> = entries.iter().filter(|e| e.sustainable).collect();
            if let Some(max) = sustainable.last() {
                println!("max sustainable rate: {:.0}/s", max.rate_hz);
            }
            if sustainable.len() >= 2 {
                let xs: Vec<f64> = sustainable.iter().map(|e| e.rate_hz).collect();
                let ys: Vec<f64> = sustainable.iter().map(|e| e.cpu_ms as f64).collect();
                println!("cpu-vs-rate spearman over sustainable rates: {:.3}", spearman(&xs, &ys));
            }
        }
        "periodic" => {
            let (report, ideal, start_us) = pipeline
                .run_periodic(args.rate, Duration::from_secs(1), 2)
                .map_err(run)?;
            out.record(&report)?;
            write_ideal_csv(&mut out.ideal, &report, &ideal, start_us)?;
            let deviations: Vec<u64> = report
                .samples
                .iter()
                .zip(&ideal)
                .map(|(s, i)| s.recv_us.saturating_sub(start_us).saturating_sub(*i))
                .collect();
            let min = deviations.iter().min().copied().unwrap_or(0);
            let mean =
                deviations.iter().sum::<u64>() as f64 / deviations.len().max(1) as f64 - min as f64;
            println!(
                "periodic rate={}x2 cycles mode={:?}: mean deviation from ideal {:.1} us",
                args.rate, args.mode, mean
            );
        }
        other => anyhow::bail!("unknown scenario {other:?} (single|burst|sweep|periodic)"),
    }

    out.flush()?;
    pipeline.shutdown();
    println!("wrote {}", args.out.display());
    Ok(())
}
