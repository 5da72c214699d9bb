//! Evaluation harness: drives the full pipeline through the paper-style
//! scenarios (single publication, burst, rate sweep, periodic bursts),
//! records per-message latency plus broker CPU/queue series, and emits
//! plot-ready CSV.

mod harness;

pub use harness::{BenchPipeline, MetricsProbe, PipelineOpts};

use std::io::Write;

use crate::broker::BrokerMode;

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioKind {
    SingleMessage,
    Burst { total: u64 },
    RateSweep { rates: Vec<u64> },
    PeriodicBurst { rate: u64, period_ms: u64 },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub mode: BrokerMode,
    pub repeats: u32,
    pub duration_s: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        if self.repeats < 1 {
            return Err("repeats must be at least 1".to_string());
        }
        if let ScenarioKind::RateSweep { rates } = &self.kind {
            if rates.is_empty() {
                return Err("rate sweep needs at least one rate".to_string());
            }
        }
        Ok(())
    }
}

/// One end-to-end observation: producer send to consumer receive, one
/// host, one clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub seq: u64,
    pub send_us: u64,
    pub recv_us: u64,
}

impl Sample {
    pub fn latency_us(&self) -> u64 {
        self.recv_us.saturating_sub(self.send_us)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_us: f64,
    pub min_us: u64,
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl LatencyStats {
    pub fn from_latencies(lats: &[u64]) -> LatencyStats {
        if lats.is_empty() {
            return LatencyStats {
                count: 0,
                mean_us: 0.0,
                min_us: 0,
                p50_us: 0,
                p90_us: 0,
                p99_us: 0,
                max_us: 0,
            };
        }
        let mut sorted = lats.to_vec();
        sorted.sort_unstable();
        let sum: u128 = sorted.iter().map(|&l| l as u128).sum();
        LatencyStats {
            count: sorted.len() as u64,
            mean_us: sum as f64 / sorted.len() as f64,
            min_us: sorted[0],
            p50_us: percentile_sorted(&sorted, 0.50),
            p90_us: percentile_sorted(&sorted, 0.90),
            p99_us: percentile_sorted(&sorted, 0.99),
            max_us: *sorted.last().unwrap(),
        }
    }

    pub fn from_samples(samples: &[Sample]) -> LatencyStats {
        let lats: Vec<u64> = samples.iter().map(|s| s.latency_us()).collect();
        LatencyStats::from_latencies(&lats)
    }
}

/// Nearest-rank percentile over a sorted slice.
pub fn percentile_sorted(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((sorted.len() as f64) * q).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Everything one scenario run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: String,
    pub mode: BrokerMode,
    pub rate: f64,
    pub sent: u64,
    pub received: u64,
    pub base_seq: u64,
    pub samples: Vec<Sample>,
    /// Open-loop schedule (unix micros per seq offset); empty for blast
    /// runs. `send_us` in samples is the actual enqueue instant and lags
    /// the schedule once back-pressure blocks the sender.
    pub sched_us: Vec<u64>,
    pub stats: LatencyStats,
    /// (elapsed_ms, broker cpu_ms) series.
    pub cpu: Vec<(u64, u64)>,
    /// (elapsed_us, queue_depth) series.
    pub queue: Vec<(u64, usize)>,
    pub wall_ms: u64,
    pub sustainable: Option<bool>,
}

impl RunReport {
    /// Stats must be recomputable from the raw samples exactly.
    pub fn verify_stats(&self) -> bool {
        LatencyStats::from_samples(&self.samples) == self.stats
    }

    /// Samples re-stamped at the scheduled send instants. This is the
    /// coordinated-omission-free view: under overload the latency of a
    /// blocked sender keeps growing instead of hiding in the send stamp.
    pub fn open_loop_samples(&self) -> Vec<Sample> {
        if self.sched_us.is_empty() {
            return self.samples.clone();
        }
        self.samples
            .iter()
            .filter_map(|s| {
                let idx = (s.seq - self.base_seq) as usize;
                self.sched_us.get(idx).map(|&sched| Sample {
                    seq: s.seq,
                    send_us: sched,
                    recv_us: s.recv_us.max(sched),
                })
            })
            .collect()
    }
}

/// Median latency per send-time window; windows with no samples are
/// skipped by the callers.
pub fn window_medians(samples: &[Sample], windows: usize) -> Vec<Option<u64>> {
    if samples.is_empty() || windows == 0 {
        return vec![None; windows];
    }
    let start = samples.iter().map(|s| s.send_us).min().unwrap();
    let end = samples.iter().map(|s| s.send_us).max().unwrap().max(start + 1);
    let span = end - start;
    let mut buckets: Vec<Vec<u64>> = vec![Vec::new(); windows];
    for s in samples {
        let idx = (((s.send_us - start) as u128 * windows as u128) / (span as u128 + 1)) as usize;
        buckets[idx.min(windows - 1)].push(s.latency_us());
    }
    buckets
        .into_iter()
        .map(|mut b| {
            if b.is_empty() {
                None
            } else {
                b.sort_unstable();
                Some(b[b.len() / 2])
            }
        })
        .collect()
}

/// Open-loop sustainability: at a sustainable rate the median latency is
/// flat over the run; past saturation the backlog (hence latency) keeps
/// growing. Compares early vs late window medians with both a ratio and
/// an absolute floor so tiny-latency noise cannot flip the verdict.
pub fn is_sustainable(samples: &[Sample]) -> bool {
    const WINDOWS: usize = 8;
    let medians: Vec<u64> = window_medians(samples, WINDOWS)
        .into_iter()
        .flatten()
        .collect();
    if medians.len() < 4 {
        return true; // too little data to call it saturating
    }
    // skip the first window (connection warmup)
    let early = medians[1].max(1);
    let late = *medians.last().unwrap();
    !(late > 3 * early && late - early > 5_000)
}

/// p10/median/p90 of the saturated phase.
#[derive(Debug, Clone, Copy)]
pub struct PlateauBand {
    pub p10_us: u64,
    pub median_us: u64,
    pub p90_us: u64,
}

impl PlateauBand {
    /// The bounded-plateau property: the p10..p90 band stays within half
    /// the median.
    pub fn is_bounded(&self) -> bool {
        self.p90_us.saturating_sub(self.p10_us) * 2 <= self.median_us
    }
}

pub fn plateau_band(latencies: &[u64]) -> Option<PlateauBand> {
    if latencies.is_empty() {
        return None;
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    Some(PlateauBand {
        p10_us: percentile_sorted(&sorted, 0.10),
        median_us: percentile_sorted(&sorted, 0.50),
        p90_us: percentile_sorted(&sorted, 0.90),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 1.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..n {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let mut ranks = vec![0.0; vals.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub const SAMPLES_CSV_HEADER: &str = "scenario,mode,rate,seq,send_us,recv_us,latency_us";
pub const CPU_CSV_HEADER: &str = "scenario,mode,rate,t_ms,cpu_ms";
pub const SUMMARY_CSV_HEADER: &str =
    "scenario,mode,rate,sent,received,mean_us,p50_us,p90_us,p99_us,max_us,wall_ms,sustainable";
pub const IDEAL_CSV_HEADER: &str = "scenario,mode,rate,seq,ideal_us,recv_us";

fn mode_name(mode: BrokerMode) -> &'static str {
    match mode {
        BrokerMode::SecureSim => "secure",
        BrokerMode::Regular => "regular",
    }
}

pub fn write_samples_csv<W: Write>(w: &mut W, report: &RunReport) -> std::io::Result<()> {
    for s in &report.samples {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            report.scenario,
            mode_name(report.mode),
            report.rate,
            s.seq,
            s.send_us,
            s.recv_us,
            s.latency_us()
        )?;
    }
    Ok(())
}

pub fn write_cpu_csv<W: Write>(w: &mut W, report: &RunReport) -> std::io::Result<()> {
    for (t_ms, cpu_ms) in &report.cpu {
        writeln!(
            w,
            "{},{},{},{},{}",
            report.scenario,
            mode_name(report.mode),
            report.rate,
            t_ms,
            cpu_ms
        )?;
    }
    Ok(())
}

pub fn write_summary_row<W: Write>(w: &mut W, report: &RunReport) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{:.1},{},{},{},{},{},{}",
        report.scenario,
        mode_name(report.mode),
        report.rate,
        report.sent,
        report.received,
        report.stats.mean_us,
        report.stats.p50_us,
        report.stats.p90_us,
        report.stats.p99_us,
        report.stats.max_us,
        report.wall_ms,
        report
            .sustainable
            .map(|s| if s { "yes" } else { "no" })
            .unwrap_or("-"),
    )
}

/// The send-vs-ideal overlay rows: `ideal_us` is the scheduled send
/// instant, `recv_us` the observed delivery, both relative to run start.
pub fn write_ideal_csv<W: Write>(
    w: &mut W,
    report: &RunReport,
    ideal_us: &[u64],
    start_us: u64,
) -> std::io::Result<()> {
    for (s, ideal) in report.samples.iter().zip(ideal_us) {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            report.scenario,
            mode_name(report.mode),
            report.rate,
            s.seq,
            ideal,
            s.recv_us.saturating_sub(start_us)
        )?;
    }
    Ok(())
}
