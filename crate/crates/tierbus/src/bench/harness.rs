//! Orchestrates a measurable pipeline: attestor, broker (child process
//! or in-process), dispatcher gateway, one sealed producer path, and an
//! attested consumer. The load generator is open loop — sends follow a
//! fixed schedule and fall behind only by queueing, never by slowing the
//! schedule — so saturation shows up as growing latency.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ed25519_dalek::SigningKey;
use rand::rngs::OsRng;
use rand::RngCore;

use super::{LatencyStats, RunReport, Sample};
use crate::attestation::{
    AttestClient, Attestor, AttestorServer, EnclaveIdentity, PlatformKey, Policy, Role,
};
use crate::broker::{
    ctl_frame, encode_metrics_req, parse_metrics_resp, BrokerMode, BrokerServer, MetricsSnapshot,
    QueueConfig,
};
use crate::clients::{
    ClientError, Consumer, ConsumerConfig, DecodedRecord, Dispatcher, DispatcherHandle, Mdc,
    RetryPolicy, UplinkConn,
};
use crate::crypto::{code_hash, DataKey};
use crate::envelope::{
    write_frame, LevelSet, Measurement, PrivacyLevel, TopicFilter, TOPIC_CTL, TOPIC_METER,
};
use crate::sys::{cpu_time_ms, unix_micros, unix_millis};

#[derive(Debug, Clone)]
pub struct PipelineOpts {
    pub mode: BrokerMode,
    pub capacity: usize,
    pub subscriber_buffer: usize,
    pub overhead_ns: u64,
    /// Run the broker as this executable (child process); `None` keeps it
    /// in-process. CPU series are only meaningful with a child broker.
    pub broker_exe: Option<PathBuf>,
    /// Skip the gateway hop and publish straight to the broker.
    pub direct: bool,
}

impl Default for PipelineOpts {
    fn default() -> Self {
        PipelineOpts {
            mode: BrokerMode::Regular,
            capacity: 65_536,
            subscriber_buffer: 1 << 17,
            overhead_ns: 0,
            broker_exe: None,
            direct: false,
        }
    }
}

enum BrokerUnderTest {
    InProcess(BrokerServer),
    Child { child: Child },
}

/// Persistent control connection for high-rate metrics sampling.
pub struct MetricsProbe {
    reader: crate::envelope::FrameReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl MetricsProbe {
    pub fn connect(addr: &str) -> std::io::Result<MetricsProbe> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        Ok(MetricsProbe {
            reader: crate::envelope::FrameReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn sample(&mut self) -> Result<MetricsSnapshot, ClientError> {
        write_frame(&mut self.writer, &ctl_frame(0, encode_metrics_req()))?;
        self.writer.flush()?;
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            match self.reader.poll_frame()? {
                Some(frame) if frame.header().topic().as_str() == TOPIC_CTL => {
                    return parse_metrics_resp(frame.payload())
                        .ok_or(ClientError::Timeout("metrics response"));
                }
                Some(_) => {}
                None => {
                    if Instant::now() >= deadline {
                        return Err(ClientError::Timeout("metrics response"));
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Schedule {
    /// As fast as the pipe accepts.
    Blast { total: u64 },
    /// Open loop at a fixed rate; late sends catch up without skipping.
    Paced { rate_hz: f64, total: u64 },
}

impl Schedule {
    fn total(&self) -> u64 {
        match self {
            Schedule::Blast { total } | Schedule::Paced { total, .. } => *total,
        }
    }

    fn rate(&self) -> f64 {
        match self {
            Schedule::Blast { .. } => 0.0,
            Schedule::Paced { rate_hz, .. } => *rate_hz,
        }
    }
}

/// Sleep-then-spin pacing: sleep while far out, spin the last stretch so
/// sub-millisecond schedules hold.
fn pace_until(target: Instant) {
    loop {
        let now = Instant::now();
        if now >= target {
            return;
        }
        let remaining = target - now;
        if remaining > Duration::from_micros(500) {
            std::thread::sleep(remaining - Duration::from_micros(300));
        } else {
            // yield instead of spinning so the rest of the pipeline gets
            // the core on small machines
            std::thread::yield_now();
        }
    }
}

pub struct BenchPipeline {
    pub broker_addr: String,
    pub publisher_id: u64,
    attestor: AttestorServer,
    broker: BrokerUnderTest,
    dispatcher: DispatcherHandle,
    uplink: Arc<UplinkConn>,
    mdc: Mdc,
    consumer: Consumer,
    next_seq: u64,
    broker_pid: u32,
    mode: BrokerMode,
}

impl BenchPipeline {
    pub fn start(opts: PipelineOpts) -> Result<BenchPipeline, ClientError> {
        let platform = PlatformKey::generate();
        let producer_code = code_hash(b"bench producer");
        let consumer_code = code_hash(b"bench consumer");
        let mut policy = Policy::new(30_000);
        policy.allow(Role::Producer, producer_code);
        policy.allow(Role::Consumer, consumer_code);
        let attestor = AttestorServer::start(
            "127.0.0.1:0",
            Attestor::new(policy, platform.verifying_key()),
        )?;

        let (broker, broker_addr, broker_pid) = match &opts.broker_exe {
            None => {
                let server = BrokerServer::start(
                    "127.0.0.1:0",
                    QueueConfig {
                        capacity: opts.capacity,
                        mode: opts.mode,
                        subscriber_buffer: opts.subscriber_buffer,
                        overhead_ns: opts.overhead_ns,
                    },
                )?;
                let addr = server.local_addr().to_string();
                (BrokerUnderTest::InProcess(server), addr, std::process::id())
            }
            Some(exe) => {
                let mut child = Command::new(exe)
                    .arg("--listen")
                    .arg("127.0.0.1:0")
                    .arg("--mode")
                    .arg(match opts.mode {
                        BrokerMode::SecureSim => "secure",
                        BrokerMode::Regular => "regular",
                    })
                    .arg("--capacity")
                    .arg(opts.capacity.to_string())
                    .arg("--subscriber-buffer")
                    .arg(opts.subscriber_buffer.to_string())
                    .arg("--overhead-ns")
                    .arg(opts.overhead_ns.to_string())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdout = child.stdout.take().expect("piped stdout");
                let mut lines = BufReader::new(stdout).lines();
                let mut addr = None;
                for line in &mut lines {
                    let line = line?;
                    if let Some(rest) = line.strip_prefix("READY ") {
                        addr = Some(rest.trim().to_string());
                        break;
                    }
                }
                let addr = addr.ok_or(ClientError::Timeout("broker READY line"))?;
                // keep the pipe drained so the child never blocks on stdout
                std::thread::spawn(move || for _ in lines.flatten() {});
                let pid = child.id();
                (BrokerUnderTest::Child { child }, addr, pid)
            }
        };

        let dispatcher = Dispatcher {
            broker_addr: broker_addr.clone(),
            byte_log: None,
            retry: RetryPolicy::default(),
        }
        .start()?;

        // producer side: attest, deposit key, register on the bus
        let publisher_id = 1;
        let mut attest = AttestClient::connect(&attestor.local_addr().to_string(), publisher_id)?;
        let outcome = attest.attest(
            &platform,
            EnclaveIdentity {
                code: producer_code,
                platform_id: publisher_id,
                role: Role::Producer,
            },
            &[],
        )?;
        if let Err(reason) = outcome {
            return Err(ClientError::AttestationRejected(reason));
        }
        let mut seed = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        let mdc = Mdc::new(publisher_id, DataKey::generate(0), SigningKey::from_bytes(&seed));
        if !attest.register_data_key(publisher_id, mdc.data_key())? {
            return Err(ClientError::Timeout("data key registration"));
        }
        let uplink = Arc::new(if opts.direct {
            UplinkConn::connect_direct(&broker_addr, publisher_id)?
        } else {
            UplinkConn::connect_via_dispatcher(&dispatcher.local_addr().to_string(), publisher_id)?
        });
        uplink.register_publisher(publisher_id, &mdc.verifying_key())?;

        // consumer side: attach first, then the publisher-signed
        // subscription goes straight to the broker
        let mut consumer = Consumer::connect(&ConsumerConfig {
            subscriber_id: 100,
            broker_addr: broker_addr.clone(),
            attestor_addr: Some(attestor.local_addr().to_string()),
            platform: Some(platform.clone()),
            code: Some(consumer_code),
            producer_auth_addr: None,
            publisher_id,
            topic_filter: TOPIC_METER.to_string(),
            levels: LevelSet::of(&[PrivacyLevel::High]),
        })?;
        let sub = mdc.authorize_subscription(
            100,
            TopicFilter::parse(TOPIC_METER)?,
            LevelSet::of(&[PrivacyLevel::High]),
        );
        uplink.submit_subscription(&sub)?;
        // belt and braces: the attested consumer already holds epoch 0
        if consumer.decode_failures() > 0 {
            let _ = &mut consumer;
        }

        Ok(BenchPipeline {
            broker_addr,
            publisher_id,
            attestor,
            broker,
            dispatcher,
            uplink,
            mdc,
            consumer,
            next_seq: 0,
            broker_pid,
            mode: opts.mode,
        })
    }

    pub fn mode(&self) -> BrokerMode {
        self.mode
    }

    pub fn broker_pid(&self) -> u32 {
        self.broker_pid
    }

    pub fn broker_cpu_ms(&self) -> u64 {
        cpu_time_ms(self.broker_pid).unwrap_or(0)
    }

    pub fn metrics_probe(&self) -> std::io::Result<MetricsProbe> {
        MetricsProbe::connect(&self.broker_addr)
    }

    /// Drive one schedule through the pipe and collect every sample.
    fn drive(&mut self, schedule: Schedule, scenario: &str) -> Result<RunReport, ClientError> {
        let total = schedule.total();
        let base_seq = self.next_seq;
        self.next_seq += total;

        let queue_samples = Arc::new(std::sync::Mutex::new(Vec::new()));
        let cpu_samples = Arc::new(std::sync::Mutex::new(Vec::new()));
        let poll_stop = Arc::new(AtomicBool::new(false));
        let poller = {
            let mut probe = self.metrics_probe()?;
            let queue_samples = Arc::clone(&queue_samples);
            let cpu_samples = Arc::clone(&cpu_samples);
            let stop = Arc::clone(&poll_stop);
            let pid = self.broker_pid;
            std::thread::Builder::new()
                .name("bench-poller".into())
                .spawn(move || {
                    let started = Instant::now();
                    let mut last_cpu = Instant::now() - Duration::from_secs(1);
                    while !stop.load(Ordering::Relaxed) {
                        if let Ok(snap) = probe.sample() {
                            queue_samples
                                .lock()
                                .unwrap()
                                .push((started.elapsed().as_micros() as u64, snap.queue_depth));
                        }
                        if last_cpu.elapsed() >= Duration::from_millis(500) {
                            last_cpu = Instant::now();
                            if let Ok(cpu) = cpu_time_ms(pid) {
                                cpu_samples
                                    .lock()
                                    .unwrap()
                                    .push((started.elapsed().as_millis() as u64, cpu));
                            }
                        }
                        std::thread::sleep(Duration::from_millis(5));
                    }
                })
                .expect("spawn poller")
        };

        let uplink = Arc::clone(&self.uplink);
        let mdc = self.mdc.clone();
        let meter_id = self.publisher_id;
        let producer = std::thread::Builder::new()
            .name("bench-loadgen".into())
            .spawn(move || -> Result<(Vec<u64>, Vec<u64>), ClientError> {
                let mut send_us = Vec::with_capacity(total as usize);
                let mut sched_us = Vec::new();
                let paced = matches!(schedule, Schedule::Paced { .. });
                if !paced {
                    uplink.set_autoflush(false);
                }
                let start = Instant::now();
                let start_us = unix_micros();
                for i in 0..total {
                    if let Schedule::Paced { rate_hz, .. } = schedule {
                        let offset = Duration::from_secs_f64(i as f64 / rate_hz);
                        sched_us.push(start_us + offset.as_micros() as u64);
                        pace_until(start + offset);
                    }
                    let m = Measurement {
                        meter_id,
                        timestamp_ms: unix_millis(),
                        value_mw: 5_000_000,
                        seq: base_seq + i,
                    };
                    let p = mdc.process(&m)?;
                    send_us.push(unix_micros());
                    uplink.publish(&p)?;
                    if !paced && (i + 1) % 512 == 0 {
                        uplink.flush()?;
                    }
                }
                uplink.flush()?;
                uplink.set_autoflush(true);
                Ok((send_us, sched_us))
            })
            .expect("spawn loadgen");

        // collector: every publication should come back decodable
        let mut recv: Vec<(u64, u64)> = Vec::with_capacity(total as usize);
        let stall_limit = Duration::from_secs(30);
        let debug = std::env::var_os("TIERBUS_DEBUG").is_some();
        while (recv.len() as u64) < total {
            match self.consumer.recv(stall_limit)? {
                Some(r) => {
                    if let DecodedRecord::Measurement(m) = r.record {
                        if m.seq >= base_seq {
                            recv.push((m.seq - base_seq, r.recv_us));
                            if debug && recv.len() % 2000 == 0 {
                                eprintln!("drive: received {}/{}", recv.len(), total);
                            }
                        }
                    }
                }
                None => break, // stalled; report what arrived
            }
        }
        if std::env::var_os("TIERBUS_DEBUG").is_some() {
            eprintln!("drive: collector done, received {}/{}", recv.len(), total);
        }
        let (send_us, sched_us) = producer.join().map_err(|_| ClientError::Closed)??;
        poll_stop.store(true, Ordering::Relaxed);
        let _ = poller.join();
        if std::env::var_os("TIERBUS_DEBUG").is_some() {
            eprintln!("drive: producer+poller joined, sent {}", send_us.len());
        }

        let mut samples: Vec<Sample> = recv
            .iter()
            .filter_map(|&(idx, recv_t)| {
                send_us.get(idx as usize).map(|&send_t| Sample {
                    seq: base_seq + idx,
                    send_us: send_t,
                    recv_us: recv_t,
                })
            })
            .collect();
        samples.sort_by_key(|s| s.seq);

        let wall_ms = match (send_us.first(), recv.iter().map(|r| r.1).max()) {
            (Some(&first), Some(last)) => last.saturating_sub(first) / 1000,
            _ => 0,
        };
        let stats = LatencyStats::from_samples(&samples);
        let cpu = std::mem::take(&mut *cpu_samples.lock().unwrap());
        let queue = std::mem::take(&mut *queue_samples.lock().unwrap());
        Ok(RunReport {
            scenario: scenario.to_string(),
            mode: self.mode,
            rate: schedule.rate(),
            sent: total,
            received: samples.len() as u64,
            base_seq,
            samples,
            sched_us,
            stats,
            cpu,
            queue,
            wall_ms,
            sustainable: None,
        })
    }

    /// Isolated publications at a fixed interval (paper setup: one per
    /// second, sixty times).
    pub fn run_single(&mut self, count: u64, interval: Duration) -> Result<RunReport, ClientError> {
        let rate_hz = 1.0 / interval.as_secs_f64();
        self.drive(
            Schedule::Paced {
                rate_hz,
                total: count,
            },
            "single",
        )
    }

    /// One producer blasting `total` publications as fast as the pipe
    /// accepts; the queue fills and back-pressure sets the pace.
    pub fn run_burst(&mut self, total: u64) -> Result<RunReport, ClientError> {
        self.drive(Schedule::Blast { total }, "burst")
    }

    /// Open-loop run at a fixed rate for a duration.
    pub fn run_rate(&mut self, rate_hz: f64, duration: Duration) -> Result<RunReport, ClientError> {
        let total = (rate_hz * duration.as_secs_f64()).round().max(1.0) as u64;
        let mut report = self.drive(
            Schedule::Paced {
                rate_hz,
                total,
            },
            "sweep",
        )?;
        report.sustainable = Some(super::is_sustainable(&report.open_loop_samples()));
        Ok(report)
    }

    /// Periodic-burst overlay: `cycles` one-period cycles at the given
    /// per-cycle rate. Returns the report plus the ideal (scheduled) send
    /// offsets for the send-vs-ideal curve.
    pub fn run_periodic(
        &mut self,
        rate_per_cycle: u64,
        period: Duration,
        cycles: u64,
    ) -> Result<(RunReport, Vec<u64>, u64), ClientError> {
        let total = rate_per_cycle * cycles;
        let rate_hz = rate_per_cycle as f64 / period.as_secs_f64();
        let start_us = unix_micros();
        let mut report = self.drive(
            Schedule::Paced {
                rate_hz,
                total,
            },
            "periodic",
        )?;
        report.scenario = "periodic".to_string();
        let ideal: Vec<u64> = (0..total)
            .map(|i| (i as f64 / rate_hz * 1e6) as u64)
            .collect();
        Ok((report, ideal, start_us))
    }

    /// Measured saturation: blast a probe batch and take the steady
    /// delivery rate.
    pub fn estimate_saturation(&mut self, probe: u64) -> Result<f64, ClientError> {
        let report = self.run_burst(probe)?;
        if report.samples.len() < 2 {
            return Err(ClientError::Timeout("saturation probe deliveries"));
        }
        let first = report.samples.iter().map(|s| s.recv_us).min().unwrap();
        let last = report.samples.iter().map(|s| s.recv_us).max().unwrap();
        let span_s = (last.saturating_sub(first)) as f64 / 1e6;
        if span_s <= 0.0 {
            return Err(ClientError::Timeout("saturation probe span"));
        }
        Ok(report.samples.len() as f64 / span_s)
    }

    /// Let in-flight traffic settle between runs.
    pub fn quiesce(&mut self) -> Result<(), ClientError> {
        while self.consumer.recv(Duration::from_millis(300))?.is_some() {}
        Ok(())
    }

    pub fn consumer_decode_failures(&self) -> u64 {
        self.consumer.decode_failures()
    }

    pub fn shutdown(mut self) {
        self.shutdown_in_place();
    }

    fn shutdown_in_place(&mut self) {
        match &mut self.broker {
            BrokerUnderTest::InProcess(server) => server.shutdown(),
            BrokerUnderTest::Child { child } => {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
        self.dispatcher.shutdown();
        self.attestor.shutdown();
    }
}

impl Drop for BenchPipeline {
    fn drop(&mut self) {
        self.shutdown_in_place();
    }
}

/// Per-rate aggregation of a sweep.
#[derive(Debug)]
pub struct SweepEntry {
    pub rate_hz: f64,
    pub repeats: u32,
    pub sustainable_votes: u32,
    pub sustainable: bool,
    /// Broker CPU consumed across this rate's repeats.
    pub cpu_ms: u64,
    pub reports: Vec<RunReport>,
}

impl BenchPipeline {
    pub fn run_rate_sweep(
        &mut self,
        rates: &[f64],
        repeats: u32,
        duration: Duration,
    ) -> Result<Vec<SweepEntry>, ClientError> {
        let mut entries = Vec::with_capacity(rates.len());
        for &rate in rates {
            self.quiesce()?;
            std::thread::sleep(Duration::from_millis(200));
            let cpu_before = self.broker_cpu_ms();
            let mut votes = 0u32;
            let mut reports = Vec::with_capacity(repeats as usize);
            for _ in 0..repeats {
                let report = self.run_rate(rate, duration)?;
                if report.sustainable == Some(true) {
                    votes += 1;
                }
                reports.push(report);
                self.quiesce()?;
            }
            let cpu_after = self.broker_cpu_ms();
            entries.push(SweepEntry {
                rate_hz: rate,
                repeats,
                sustainable_votes: votes,
                sustainable: votes * 2 > repeats,
                cpu_ms: cpu_after.saturating_sub(cpu_before),
                reports,
            });
        }
        Ok(entries)
    }
}
