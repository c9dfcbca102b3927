//! Shaping overhead measurement.
//!
//! A seeded uniform-random stream is pushed through the in-process
//! ingest → shape → frame → decode pipeline once per constraint set, with no
//! sockets and no release timing, so the measured cost is shaping cost. Each
//! configuration is repeated and the fastest repetition is kept. Every run is
//! checked for losslessness before anything is reported.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;

use crate::clock::Timestamp;
use crate::constraint::ConstraintSet;
use crate::framing::FrameDecoder;
use crate::proxy::{self, EndpointStats, ProxyConfig, ProxyError, Role};
use crate::shaper::{ShapeBuffer, ShapeError, Shaper, ShaperConfig};
use crate::timer::TimingPolicy;

/// Size of the slices handed to ingest, similar to a socket read.
pub const INGEST_CHUNK: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub stream_size: usize,
    pub seed: u64,
    pub repeats: usize,
    pub profile: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            stream_size: 16 * 1024 * 1024,
            seed: 42,
            repeats: 3,
            profile: false,
        }
    }
}

/// Time spent per pipeline phase, summed over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseProfile {
    pub buffer: Duration,
    pub search: Duration,
    pub encode: Duration,
    pub decode: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub constraint_count: usize,
    /// Bytes per second, `None` when shaping failed.
    pub throughput: Option<f64>,
    pub elapsed: Duration,
    pub frames: u64,
    pub padding_bytes: u64,
    pub evaluations: u64,
    pub failure: Option<ShapeError>,
    pub profile: Option<PhaseProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub stream_size: usize,
    pub seed: u64,
    pub baseline_throughput: f64,
    pub runs: Vec<BenchRun>,
    /// `100 * (baseline - shaped_k) / baseline` per run, index-aligned.
    pub overhead_percent: Vec<Option<f64>>,
    /// Overhead added by run k over run k-1 in percentage points; index 0 is
    /// always `None`.
    pub incremental_overhead: Vec<Option<f64>>,
    pub padding_bytes_total: u64,
    pub shaping_failures: usize,
    pub wall_time: Duration,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("stream size must be at least 1 byte")]
    EmptyStream,
    #[error("at least one constraint set is required")]
    NoConfigurations,
    #[error("baseline configuration failed to shape: {0}")]
    BaselineFailed(ShapeError),
    #[error("run with {constraint_count} constraints was not lossless")]
    LossyRun { constraint_count: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub fn generate_stream(size: usize, seed: u64) -> Vec<u8> {
    let mut data = vec![0u8; size];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut data);
    data
}

struct RunOutput {
    recovered: Vec<u8>,
    frames: u64,
    padding_bytes: u64,
    evaluations: u64,
    elapsed: Duration,
    profile: Option<PhaseProfile>,
}

fn timed<T>(slot: Option<&mut Duration>, f: impl FnOnce() -> T) -> T {
    match slot {
        Some(slot) => {
            let start = Instant::now();
            let out = f();
            *slot += start.elapsed();
            out
        }
        None => f(),
    }
}

/// One pass over the stream. No clock is consulted, so only capacity
/// flushes fire until the end-of-stream drain.
fn run_pipeline(stream: &[u8], shaper: &Shaper, profile: bool) -> Result<RunOutput, ShapeError> {
    let mut prof = profile.then(PhaseProfile::default);
    let mut buffer: ShapeBuffer = shaper.new_buffer();
    let mut decoder = FrameDecoder::new();
    let mut recovered = Vec::with_capacity(stream.len());
    let (mut frames, mut padding_bytes, mut evaluations) = (0u64, 0u64, 0u64);
    let config = shaper.config();

    let start = Instant::now();
    let mut emit = |buffer: &mut ShapeBuffer, prof: &mut Option<PhaseProfile>| {
        let candidate = timed(prof.as_mut().map(|p| &mut p.search), || {
            shaper.search_next(buffer)
        })?;
        let frame = timed(prof.as_mut().map(|p| &mut p.encode), || {
            shaper.commit(buffer, candidate)
        });
        timed(prof.as_mut().map(|p| &mut p.decode), || {
            decoder
                .feed(&frame.bytes, |_, payload| {
                    recovered.extend_from_slice(payload)
                })
                .expect("shaper emits well-formed frames")
        });
        frames += 1;
        padding_bytes += frame.padding_len as u64;
        evaluations += frame.evaluations;
        Ok::<_, ShapeError>(())
    };

    for chunk in stream.chunks(INGEST_CHUNK) {
        timed(prof.as_mut().map(|p| &mut p.buffer), || {
            buffer.ingest(chunk, Timestamp::ZERO)
        })?;
        while buffer.pending_len() >= config.payload_capacity() {
            emit(&mut buffer, &mut prof)?;
        }
    }
    while !buffer.is_empty() {
        emit(&mut buffer, &mut prof)?;
    }
    let elapsed = start.elapsed();
    Ok(RunOutput {
        recovered,
        frames,
        padding_bytes,
        evaluations,
        elapsed,
        profile: prof,
    })
}

/// Runs every configuration once per round, rounds interleaved so slow
/// drift in machine speed affects all configurations alike. Keeps the fastest
/// round per configuration.
fn measure_all(
    stream: &[u8],
    sets: &[ConstraintSet],
    config: &ShaperConfig,
    opts: &BenchOptions,
) -> Result<Vec<BenchRun>, BenchError> {
    let shapers = sets
        .iter()
        .map(|set| Shaper::new(set.clone(), config.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best: Vec<Option<RunOutput>> = sets.iter().map(|_| None).collect();
    let mut failures: Vec<Option<ShapeError>> = sets.iter().map(|_| None).collect();
    for _ in 0..opts.repeats.max(1) {
        for (i, shaper) in shapers.iter().enumerate() {
            if failures[i].is_some() {
                continue;
            }
            let out = match run_pipeline(stream, shaper, opts.profile) {
                Ok(out) => out,
                Err(failure) => {
                    failures[i] = Some(failure);
                    continue;
                }
            };
            if out.recovered != stream {
                return Err(BenchError::LossyRun {
                    constraint_count: sets[i].len(),
                });
            }
            if best[i].as_ref().is_none_or(|b| out.elapsed < b.elapsed) {
                best[i] = Some(out);
            }
        }
    }
    Ok(sets
        .iter()
        .zip(best)
        .zip(failures)
        .map(|((set, best), failure)| match (best, failure) {
            (Some(best), None) => BenchRun {
                constraint_count: set.len(),
                throughput: Some(stream.len() as f64 / best.elapsed.as_secs_f64().max(1e-12)),
                elapsed: best.elapsed,
                frames: best.frames,
                padding_bytes: best.padding_bytes,
                evaluations: best.evaluations,
                failure: None,
                profile: best.profile,
            },
            (_, failure) => BenchRun {
                constraint_count: set.len(),
                throughput: None,
                elapsed: Duration::ZERO,
                frames: 0,
                padding_bytes: 0,
                evaluations: 0,
                failure,
                profile: None,
            },
        })
        .collect())
}

/// Measures each constraint set in order. The first set is the baseline and
/// is normally empty.
pub fn run_bench(
    sets: &[ConstraintSet],
    config: &ShaperConfig,
    opts: &BenchOptions,
) -> Result<BenchReport, BenchError> {
    if opts.stream_size == 0 {
        return Err(BenchError::EmptyStream);
    }
    if sets.is_empty() {
        return Err(BenchError::NoConfigurations);
    }
    let wall = Instant::now();
    let stream = generate_stream(opts.stream_size, opts.seed);

    let runs = measure_all(&stream, sets, config, opts)?;
    let baseline = match (&runs[0].throughput, &runs[0].failure) {
        (Some(t), _) => *t,
        (None, Some(e)) => return Err(BenchError::BaselineFailed(e.clone())),
        (None, None) => unreachable!(),
    };
    let overhead_percent: Vec<Option<f64>> = runs
        .iter()
        .map(|r| r.throughput.map(|t| 100.0 * (baseline - t) / baseline))
        .collect();
    let incremental_overhead = (0..runs.len())
        .map(|k| match k {
            0 => None,
            _ => Some(overhead_percent[k]? - overhead_percent[k - 1]?),
        })
        .collect();

    Ok(BenchReport {
        stream_size: opts.stream_size,
        seed: opts.seed,
        baseline_throughput: baseline,
        padding_bytes_total: runs.iter().map(|r| r.padding_bytes).sum(),
        shaping_failures: runs.iter().filter(|r| r.failure.is_some()).count(),
        overhead_percent,
        incremental_overhead,
        runs,
        wall_time: wall.elapsed(),
    })
}

/// Cumulative prefixes of `set`: sizes 0, 1, ..., len.
pub fn prefix_sets(set: &ConstraintSet) -> Vec<ConstraintSet> {
    (0..=set.len())
        .map(|k| ConstraintSet {
            name: None,
            constraints: set.constraints[..k].to_vec(),
        })
        .collect()
}

/// Shaping parameters for both endpoints of a loopback tunnel.
#[derive(Debug, Clone, Default)]
pub struct TunnelSetup {
    /// Shapes client→server frames.
    pub upstream: ConstraintSet,
    /// Shapes server→client frames.
    pub downstream: ConstraintSet,
    pub timing: TimingPolicy,
    pub shaper: ShaperConfig,
    pub capture_frames: Option<std::path::PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TunnelRun {
    pub echoed: Vec<u8>,
    pub elapsed: Duration,
    pub client: proxy::CountersSnapshot,
    pub server: proxy::CountersSnapshot,
}

async fn echo_once(listener: TcpListener) -> std::io::Result<()> {
    let (stream, _) = listener.accept().await?;
    let (mut rd, mut wr) = stream.into_split();
    tokio::io::copy(&mut rd, &mut wr).await?;
    wr.shutdown().await
}

/// Sends `data` through CLIENT → SERVER → echo and back over loopback, and
/// returns what came back. Both endpoints are torn down afterwards.
pub async fn loopback_echo(data: &[u8], setup: &TunnelSetup) -> Result<TunnelRun, ProxyError> {
    let bind = || async {
        TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(|source| ProxyError::BindFailure {
                addr: "127.0.0.1:0".into(),
                source,
            })
    };
    let echo = bind().await?;
    let server_listener = bind().await?;
    let client_listener = bind().await?;
    let echo_addr = echo.local_addr()?.to_string();
    let server_addr = server_listener.local_addr()?.to_string();
    let client_addr = client_listener.local_addr()?.to_string();

    let endpoint = |role, listen: &str, remote: &str, out: &ConstraintSet, inb: &ConstraintSet| {
        let mut c = ProxyConfig::new(role, listen, remote);
        c.outbound_constraints = out.clone();
        c.inbound_constraints = inb.clone();
        c.timing = setup.timing.clone();
        c.shaper = setup.shaper.clone();
        c.seed = setup.seed;
        c
    };
    let mut client_cfg = endpoint(
        Role::Client,
        &client_addr,
        &server_addr,
        &setup.upstream,
        &setup.downstream,
    );
    client_cfg.capture_frames = setup.capture_frames.clone();
    let server_cfg = endpoint(
        Role::Server,
        &server_addr,
        &echo_addr,
        &setup.downstream,
        &setup.upstream,
    );

    let (client_stats, server_stats) = (EndpointStats::new(), EndpointStats::new());
    let (stop_client, client_stop) = oneshot::channel::<()>();
    let (stop_server, server_stop) = oneshot::channel::<()>();
    let client = tokio::spawn(proxy::serve(
        client_listener,
        client_cfg,
        client_stats.clone(),
        async move {
            let _ = client_stop.await;
        },
    ));
    let server = tokio::spawn(proxy::serve(
        server_listener,
        server_cfg,
        server_stats.clone(),
        async move {
            let _ = server_stop.await;
        },
    ));
    let echo_task = tokio::spawn(echo_once(echo));

    let start = Instant::now();
    let stream = TcpStream::connect(&client_addr).await?;
    let (mut rd, mut wr) = stream.into_split();
    let send = async {
        wr.write_all(data).await?;
        wr.shutdown().await
    };
    let mut echoed = Vec::with_capacity(data.len());
    let recv = rd.read_to_end(&mut echoed);
    let outcome = tokio::try_join!(send, recv);
    let elapsed = start.elapsed();

    let _ = stop_client.send(());
    let _ = stop_server.send(());
    let client_result = client.await.expect("client endpoint task panicked");
    let server_result = server.await.expect("server endpoint task panicked");
    echo_task.abort();
    client_result?;
    server_result?;
    outcome?;
    Ok(TunnelRun {
        echoed,
        elapsed,
        client: client_stats.totals(),
        server: server_stats.totals(),
    })
}

fn mib_per_sec(bps: f64) -> f64 {
    bps / (1024.0 * 1024.0)
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "stream: {} bytes, seed {}, wall time {:.2?}",
            self.stream_size, self.seed, self.wall_time
        )?;
        writeln!(
            f,
            "{:>3}  {:>12}  {:>10}  {:>10}  {:>8}  {:>10}  {:>12}",
            "k", "MiB/s", "overhead%", "incr.pp", "frames", "padding", "evaluations"
        )?;
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        for (i, run) in self.runs.iter().enumerate() {
            match run.throughput {
                Some(t) => writeln!(
                    f,
                    "{:>3}  {:>12.1}  {:>10}  {:>10}  {:>8}  {:>10}  {:>12}",
                    run.constraint_count,
                    mib_per_sec(t),
                    pct(self.overhead_percent[i]),
                    pct(self.incremental_overhead[i]),
                    run.frames,
                    run.padding_bytes,
                    run.evaluations
                )?,
                None => writeln!(
                    f,
                    "{:>3}  FAILED: {}",
                    run.constraint_count,
                    run.failure.as_ref().expect("failed run carries its error")
                )?,
            }
            if let Some(p) = &run.profile {
                writeln!(
                    f,
                    "     profile: buffer {:.2?}, search {:.2?}, encode {:.2?}, decode {:.2?}",
                    p.buffer, p.search, p.encode, p.decode
                )?;
            }
        }
        write!(
            f,
            "padding bytes total: {}, shaping failures: {}",
            self.padding_bytes_total, self.shaping_failures
        )
    }
}
