//! Per-direction stream pipelines.
//!
//! A shaped direction runs three stages joined by bounded channels:
//! read/ingest, shape, and timed write. A de-shaped direction decodes frames
//! and writes the recovered payloads.

use std::io::{BufWriter, Write};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, warn};
use rand::rngs::StdRng;
use rand::SeedableRng;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;

use super::stats::ConnStats;
use super::ProxyError;
use crate::clock::{Clock, Timestamp};
use crate::constraint::ConstraintSet;
use crate::framing::FrameDecoder;
use crate::shaper::{ShapedFrame, Shaper};
use crate::timer::{EmissionQueue, TimingPolicy, DEFAULT_QUEUE_CAP};

const READ_CHUNK: usize = 64 * 1024;
const INGEST_CHANNEL: usize = 8;
const FRAME_CHANNEL: usize = 64;

/// Where emitted frames are copied for offline inspection.
#[derive(Debug, Clone)]
pub enum FrameCapture {
    Memory(Arc<Mutex<Vec<Vec<u8>>>>),
    File(Arc<Mutex<BufWriter<std::fs::File>>>),
}

impl FrameCapture {
    pub fn memory() -> (Self, Arc<Mutex<Vec<Vec<u8>>>>) {
        let store = Arc::new(Mutex::new(Vec::new()));
        (Self::Memory(store.clone()), store)
    }

    pub fn create_file(path: &std::path::Path) -> std::io::Result<Self> {
        let file = std::fs::File::create(path)?;
        Ok(Self::File(Arc::new(Mutex::new(BufWriter::new(file)))))
    }

    fn record(&self, frame: &[u8]) -> std::io::Result<()> {
        match self {
            Self::Memory(store) => {
                store.lock().unwrap().push(frame.to_vec());
                Ok(())
            }
            Self::File(w) => {
                let mut w = w.lock().unwrap();
                w.write_all(&(frame.len() as u32).to_be_bytes())?;
                w.write_all(frame)
            }
        }
    }

    fn flush(&self) -> std::io::Result<()> {
        match self {
            Self::Memory(_) => Ok(()),
            Self::File(w) => w.lock().unwrap().flush(),
        }
    }
}

/// Optional per-pump instrumentation.
#[derive(Debug, Clone, Default)]
pub struct PumpHooks {
    pub stats: ConnStats,
    pub capture: Option<FrameCapture>,
    /// Seed for the jitter source; `None` seeds from the OS.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PumpSummary {
    pub bytes: u64,
    pub frames: u64,
}

struct Chunk {
    bytes: Vec<u8>,
    at: Timestamp,
}

async fn sleep_until<C: Clock>(clock: &C, deadline: Timestamp) {
    let now = clock.now();
    if deadline > now {
        tokio::time::sleep(deadline - now).await;
    }
}

/// Reads `source` to end of stream, shapes it under `shaper`, and writes the
/// frames to `sink` under `timing`. On success `sink` is shut down for
/// writing, propagating the half-close.
pub async fn pump_shaped_direction<R, W, C>(
    source: R,
    sink: W,
    shaper: &Shaper,
    timing: &TimingPolicy,
    clock: &C,
    hooks: &PumpHooks,
) -> Result<PumpSummary, ProxyError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
    C: Clock,
{
    let (chunk_tx, chunk_rx) = mpsc::channel::<Chunk>(INGEST_CHANNEL);
    let (frame_tx, frame_rx) = mpsc::channel::<ShapedFrame>(FRAME_CHANNEL);

    let reader = read_stage(source, chunk_tx, clock, &hooks.stats);
    let shaping = shape_stage(chunk_rx, frame_tx, shaper, clock, &hooks.stats);
    let writer = write_stage(frame_rx, sink, timing, clock, hooks);
    let (bytes, _, frames) = tokio::try_join!(reader, shaping, writer)?;
    Ok(PumpSummary { bytes, frames })
}

async fn read_stage<R, C>(
    mut source: R,
    tx: mpsc::Sender<Chunk>,
    clock: &C,
    stats: &ConnStats,
) -> Result<u64, ProxyError>
where
    R: AsyncRead + Unpin,
    C: Clock,
{
    let mut total = 0u64;
    loop {
        let mut buf = vec![0u8; READ_CHUNK];
        let n = source.read(&mut buf).await?;
        if n == 0 {
            return Ok(total);
        }
        buf.truncate(n);
        total += n as u64;
        stats.add_bytes_in(n as u64);
        let chunk = Chunk {
            bytes: buf,
            at: clock.now(),
        };
        if tx.send(chunk).await.is_err() {
            // Shaping stage already failed; its error is reported instead.
            return Ok(total);
        }
    }
}

fn record_frame(frame: &ShapedFrame, stats: &ConnStats) {
    stats.add_padding_bytes(frame.padding_len as u64);
    stats.add_shaping_retries(frame.evaluations.saturating_sub(1));
}

async fn shape_stage<C: Clock>(
    mut rx: mpsc::Receiver<Chunk>,
    tx: mpsc::Sender<ShapedFrame>,
    shaper: &Shaper,
    clock: &C,
    stats: &ConnStats,
) -> Result<(), ProxyError> {
    let config = shaper.config();
    let mut buffer = shaper.new_buffer();
    let fail = |e| {
        stats.add_shaping_failures(1);
        ProxyError::Shape(e)
    };

    loop {
        let deadline = buffer.flush_deadline(config);
        let chunk = tokio::select! {
            chunk = rx.recv() => match chunk {
                Some(c) => Some(c),
                None => break,
            },
            _ = sleep_until(clock, deadline.unwrap_or_default()), if deadline.is_some() => None,
        };
        if let Some(chunk) = chunk {
            buffer.ingest(&chunk.bytes, chunk.at).map_err(fail)?;
        }
        let now = clock.now();
        while !buffer.is_empty() && buffer.should_flush(now, config) {
            let frame = shaper.shape_once(&mut buffer).map_err(fail)?;
            record_frame(&frame, stats);
            if tx.send(frame).await.is_err() {
                return Ok(());
            }
        }
    }

    let frames = shaper.drain(&mut buffer).map_err(fail)?;
    debug!("end of stream; drained {} frames", frames.len());
    for frame in frames {
        record_frame(&frame, stats);
        if tx.send(frame).await.is_err() {
            break;
        }
    }
    Ok(())
}

async fn write_stage<W, C>(
    mut rx: mpsc::Receiver<ShapedFrame>,
    mut sink: W,
    timing: &TimingPolicy,
    clock: &C,
    hooks: &PumpHooks,
) -> Result<u64, ProxyError>
where
    W: AsyncWrite + Unpin,
    C: Clock,
{
    let mut rng = match hooks.seed {
        Some(seed) => StdRng::seed_from_u64(seed),
        None => StdRng::from_entropy(),
    };
    let mut queue = EmissionQueue::new(timing.clone(), clock.now());
    let mut open = true;
    let mut written = 0u64;

    loop {
        if queue.is_empty() {
            if !open {
                break;
            }
            match rx.recv().await {
                Some(frame) => queue.enqueue(frame.bytes)?,
                None => open = false,
            }
            continue;
        }
        let now = clock.now();
        let (release, _) = queue
            .next_release(now, &mut rng)
            .expect("queue is non-empty");
        if release <= now {
            let frame = queue.emit(now).expect("head is due");
            sink.write_all(&frame).await?;
            written += 1;
            hooks.stats.add_frames_out(1);
            hooks.stats.add_bytes_out(frame.len() as u64);
            if let Some(capture) = &hooks.capture {
                capture.record(&frame)?;
            }
            continue;
        }
        let accepting = open && queue.len() < DEFAULT_QUEUE_CAP;
        tokio::select! {
            _ = tokio::time::sleep(release - now) => {}
            frame = rx.recv(), if accepting => match frame {
                Some(frame) => queue.enqueue(frame.bytes)?,
                None => open = false,
            },
        }
    }

    if let Some(capture) = &hooks.capture {
        capture.flush()?;
    }
    sink.flush().await?;
    sink.shutdown().await?;
    Ok(written)
}

/// Decodes frames from `source` and writes the payloads to `sink`. Frames
/// are optionally audited against the constraint set the peer should honour;
/// violations are counted and logged but not fatal.
pub async fn pump_deshape_direction<R, W>(
    mut source: R,
    mut sink: W,
    audit: Option<&ConstraintSet>,
    stats: &ConnStats,
) -> Result<PumpSummary, ProxyError>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let audit = audit.filter(|set| !set.is_empty());
    let mut decoder = FrameDecoder::new();
    let mut buf = vec![0u8; READ_CHUNK];
    let mut out = Vec::with_capacity(READ_CHUNK);
    let mut summary = PumpSummary::default();
    let mut violations = 0u64;

    loop {
        let n = source.read(&mut buf).await?;
        if n == 0 {
            break;
        }
        out.clear();
        let mut ordinal = decoder.frames_decoded();
        decoder.feed(&buf[..n], |frame, payload| {
            if let Some(set) = audit {
                if !set.is_satisfied_by(frame, ordinal).unwrap_or(false) {
                    violations += 1;
                }
            }
            ordinal += 1;
            out.extend_from_slice(payload);
        })?;
        let frames = decoder.frames_decoded() - summary.frames;
        summary.frames += frames;
        stats.add_frames_in(frames);
        if violations > 0 {
            stats.add_inbound_violations(violations);
            warn!("{violations} inbound frames violate the expected constraint set");
            violations = 0;
        }
        if !out.is_empty() {
            sink.write_all(&out).await?;
            summary.bytes += out.len() as u64;
        }
    }
    if !decoder.residual().is_empty() {
        return Err(ProxyError::TruncatedFrame {
            residual: decoder.residual().len(),
        });
    }
    sink.flush().await?;
    sink.shutdown().await?;
    Ok(summary)
}

/// Upper bound on how long a connection attempt to the counterpart may take.
pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
