//! Release scheduling for shaped frames.
//!
//! The head of an [`EmissionQueue`] is bound to a release time equal to the
//! latest of the earliest instants allowed by each active timing constraint:
//! minimum gap (plus uniform jitter), fixed interval, token-bucket throughput
//! and the current time. Frames always leave in FIFO order.
//!
//! `max_gap` cannot be enforced without chaff, so it only produces a warning
//! when other constraints push a ready frame past it.

use std::collections::VecDeque;
use std::time::Duration;

use log::warn;
use rand::Rng;
use thiserror::Error;

use crate::clock::Timestamp;
use crate::config::{Document, DocumentError, Field};
use crate::shaper::ShaperConfig;

pub const DEFAULT_QUEUE_CAP: usize = 1024;
const NANOS_PER_SEC: u128 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Throughput {
    pub bytes_per_sec: u64,
    pub bucket_capacity: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TimingPolicy {
    pub min_gap: Option<Duration>,
    pub max_gap: Option<Duration>,
    pub fixed_interval: Option<Duration>,
    pub jitter: Option<Duration>,
    pub throughput: Option<Throughput>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TimingError {
    #[error("conflicting timing constraints: {0}")]
    ConflictingConstraints(String),
    #[error("line {line}: `{key}` must not be negative")]
    NegativeDuration { key: String, line: usize },
    #[error("line {line}: value `{value}` out of range for `{key}`")]
    ValueOutOfRange {
        key: String,
        value: String,
        line: usize,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

impl From<DocumentError> for TimingError {
    fn from(e: DocumentError) -> Self {
        Self::Malformed {
            line: e.line,
            message: e.message,
        }
    }
}

impl TimingPolicy {
    pub fn is_unconstrained(&self) -> bool {
        self == &TimingPolicy::default()
    }

    pub fn validate(&self, max_frame_len: usize) -> Result<(), TimingError> {
        if let (Some(min), Some(max)) = (self.min_gap, self.max_gap) {
            if min > max {
                return Err(TimingError::ConflictingConstraints(format!(
                    "min_gap {min:?} exceeds max_gap {max:?}"
                )));
            }
        }
        if self.fixed_interval.is_some()
            && (self.min_gap.is_some() || self.max_gap.is_some() || self.jitter.is_some())
        {
            return Err(TimingError::ConflictingConstraints(
                "fixed_interval cannot be combined with min_gap, max_gap or jitter".into(),
            ));
        }
        if let Some(tp) = self.throughput {
            if tp.bytes_per_sec == 0 {
                return Err(TimingError::ConflictingConstraints(
                    "throughput must be positive".into(),
                ));
            }
            if tp.bucket_capacity < max_frame_len as u64 + 2 {
                return Err(TimingError::ConflictingConstraints(format!(
                    "bucket capacity {} is below max_frame_len + 2 = {}",
                    tp.bucket_capacity,
                    max_frame_len + 2
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, TimingError> {
        Ok(parse_timing_document(text)?.0)
    }
}

const TIMING_KEYS: [&str; 6] = [
    "min_gap_ms",
    "max_gap_ms",
    "fixed_interval_ms",
    "jitter_ms",
    "throughput_Bps",
    "bucket_capacity_B",
];

const SHAPER_KEYS: [&str; 6] = [
    "max_frame_len",
    "flush_period_ms",
    "reduction_step",
    "padding_budget",
    "max_padding_len",
    "buffer_cap_B",
];

fn out_of_range(f: &Field) -> TimingError {
    TimingError::ValueOutOfRange {
        key: f.key.clone(),
        value: f.value.clone(),
        line: f.line,
    }
}

fn millis(f: &Field) -> Result<Duration, TimingError> {
    let ms: f64 = f.value.parse().map_err(|_| out_of_range(f))?;
    if !ms.is_finite() {
        return Err(out_of_range(f));
    }
    if ms < 0.0 {
        return Err(TimingError::NegativeDuration {
            key: f.key.clone(),
            line: f.line,
        });
    }
    Ok(Duration::from_nanos((ms * 1e6).round() as u64))
}

fn positive_int(f: &Field) -> Result<u64, TimingError> {
    match f.value.parse::<u64>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(out_of_range(f)),
    }
}

/// Parses a timing document. Besides the timing keys it accepts the shaper
/// tuning keys (`max_frame_len`, `flush_period_ms`, ...), which override
/// [`ShaperConfig::default`].
pub fn parse_timing_document(text: &str) -> Result<(TimingPolicy, ShaperConfig), TimingError> {
    let doc = Document::parse(text)?;
    if let Some(section) = doc.sections.first() {
        return Err(TimingError::Malformed {
            line: section.line,
            message: format!("unexpected list section `{}`", section.key),
        });
    }
    for f in &doc.scalars {
        if !TIMING_KEYS.contains(&f.key.as_str()) && !SHAPER_KEYS.contains(&f.key.as_str()) {
            return Err(TimingError::Malformed {
                line: f.line,
                message: format!("unknown key `{}`", f.key),
            });
        }
    }

    let mut shaper = ShaperConfig::default();
    if let Some(f) = doc.scalar("max_frame_len") {
        shaper.max_frame_len = positive_int(f)? as usize;
    }
    if let Some(f) = doc.scalar("flush_period_ms") {
        shaper.flush_period = millis(f)?;
    }
    if let Some(f) = doc.scalar("reduction_step") {
        shaper.reduction_step = positive_int(f)? as usize;
    }
    if let Some(f) = doc.scalar("padding_budget") {
        shaper.padding_budget = positive_int(f)?;
    }
    if let Some(f) = doc.scalar("max_padding_len") {
        shaper.max_padding_len = positive_int(f)? as usize;
    }
    if let Some(f) = doc.scalar("buffer_cap_B") {
        shaper.buffer_cap = positive_int(f)? as usize;
    }
    shaper.validate().map_err(|e| TimingError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;

    let opt_ms = |key: &str| doc.scalar(key).map(millis).transpose();
    let mut policy = TimingPolicy {
        min_gap: opt_ms("min_gap_ms")?,
        max_gap: opt_ms("max_gap_ms")?,
        fixed_interval: opt_ms("fixed_interval_ms")?,
        jitter: opt_ms("jitter_ms")?,
        throughput: None,
    };
    if let Some(f) = doc.scalar("throughput_Bps") {
        let rate = positive_int(f)?;
        let capacity = match doc.scalar("bucket_capacity_B") {
            Some(c) => positive_int(c)?,
            None => rate.max(shaper.max_frame_len as u64 + 2),
        };
        policy.throughput = Some(Throughput {
            bytes_per_sec: rate,
            bucket_capacity: capacity,
        });
    } else if let Some(f) = doc.scalar("bucket_capacity_B") {
        return Err(TimingError::Malformed {
            line: f.line,
            message: "bucket_capacity_B requires throughput_Bps".into(),
        });
    }
    policy.validate(shaper.max_frame_len)?;
    Ok((policy, shaper))
}

/// Token bucket with exact integer refill. Balances are kept in
/// byte-nanoseconds-per-second units so no rounding ever occurs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBucket {
    rate: u64,
    capacity: u64,
    scaled: u128,
    updated: Timestamp,
}

impl TokenBucket {
    /// Starts full.
    pub fn new(tp: Throughput, now: Timestamp) -> Self {
        Self {
            rate: tp.bytes_per_sec,
            capacity: tp.bucket_capacity,
            scaled: tp.bucket_capacity as u128 * NANOS_PER_SEC,
            updated: now,
        }
    }

    fn scaled_at(&self, now: Timestamp) -> u128 {
        let elapsed = now.as_nanos().saturating_sub(self.updated.as_nanos()) as u128;
        (self.scaled + elapsed * self.rate as u128).min(self.capacity as u128 * NANOS_PER_SEC)
    }

    /// Whole-byte token balance at `now`.
    pub fn tokens(&self, now: Timestamp) -> u64 {
        (self.scaled_at(now) / NANOS_PER_SEC) as u64
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Earliest instant at or after `now` holding `size` tokens.
    pub fn ready_at(&self, size: u64, now: Timestamp) -> Timestamp {
        let need = size.min(self.capacity) as u128 * NANOS_PER_SEC;
        let have = self.scaled_at(now);
        if have >= need {
            return now;
        }
        let wait = (need - have).div_ceil(self.rate as u128);
        now + Duration::from_nanos(wait as u64)
    }

    pub fn consume(&mut self, size: u64, now: Timestamp) {
        let have = self.scaled_at(now);
        self.scaled = have.saturating_sub(size as u128 * NANOS_PER_SEC);
        self.updated = self.updated.max(now);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("emission queue full ({cap} frames)")]
    QueueOverflow { cap: usize },
    #[error("frame of {size} bytes can never fit the {capacity}-byte token bucket")]
    FrameExceedsBucket { size: usize, capacity: u64 },
}

/// FIFO of shaped frames awaiting release, for one connection direction.
#[derive(Debug, Clone)]
pub struct EmissionQueue {
    policy: TimingPolicy,
    queued: VecDeque<Vec<u8>>,
    cap: usize,
    last_emit: Option<Timestamp>,
    bucket: Option<TokenBucket>,
    head_release: Option<Timestamp>,
    max_gap_overruns: u64,
}

impl EmissionQueue {
    pub fn new(policy: TimingPolicy, now: Timestamp) -> Self {
        Self::with_cap(policy, now, DEFAULT_QUEUE_CAP)
    }

    pub fn with_cap(policy: TimingPolicy, now: Timestamp, cap: usize) -> Self {
        let bucket = policy.throughput.map(|tp| TokenBucket::new(tp, now));
        Self {
            policy,
            queued: VecDeque::new(),
            cap,
            last_emit: None,
            bucket,
            head_release: None,
            max_gap_overruns: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.queued.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queued.is_empty()
    }

    pub fn last_emit(&self) -> Option<Timestamp> {
        self.last_emit
    }

    pub fn bucket(&self) -> Option<&TokenBucket> {
        self.bucket.as_ref()
    }

    /// Releases that `max_gap` flagged as late.
    pub fn max_gap_overruns(&self) -> u64 {
        self.max_gap_overruns
    }

    pub fn enqueue(&mut self, frame: Vec<u8>) -> Result<(), QueueError> {
        if self.queued.len() >= self.cap {
            return Err(QueueError::QueueOverflow { cap: self.cap });
        }
        if let Some(bucket) = &self.bucket {
            if frame.len() as u64 > bucket.capacity() {
                return Err(QueueError::FrameExceedsBucket {
                    size: frame.len(),
                    capacity: bucket.capacity(),
                });
            }
        }
        self.queued.push_back(frame);
        Ok(())
    }

    /// Release time of the head frame, or `None` when nothing is queued. The
    /// first call for a given head fixes its release time (and jitter draw).
    pub fn next_release<R: Rng + ?Sized>(
        &mut self,
        now: Timestamp,
        rng: &mut R,
    ) -> Option<(Timestamp, &[u8])> {
        let head = self.queued.front()?;
        let release = match self.head_release {
            Some(t) => t,
            None => {
                let mut release = now;
                if let Some(last) = self.last_emit {
                    if let Some(interval) = self.policy.fixed_interval {
                        release = release.max(last + interval);
                    }
                    if self.policy.min_gap.is_some() || self.policy.jitter.is_some() {
                        let gap = self.policy.min_gap.unwrap_or_default();
                        let jitter = match self.policy.jitter {
                            Some(j) if !j.is_zero() => {
                                Duration::from_nanos(rng.gen_range(0..=j.as_nanos() as u64))
                            }
                            _ => Duration::ZERO,
                        };
                        release = release.max(last + gap + jitter);
                    }
                }
                if let Some(bucket) = &self.bucket {
                    release = release.max(bucket.ready_at(head.len() as u64, now));
                }
                if let (Some(last), Some(max_gap)) = (self.last_emit, self.policy.max_gap) {
                    if release > now && release - last > max_gap {
                        self.max_gap_overruns += 1;
                        warn!(
                            "frame release delayed {:?} after previous, beyond max_gap {:?}",
                            release - last,
                            max_gap
                        );
                    }
                }
                self.head_release = Some(release);
                release
            }
        };
        Some((release, head.as_slice()))
    }

    /// Pops the head frame at `now`. Returns `None` when the queue is empty or
    /// the head is not yet due (including when no release time is bound yet).
    pub fn emit(&mut self, now: Timestamp) -> Option<Vec<u8>> {
        let due = self.head_release?;
        if now < due {
            return None;
        }
        let frame = self.queued.pop_front()?;
        if let Some(bucket) = &mut self.bucket {
            bucket.consume(frame.len() as u64, now);
        }
        self.last_emit = Some(now);
        self.head_release = None;
        Some(frame)
    }
}
