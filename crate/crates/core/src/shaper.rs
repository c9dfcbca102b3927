//! Frame synthesis.
//!
//! Pending stream bytes are turned into wire frames that satisfy a
//! [`ConstraintSet`]. The search runs in two phases:
//!
//! 1. **Length reduction.** Starting from the largest payload `K0` the frame
//!    can carry, shrink the payload by `reduction_step` until a zero-padding
//!    frame passes.
//! 2. **Content padding.** With the payload fixed at `K0`, append padding of
//!    length 1, 2, ... and enumerate its contents as a big-endian base-256
//!    counter starting from all zeros, last byte fastest.
//!
//! Every candidate frame counts against `padding_budget`. When the budget runs
//! out the call fails and nothing is consumed.
//!
//! Candidates are scored from a byte histogram that is updated in place as the
//! search moves between neighbours, instead of being rebuilt per candidate.

use std::collections::VecDeque;
use std::time::Duration;

use thiserror::Error;

use crate::clock::Timestamp;
use crate::constraint::{ByteStats, Constraint, ConstraintSet};
use crate::framing::{self, ABSOLUTE_MAX_FRAME_LEN, DEFAULT_MAX_FRAME_LEN, HEADER_LEN};

pub const DEFAULT_FLUSH_PERIOD: Duration = Duration::from_millis(20);
pub const DEFAULT_PADDING_BUDGET: u64 = 65_536;
pub const DEFAULT_MAX_PADDING_LEN: usize = 256;
pub const DEFAULT_BUFFER_CAP: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShaperConfig {
    /// Upper bound on the on-wire frame size, length fields included.
    pub max_frame_len: usize,
    pub flush_period: Duration,
    pub reduction_step: usize,
    /// Candidate evaluations allowed per frame, across both phases.
    pub padding_budget: u64,
    pub max_padding_len: usize,
    /// Pending bytes allowed before ingest pushes back.
    pub buffer_cap: usize,
}

impl Default for ShaperConfig {
    fn default() -> Self {
        Self {
            max_frame_len: DEFAULT_MAX_FRAME_LEN,
            flush_period: DEFAULT_FLUSH_PERIOD,
            reduction_step: 1,
            padding_budget: DEFAULT_PADDING_BUDGET,
            max_padding_len: DEFAULT_MAX_PADDING_LEN,
            buffer_cap: DEFAULT_BUFFER_CAP,
        }
    }
}

impl ShaperConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        let bad = |msg: String| Err(ShapeError::InvalidConfig(msg));
        if !(HEADER_LEN + 1..=ABSOLUTE_MAX_FRAME_LEN).contains(&self.max_frame_len) {
            return bad(format!(
                "max_frame_len must be in {}..={}",
                HEADER_LEN + 1,
                ABSOLUTE_MAX_FRAME_LEN
            ));
        }
        if self.reduction_step == 0 {
            return bad("reduction_step must be at least 1".into());
        }
        if self.padding_budget == 0 {
            return bad("padding_budget must be at least 1".into());
        }
        if self.max_padding_len == 0 {
            return bad("max_padding_len must be at least 1".into());
        }
        if self.buffer_cap == 0 {
            return bad("buffer_cap must be at least 1".into());
        }
        Ok(())
    }

    /// Largest payload a single frame can carry.
    pub fn payload_capacity(&self) -> usize {
        self.max_frame_len - HEADER_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape buffer overflow: {pending} pending + {incoming} incoming exceeds {cap} bytes")]
    BufferOverflow {
        pending: usize,
        incoming: usize,
        cap: usize,
    },
    #[error(
        "shaping exhausted at ordinal {ordinal} after {evaluations} candidates; \
         {undeliverable} bytes undeliverable"
    )]
    Exhausted {
        ordinal: u64,
        evaluations: u64,
        undeliverable: usize,
    },
    #[error("nothing pending to shape")]
    EmptyBuffer,
    #[error("invalid shaper configuration: {0}")]
    InvalidConfig(String),
}

/// Unshaped bytes for one stream direction plus flush bookkeeping.
#[derive(Debug, Clone)]
pub struct ShapeBuffer {
    data: Vec<u8>,
    head: usize,
    /// (absolute end offset, arrival time) per ingest call still partly pending.
    arrivals: VecDeque<(u64, Timestamp)>,
    ingested: u64,
    consumed: u64,
    emitted: u64,
    cap: usize,
}

impl Default for ShapeBuffer {
    fn default() -> Self {
        Self::with_cap(DEFAULT_BUFFER_CAP)
    }
}

impl ShapeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cap(cap: usize) -> Self {
        Self {
            data: Vec::new(),
            head: 0,
            arrivals: VecDeque::new(),
            ingested: 0,
            consumed: 0,
            emitted: 0,
            cap,
        }
    }

    pub fn pending(&self) -> &[u8] {
        &self.data[self.head..]
    }

    pub fn pending_len(&self) -> usize {
        self.data.len() - self.head
    }

    pub fn is_empty(&self) -> bool {
        self.pending_len() == 0
    }

    /// Arrival time of the oldest pending byte.
    pub fn oldest_arrival(&self) -> Option<Timestamp> {
        self.arrivals.front().map(|&(_, t)| t)
    }

    /// Frames produced so far; the ordinal of the next frame.
    pub fn emitted_count(&self) -> u64 {
        self.emitted
    }

    pub fn ingest(&mut self, bytes: &[u8], now: Timestamp) -> Result<(), ShapeError> {
        let pending = self.pending_len();
        if pending + bytes.len() > self.cap {
            return Err(ShapeError::BufferOverflow {
                pending,
                incoming: bytes.len(),
                cap: self.cap,
            });
        }
        if bytes.is_empty() {
            return Ok(());
        }
        if self.head > 0 && self.head >= self.data.len() / 2 {
            self.data.drain(..self.head);
            self.head = 0;
        }
        self.data.extend_from_slice(bytes);
        self.ingested += bytes.len() as u64;
        self.arrivals.push_back((self.ingested, now));
        Ok(())
    }

    pub fn should_flush(&self, now: Timestamp, config: &ShaperConfig) -> bool {
        if self.pending_len() >= config.payload_capacity() {
            return true;
        }
        match self.oldest_arrival() {
            Some(oldest) => now.saturating_since(oldest) >= config.flush_period,
            None => false,
        }
    }

    /// Instant at which the flush period of the oldest pending byte expires.
    pub fn flush_deadline(&self, config: &ShaperConfig) -> Option<Timestamp> {
        self.oldest_arrival().map(|t| t + config.flush_period)
    }

    fn consume(&mut self, n: usize) {
        debug_assert!(n <= self.pending_len());
        self.head += n;
        self.consumed += n as u64;
        while matches!(self.arrivals.front(), Some(&(end, _)) if end <= self.consumed) {
            self.arrivals.pop_front();
        }
        if self.head == self.data.len() {
            self.data.clear();
            self.head = 0;
        }
        self.emitted += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchPhase {
    LengthReduction,
    Padding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapedFrame {
    /// Complete on-wire frame.
    pub bytes: Vec<u8>,
    pub ordinal: u64,
    pub payload_len: usize,
    pub padding_len: usize,
    /// Candidates evaluated to find this frame, the winner included.
    pub evaluations: u64,
    pub phase: SearchPhase,
}

/// Result of a search that did not mutate any buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub payload_len: usize,
    pub padding: Vec<u8>,
    pub evaluations: u64,
    pub phase: SearchPhase,
}

/// Searches for the first satisfying frame over `pending` at `ordinal`.
/// Returns the evaluation count on exhaustion.
pub fn search(
    pending: &[u8],
    set: &ConstraintSet,
    ordinal: u64,
    config: &ShaperConfig,
) -> Result<Candidate, u64> {
    assert!(!pending.is_empty(), "search over empty pending data");
    let k0 = pending.len().min(config.payload_capacity());
    let active: Vec<&Constraint> = set.active_at(ordinal).collect();
    if active.is_empty() {
        return Ok(Candidate {
            payload_len: k0,
            padding: Vec::new(),
            evaluations: 1,
            phase: SearchPhase::LengthReduction,
        });
    }
    let accept = |stats: &ByteStats| {
        active.iter().all(|c| {
            c.check_stats(stats)
                .expect("candidate frames are never empty")
        })
    };
    let budget = config.padding_budget;
    let mut evaluations = 0u64;

    // Phase 1: length reduction.
    let mut stats = ByteStats::from_bytes(&framing::header(k0, 0));
    stats.add_slice(&pending[..k0]);
    let mut k = k0;
    loop {
        evaluations += 1;
        if accept(&stats) {
            return Ok(Candidate {
                payload_len: k,
                padding: Vec::new(),
                evaluations,
                phase: SearchPhase::LengthReduction,
            });
        }
        if evaluations >= budget {
            return Err(evaluations);
        }
        if k <= config.reduction_step {
            break;
        }
        let next = k - config.reduction_step;
        stats.remove_slice(&framing::header(k, 0));
        stats.remove_slice(&pending[next..k]);
        stats.add_slice(&framing::header(next, 0));
        k = next;
    }

    // Phase 2: content padding at K0.
    let payload_stats = ByteStats::from_bytes(&pending[..k0]);
    for pad_len in 1..=config.max_padding_len {
        if framing::frame_len(k0, pad_len) > config.max_frame_len {
            break;
        }
        let mut stats = payload_stats.clone();
        stats.add_slice(&framing::header(k0, pad_len));
        let mut padding = vec![0u8; pad_len];
        stats.add_slice(&padding);
        loop {
            evaluations += 1;
            if accept(&stats) {
                return Ok(Candidate {
                    payload_len: k0,
                    padding,
                    evaluations,
                    phase: SearchPhase::Padding,
                });
            }
            if evaluations >= budget {
                return Err(evaluations);
            }
            if !increment_counter(&mut padding, &mut stats) {
                break;
            }
        }
    }
    Err(evaluations)
}

/// Big-endian increment keeping `stats` in sync. Returns false on wrap-around.
fn increment_counter(counter: &mut [u8], stats: &mut ByteStats) -> bool {
    for digit in counter.iter_mut().rev() {
        stats.remove(*digit);
        let (next, carry) = digit.overflowing_add(1);
        *digit = next;
        stats.add(next);
        if !carry {
            return true;
        }
    }
    false
}

/// Applies a constraint set and shaping parameters to a [`ShapeBuffer`].
#[derive(Debug, Clone)]
pub struct Shaper {
    set: ConstraintSet,
    config: ShaperConfig,
}

impl Shaper {
    pub fn new(set: ConstraintSet, config: ShaperConfig) -> Result<Self, ShapeError> {
        config.validate()?;
        Ok(Self { set, config })
    }

    pub fn config(&self) -> &ShaperConfig {
        &self.config
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.set
    }

    pub fn new_buffer(&self) -> ShapeBuffer {
        ShapeBuffer::with_cap(self.config.buffer_cap)
    }

    /// Emits one frame from the front of `buffer`. On exhaustion the buffer is
    /// left untouched.
    pub fn shape_once(&self, buffer: &mut ShapeBuffer) -> Result<ShapedFrame, ShapeError> {
        let candidate = self.search_next(buffer)?;
        Ok(self.commit(buffer, candidate))
    }

    /// Finds the next frame without consuming anything.
    pub fn search_next(&self, buffer: &ShapeBuffer) -> Result<Candidate, ShapeError> {
        if buffer.is_empty() {
            return Err(ShapeError::EmptyBuffer);
        }
        let ordinal = buffer.emitted_count();
        search(buffer.pending(), &self.set, ordinal, &self.config).map_err(|evaluations| {
            ShapeError::Exhausted {
                ordinal,
                evaluations,
                undeliverable: buffer.pending_len(),
            }
        })
    }

    /// Encodes `candidate`, which must come from [`Shaper::search_next`] on
    /// the same unchanged buffer, and consumes its payload.
    pub fn commit(&self, buffer: &mut ShapeBuffer, candidate: Candidate) -> ShapedFrame {
        let ordinal = buffer.emitted_count();
        let payload = &buffer.pending()[..candidate.payload_len];
        let bytes = framing::encode_frame(payload, &candidate.padding, self.config.max_frame_len)
            .expect("search only yields frames within bounds");
        buffer.consume(candidate.payload_len);
        ShapedFrame {
            bytes,
            ordinal,
            payload_len: candidate.payload_len,
            padding_len: candidate.padding.len(),
            evaluations: candidate.evaluations,
            phase: candidate.phase,
        }
    }

    /// Shapes everything pending, for end of stream.
    pub fn drain(&self, buffer: &mut ShapeBuffer) -> Result<Vec<ShapedFrame>, ShapeError> {
        let mut frames = Vec::new();
        while !buffer.is_empty() {
            frames.push(self.shape_once(buffer)?);
        }
        Ok(frames)
    }
}
