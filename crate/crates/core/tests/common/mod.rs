//! Shared test support: a brute-force reference for the frame search, direct
//! metric implementations, and randomized trial generation.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use shaperd::clock::Timestamp;
use shaperd::constraint::{ComparisonMode, Constraint, ConstraintFunction, PacketTarget};
use shaperd::{ConstraintSet, ShapeError, ShapedFrame, Shaper, ShaperConfig};

// ---------------------------------------------------------------------------
// Reference metrics, written from the definitions without sharing code with
// the crate.

pub fn ref_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.clamp(0.0, 8.0)
}

pub fn ref_printable(bytes: &[u8]) -> f64 {
    bytes
        .iter()
        .filter(|&&b| (0x20..=0x7E).contains(&b))
        .count() as f64
        / bytes.len() as f64
}

pub fn ref_max_fraction(bytes: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    *counts.iter().max().unwrap() as f64 / bytes.len() as f64
}

pub fn ref_metric(function: ConstraintFunction, bytes: &[u8]) -> f64 {
    match function {
        ConstraintFunction::EntropyBitsPerByte => ref_entropy(bytes),
        ConstraintFunction::PrintableAsciiFraction => ref_printable(bytes),
        ConstraintFunction::FrameLengthBytes => bytes.len() as f64,
        ConstraintFunction::ByteHistogramMaxFraction => ref_max_fraction(bytes),
    }
}

pub fn ref_target_matches(target: PacketTarget, ordinal: u64) -> bool {
    match target {
        PacketTarget::All => true,
        PacketTarget::Index(i) => ordinal == i,
        PacketTarget::Range { lo, hi } => lo <= ordinal && ordinal <= hi,
        PacketTarget::FirstN(n) => ordinal < n,
    }
}

pub fn ref_holds(c: &Constraint, frame: &[u8], ordinal: u64) -> bool {
    if !ref_target_matches(c.target, ordinal) {
        return true;
    }
    let m = ref_metric(c.function, frame);
    let v = c.value;
    let exact = c.function == ConstraintFunction::FrameLengthBytes;
    let eq = if exact { m == v } else { (m - v).abs() <= 1e-9 };
    match c.mode {
        ComparisonMode::Eq => eq,
        ComparisonMode::Neq => !eq,
        ComparisonMode::Lt => m < v,
        ComparisonMode::Le => m <= v,
        ComparisonMode::Gt => m > v,
        ComparisonMode::Ge => m >= v,
    }
}

pub fn ref_satisfies(set: &ConstraintSet, frame: &[u8], ordinal: u64) -> bool {
    set.constraints.iter().all(|c| ref_holds(c, frame, ordinal))
}

// ---------------------------------------------------------------------------
// Brute-force frame search.

pub fn ref_frame(payload: &[u8], padding: &[u8]) -> Vec<u8> {
    let outer = 2 + payload.len() + padding.len();
    let mut f = Vec::with_capacity(2 + outer);
    f.push((outer >> 8) as u8);
    f.push(outer as u8);
    f.push((payload.len() >> 8) as u8);
    f.push(payload.len() as u8);
    f.extend_from_slice(payload);
    f.extend_from_slice(padding);
    f
}

/// Big-endian base-256 digits of `value`, `len` digits wide.
fn digits(mut value: u128, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    for slot in out.iter_mut().rev() {
        *slot = (value % 256) as u8;
        value /= 256;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefOutcome {
    Found {
        frame: Vec<u8>,
        payload_len: usize,
        padding_len: usize,
        evaluations: u64,
    },
    Exhausted {
        evaluations: u64,
    },
}

/// Walks candidates in the defined order: payload length K0, K0 - step, ...
/// with no padding, then padding lengths 1, 2, ... at K0 with each padding
/// value counted upward from zero. Every candidate materializes its full
/// frame. The empty set accepts the first candidate.
pub fn ref_search(
    pending: &[u8],
    set: &ConstraintSet,
    ordinal: u64,
    config: &ShaperConfig,
) -> RefOutcome {
    let k0 = pending.len().min(config.max_frame_len - 4);
    let mut lengths = Vec::new();
    let mut k = k0;
    loop {
        lengths.push(k);
        if k <= config.reduction_step {
            break;
        }
        k -= config.reduction_step;
    }

    let mut evaluations = 0u64;
    let mut evaluate = |payload_len: usize, padding: Vec<u8>| {
        evaluations += 1;
        let frame = ref_frame(&pending[..payload_len], &padding);
        if ref_satisfies(set, &frame, ordinal) {
            Some(RefOutcome::Found {
                frame,
                payload_len,
                padding_len: padding.len(),
                evaluations,
            })
        } else {
            None
        }
    };

    let mut spent = 0u64;
    for k in lengths {
        spent += 1;
        if let Some(found) = evaluate(k, Vec::new()) {
            return found;
        }
        if spent >= config.padding_budget {
            return RefOutcome::Exhausted { evaluations: spent };
        }
    }
    for p in 1..=config.max_padding_len {
        if 4 + k0 + p > config.max_frame_len {
            break;
        }
        let values = if p >= 16 { u128::MAX } else { 1u128 << (8 * p) };
        let mut value = 0u128;
        while value < values {
            spent += 1;
            if let Some(found) = evaluate(k0, digits(value, p)) {
                return found;
            }
            if spent >= config.padding_budget {
                return RefOutcome::Exhausted { evaluations: spent };
            }
            value += 1;
        }
    }
    RefOutcome::Exhausted { evaluations: spent }
}

// ---------------------------------------------------------------------------
// Randomized shaping trials.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Uniform,
    /// Each byte printable with the given probability (percent).
    Text(u8),
    /// Bytes from a small alphabet.
    LowEntropy(u8),
}

pub fn gen_stream<R: Rng>(rng: &mut R, kind: StreamKind, len: usize) -> Vec<u8> {
    match kind {
        StreamKind::Uniform => (0..len).map(|_| rng.gen()).collect(),
        StreamKind::Text(pct) => (0..len)
            .map(|_| {
                if rng.gen_range(0..100) < pct {
                    rng.gen_range(0x20..=0x7E)
                } else {
                    rng.gen()
                }
            })
            .collect(),
        StreamKind::LowEntropy(symbols) => {
            let alphabet: Vec<u8> = (0..symbols.max(1)).map(|_| rng.gen()).collect();
            (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect()
        }
    }
}

pub fn gen_target<R: Rng>(rng: &mut R) -> PacketTarget {
    match rng.gen_range(0..10) {
        0 => PacketTarget::Index(rng.gen_range(0..6)),
        1 => {
            let lo = rng.gen_range(0..6);
            PacketTarget::Range {
                lo,
                hi: lo + rng.gen_range(0..6),
            }
        }
        2 => PacketTarget::FirstN(rng.gen_range(1..6)),
        _ => PacketTarget::All,
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub stream: Vec<u8>,
    pub kind: StreamKind,
    pub set: ConstraintSet,
    pub config: ShaperConfig,
    /// Ingest slice lengths, summing to the stream length.
    pub chunks: Vec<usize>,
    /// Virtual time elapsed before each ingest.
    pub gaps_ms: Vec<u64>,
}

/// Stream length log-uniform over 1 B ..= 1 MiB.
pub fn gen_len<R: Rng>(rng: &mut R) -> usize {
    let exp: f64 = rng.gen_range(0.0..=20.0);
    (2f64.powf(exp) as usize).clamp(1, 1 << 20)
}

/// Draws a constraint set from the families {printable GE v <= 0.6,
/// entropy GE v <= 7.5, frame_length LE L >= 64}, at most one of each, with a
/// stream whose content makes the set plausible.
pub fn gen_trial<R: Rng>(rng: &mut R) -> Trial {
    let mut families = [0u8, 1, 2];
    families.shuffle(rng);
    let count = rng.gen_range(0..=2);
    let mut constraints = Vec::new();
    let mut printable_floor: Option<f64> = None;
    let mut entropy_floor: Option<f64> = None;
    for &family in &families[..count] {
        let c = match family {
            0 => {
                let v = rng.gen_range(0.0..=0.6);
                printable_floor = Some(v);
                Constraint::new(
                    ConstraintFunction::PrintableAsciiFraction,
                    ComparisonMode::Ge,
                    v,
                    gen_target(rng),
                )
            }
            1 => {
                let v = rng.gen_range(0.0..=7.5);
                entropy_floor = Some(v);
                Constraint::new(
                    ConstraintFunction::EntropyBitsPerByte,
                    ComparisonMode::Ge,
                    v,
                    gen_target(rng),
                )
            }
            _ => Constraint::new(
                ConstraintFunction::FrameLengthBytes,
                ComparisonMode::Le,
                rng.gen_range(64..=1400) as f64,
                gen_target(rng),
            ),
        };
        constraints.push(c);
    }
    let kind = match (printable_floor, entropy_floor) {
        (Some(p), _) => {
            let lo = ((p * 100.0) as u8 + 15).min(100);
            StreamKind::Text(rng.gen_range(lo..=100))
        }
        (None, Some(h)) if h < 4.0 && rng.gen_bool(0.5) => {
            StreamKind::LowEntropy(rng.gen_range(2u8..=64))
        }
        _ => match rng.gen_range(0..4) {
            0 => StreamKind::LowEntropy(rng.gen_range(1u8..=16)),
            1 => StreamKind::Text(rng.gen_range(0..=100)),
            _ => StreamKind::Uniform,
        },
    };
    let len = gen_len(rng);
    let stream = gen_stream(rng, kind, len);

    let config = ShaperConfig {
        max_frame_len: *[256, 1028, 1400, 1400].choose(rng).unwrap(),
        reduction_step: *[1, 1, 3, 16].choose(rng).unwrap(),
        padding_budget: *[4096, 16_384, 65_536].choose(rng).unwrap(),
        max_padding_len: *[2, 16, 256].choose(rng).unwrap(),
        ..ShaperConfig::default()
    };

    let max_chunk = *[7usize, 300, 5000, 70_000].choose(rng).unwrap();
    let mut chunks = Vec::new();
    let mut gaps_ms = Vec::new();
    let mut left = len;
    while left > 0 {
        let n = rng.gen_range(1..=max_chunk.min(left));
        chunks.push(n);
        gaps_ms.push(if rng.gen_bool(0.3) {
            rng.gen_range(0..=45)
        } else {
            0
        });
        left -= n;
    }
    Trial {
        stream,
        kind,
        set: ConstraintSet::new(constraints),
        config,
        chunks,
        gaps_ms,
    }
}

#[derive(Debug, Clone)]
pub struct TrialFailure {
    pub error: ShapeError,
    /// Buffer contents when the search gave up.
    pub pending: Vec<u8>,
    pub ordinal: u64,
    /// Buffer contents after the failed call.
    pub pending_after: Vec<u8>,
    pub frames: Vec<ShapedFrame>,
}

/// Feeds the trial's chunks on a virtual timeline, flushing whenever the
/// buffer is full or its oldest byte is older than the flush period, then
/// drains. Stops at the first exhaustion.
pub fn run_trial(trial: &Trial) -> Result<Vec<ShapedFrame>, Box<TrialFailure>> {
    let shaper = Shaper::new(trial.set.clone(), trial.config.clone()).expect("valid config");
    let mut buffer = shaper.new_buffer();
    let mut frames = Vec::new();
    let mut now = Timestamp::ZERO;
    let mut offset = 0;

    let shape = |buffer: &mut shaperd::ShapeBuffer, frames: &mut Vec<ShapedFrame>| {
        let before = buffer.pending().to_vec();
        let ordinal = buffer.emitted_count();
        match shaper.shape_once(buffer) {
            Ok(frame) => {
                frames.push(frame);
                Ok(())
            }
            Err(error) => Err(Box::new(TrialFailure {
                error,
                pending: before,
                ordinal,
                pending_after: buffer.pending().to_vec(),
                frames: std::mem::take(frames),
            })),
        }
    };

    for (&n, &gap) in trial.chunks.iter().zip(&trial.gaps_ms) {
        now = now + std::time::Duration::from_millis(gap);
        while !buffer.is_empty() && buffer.should_flush(now, &trial.config) {
            shape(&mut buffer, &mut frames)?;
        }
        buffer
            .ingest(&trial.stream[offset..offset + n], now)
            .expect("buffer cap is never reached");
        offset += n;
        while !buffer.is_empty() && buffer.should_flush(now, &trial.config) {
            shape(&mut buffer, &mut frames)?;
        }
    }
    while !buffer.is_empty() {
        shape(&mut buffer, &mut frames)?;
    }
    Ok(frames)
}

/// Concatenated payloads of well-formed frames, parsed independently.
pub fn ref_deframe(stream: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    let mut rest = stream;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return None;
        }
        let outer = u16::from_be_bytes([rest[0], rest[1]]) as usize;
        let payload = u16::from_be_bytes([rest[2], rest[3]]) as usize;
        if payload == 0 || payload + 2 > outer || rest.len() < 2 + outer {
            return None;
        }
        out.extend_from_slice(&rest[4..4 + payload]);
        rest = &rest[2 + outer..];
    }
    Some(out)
}
