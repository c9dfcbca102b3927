//! Tunnel wire format.
//!
//! ```text
//! +-----------+-------------+-----------------+-----------------+
//! | outer_len | payload_len | payload         | padding         |
//! | u16 BE    | u16 BE      | payload_len B   | outer_len-2-... |
//! +-----------+-------------+-----------------+-----------------+
//! ```
//!
//! `outer_len` counts every byte after itself, so a frame occupies
//! `2 + outer_len` bytes on the wire. The padding length is implied by the two
//! length fields and padding bytes are discarded by the receiver.

use thiserror::Error;

pub const HEADER_LEN: usize = 4;
pub const DEFAULT_MAX_FRAME_LEN: usize = 1400;
/// Largest on-wire frame the 16-bit outer length can describe.
pub const ABSOLUTE_MAX_FRAME_LEN: usize = 2 + u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame payload is empty")]
    EmptyPayload,
    #[error("frame of {size} bytes exceeds the {max}-byte limit")]
    FrameTooLarge { size: usize, max: usize },
    #[error("malformed frame header (outer_len {outer_len}, payload_len {payload_len})")]
    MalformedFrame { outer_len: u16, payload_len: u16 },
}

/// Length fields for a frame carrying `payload_len` bytes and `padding_len`
/// bytes of padding. The caller guarantees the sizes fit.
#[inline]
pub fn header(payload_len: usize, padding_len: usize) -> [u8; HEADER_LEN] {
    let outer = (2 + payload_len + padding_len) as u16;
    let inner = payload_len as u16;
    let [o0, o1] = outer.to_be_bytes();
    let [i0, i1] = inner.to_be_bytes();
    [o0, o1, i0, i1]
}

/// On-wire size of a frame with the given payload and padding lengths.
#[inline]
pub fn frame_len(payload_len: usize, padding_len: usize) -> usize {
    HEADER_LEN + payload_len + padding_len
}

pub fn encode_frame(
    payload: &[u8],
    padding: &[u8],
    max_frame_len: usize,
) -> Result<Vec<u8>, FrameError> {
    if payload.is_empty() {
        return Err(FrameError::EmptyPayload);
    }
    let size = frame_len(payload.len(), padding.len());
    let max = max_frame_len.min(ABSOLUTE_MAX_FRAME_LEN);
    if size > max {
        return Err(FrameError::FrameTooLarge { size, max });
    }
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(&header(payload.len(), padding.len()));
    out.extend_from_slice(payload);
    out.extend_from_slice(padding);
    Ok(out)
}

/// Location of one complete frame inside a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FrameSpan {
    payload_start: usize,
    payload_len: usize,
    total: usize,
}

/// Parses the frame at the start of `buf`. `Ok(None)` means more bytes are
/// needed. Header inconsistencies are reported as soon as they are visible.
fn parse_frame(buf: &[u8]) -> Result<Option<FrameSpan>, FrameError> {
    if buf.len() < 2 {
        return Ok(None);
    }
    let outer_len = u16::from_be_bytes([buf[0], buf[1]]);
    if outer_len < 3 {
        let payload_len = match buf.get(2..4) {
            Some(b) => u16::from_be_bytes([b[0], b[1]]),
            None => 0,
        };
        return Err(FrameError::MalformedFrame {
            outer_len,
            payload_len,
        });
    }
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let payload_len = u16::from_be_bytes([buf[2], buf[3]]);
    if payload_len == 0 || payload_len as usize + 2 > outer_len as usize {
        return Err(FrameError::MalformedFrame {
            outer_len,
            payload_len,
        });
    }
    let total = 2 + outer_len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    Ok(Some(FrameSpan {
        payload_start: HEADER_LEN,
        payload_len: payload_len as usize,
        total,
    }))
}

/// Greedily decodes complete frames from the front of `stream`. Returns the
/// recovered payloads and the unconsumed tail (a partial frame, if any).
pub fn decode_frames(stream: &[u8]) -> Result<(Vec<Vec<u8>>, &[u8]), FrameError> {
    let mut payloads = Vec::new();
    let mut rest = stream;
    while let Some(span) = parse_frame(rest)? {
        payloads.push(rest[span.payload_start..span.payload_start + span.payload_len].to_vec());
        rest = &rest[span.total..];
    }
    Ok((payloads, rest))
}

/// Streaming decoder that keeps the residual between reads.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    frames: u64,
    padding_bytes: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes of an incomplete trailing frame.
    pub fn residual(&self) -> &[u8] {
        &self.buf
    }

    pub fn frames_decoded(&self) -> u64 {
        self.frames
    }

    pub fn padding_bytes(&self) -> u64 {
        self.padding_bytes
    }

    /// Appends `chunk` and calls `on_frame(frame, payload)` for each frame it
    /// completes. A malformed header leaves the decoder unusable; the caller
    /// is expected to tear the connection down.
    pub fn feed(
        &mut self,
        chunk: &[u8],
        mut on_frame: impl FnMut(&[u8], &[u8]),
    ) -> Result<(), FrameError> {
        self.buf.extend_from_slice(chunk);
        let mut offset = 0;
        let result = loop {
            match parse_frame(&self.buf[offset..]) {
                Ok(Some(span)) => {
                    let frame = &self.buf[offset..offset + span.total];
                    let payload = &frame[span.payload_start..span.payload_start + span.payload_len];
                    on_frame(frame, payload);
                    self.frames += 1;
                    self.padding_bytes += (span.total - HEADER_LEN - span.payload_len) as u64;
                    offset += span.total;
                }
                Ok(None) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        self.buf.drain(..offset);
        result
    }
}
