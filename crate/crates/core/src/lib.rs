//! Constraint-driven traffic shaping tunnel.
//!
//! The tunnel rewrites a TCP byte stream into self-delimiting frames whose
//! bytes satisfy user-supplied content constraints (entropy, printable-ASCII
//! share, frame length, histogram peak) and releases them under timing
//! constraints. The receiving endpoint strips framing and padding and
//! forwards the original stream unchanged.
//!
//! Modules, bottom-up:
//!
//! - [`constraint`]: metric functions, comparison modes, packet targets.
//! - [`framing`]: the wire format and its streaming decoder.
//! - [`shaper`]: buffering and the length-reduction / padding search.
//! - [`timer`]: timing policies and the release scheduler.
//! - [`proxy`]: TCP client and server endpoints.
//! - [`detector`]: a rule-based censor simulator for evaluation.
//! - [`bench`]: in-process overhead measurement.

pub mod bench;
pub mod clock;
pub mod config;
pub mod constraint;
pub mod detector;
pub mod framing;
pub mod proxy;
pub mod shaper;
pub mod timer;

pub use constraint::{
    eval_function, ComparisonMode, Constraint, ConstraintFunction, ConstraintSet, PacketTarget,
};
pub use framing::{decode_frames, encode_frame, FrameDecoder, FrameError};
pub use shaper::{ShapeBuffer, ShapeError, ShapedFrame, Shaper, ShaperConfig};
pub use timer::{EmissionQueue, TimingPolicy};
