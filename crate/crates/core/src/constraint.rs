//! Content constraints over wire-frame bytes.
//!
//! A [`Constraint`] pairs a metric function with a comparison value, a mode and
//! a packet target. Metrics are computed over the complete on-wire frame,
//! length fields and padding included, since that is what an observer sees.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use thiserror::Error;

use crate::config::{Document, DocumentError, DocumentWriter, Entry, Field};

/// Absolute tolerance used by `eq`/`neq` on real-valued metrics.
pub const REAL_EQ_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("metric requires a non-empty byte sequence")]
pub struct EmptyInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintFunction {
    EntropyBitsPerByte,
    PrintableAsciiFraction,
    FrameLengthBytes,
    ByteHistogramMaxFraction,
}

impl ConstraintFunction {
    pub const ALL: [ConstraintFunction; 4] = [
        ConstraintFunction::EntropyBitsPerByte,
        ConstraintFunction::PrintableAsciiFraction,
        ConstraintFunction::FrameLengthBytes,
        ConstraintFunction::ByteHistogramMaxFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::EntropyBitsPerByte => "entropy_bits_per_byte",
            Self::PrintableAsciiFraction => "printable_ascii_fraction",
            Self::FrameLengthBytes => "frame_length_bytes",
            Self::ByteHistogramMaxFraction => "byte_histogram_max_fraction",
        }
    }

    /// Integer-valued metrics compare exactly under `eq`/`neq`.
    pub fn is_integer_valued(self) -> bool {
        matches!(self, Self::FrameLengthBytes)
    }

    /// Whether `value` is a legal comparison value for this metric.
    pub fn accepts_value(self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match self {
            Self::EntropyBitsPerByte => (0.0..=8.0).contains(&value),
            Self::PrintableAsciiFraction | Self::ByteHistogramMaxFraction => {
                (0.0..=1.0).contains(&value)
            }
            Self::FrameLengthBytes => value >= 0.0 && value.fract() == 0.0,
        }
    }
}

impl fmt::Display for ConstraintFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConstraintFunction {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|f| f.name() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComparisonMode {
    Eq,
    Neq,
    Lt,
    Le,
    Gt,
    Ge,
}

impl ComparisonMode {
    pub const ALL: [ComparisonMode; 6] = [
        ComparisonMode::Eq,
        ComparisonMode::Neq,
        ComparisonMode::Lt,
        ComparisonMode::Le,
        ComparisonMode::Gt,
        ComparisonMode::Ge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Eq => "eq",
            Self::Neq => "neq",
            Self::Lt => "lt",
            Self::Le => "le",
            Self::Gt => "gt",
            Self::Ge => "ge",
        }
    }

    /// The complementary mode: `m.negate().compare(..)` is `!m.compare(..)`.
    pub fn negate(self) -> Self {
        match self {
            Self::Eq => Self::Neq,
            Self::Neq => Self::Eq,
            Self::Lt => Self::Ge,
            Self::Le => Self::Gt,
            Self::Gt => Self::Le,
            Self::Ge => Self::Lt,
        }
    }

    /// `measured <op> reference`. Equality is exact when `exact` is set,
    /// otherwise within [`REAL_EQ_EPSILON`].
    pub fn compare(self, measured: f64, reference: f64, exact: bool) -> bool {
        let equal = if exact {
            measured == reference
        } else {
            (measured - reference).abs() <= REAL_EQ_EPSILON
        };
        match self {
            Self::Eq => equal,
            Self::Neq => !equal,
            Self::Lt => measured < reference,
            Self::Le => measured <= reference,
            Self::Gt => measured > reference,
            Self::Ge => measured >= reference,
        }
    }
}

impl fmt::Display for ComparisonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComparisonMode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL.into_iter().find(|m| m.name() == lower).ok_or(())
    }
}

/// Which packet ordinals (zero-based, per direction per connection) a rule
/// applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketTarget {
    All,
    Index(u64),
    /// Inclusive on both ends.
    Range {
        lo: u64,
        hi: u64,
    },
    FirstN(u64),
}

impl PacketTarget {
    pub fn matches(self, ordinal: u64) -> bool {
        match self {
            Self::All => true,
            Self::Index(i) => ordinal == i,
            Self::Range { lo, hi } => lo <= ordinal && ordinal <= hi,
            Self::FirstN(n) => ordinal < n,
        }
    }
}

impl fmt::Display for PacketTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Index(i) => write!(f, "index:{i}"),
            Self::Range { lo, hi } => write!(f, "range:{lo}-{hi}"),
            Self::FirstN(n) => write!(f, "first:{n}"),
        }
    }
}

impl FromStr for PacketTarget {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Self::All);
        }
        let (kind, arg) = s.split_once(':').ok_or(())?;
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| ());
        match kind {
            "index" => Ok(Self::Index(num(arg)?)),
            "first" => match num(arg)? {
                0 => Err(()),
                n => Ok(Self::FirstN(n)),
            },
            "range" => {
                let (lo, hi) = arg.split_once('-').ok_or(())?;
                let (lo, hi) = (num(lo)?, num(hi)?);
                if lo > hi {
                    return Err(());
                }
                Ok(Self::Range { lo, hi })
            }
            _ => Err(()),
        }
    }
}

/// Byte-value histogram of a sequence. Every metric is a function of it, so
/// the shaper can update one incrementally while walking candidates.
#[derive(Clone, PartialEq, Eq)]
pub struct ByteStats {
    counts: [u32; 256],
    len: usize,
}

impl fmt::Debug for ByteStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ByteStats").field("len", &self.len).finish()
    }
}

impl Default for ByteStats {
    fn default() -> Self {
        Self {
            counts: [0; 256],
            len: 0,
        }
    }
}

const ENTROPY_TABLE_LEN: usize = 1 << 17;

// c * log2(c) for small counts; larger counts fall back to direct evaluation.
fn c_log2_c_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| (0..ENTROPY_TABLE_LEN).map(c_log2_c_direct).collect())
}

fn c_log2_c_direct(count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        let c = count as f64;
        c * c.log2()
    }
}

impl ByteStats {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut stats = Self::default();
        stats.add_slice(bytes);
        stats
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self, byte: u8) -> u32 {
        self.counts[byte as usize]
    }

    #[inline]
    pub fn add(&mut self, byte: u8) {
        self.counts[byte as usize] += 1;
        self.len += 1;
    }

    /// Panics if `byte` is not present.
    #[inline]
    pub fn remove(&mut self, byte: u8) {
        let slot = &mut self.counts[byte as usize];
        *slot = slot.checked_sub(1).expect("removing absent byte");
        self.len -= 1;
    }

    pub fn add_slice(&mut self, bytes: &[u8]) {
        if bytes.len() < 64 {
            bytes.iter().for_each(|&b| self.add(b));
            return;
        }
        // Four interleaved tables avoid store-forwarding stalls on runs of
        // equal bytes.
        let mut partial = [[0u32; 256]; 4];
        let mut chunks = bytes.chunks_exact(4);
        for c in &mut chunks {
            partial[0][c[0] as usize] += 1;
            partial[1][c[1] as usize] += 1;
            partial[2][c[2] as usize] += 1;
            partial[3][c[3] as usize] += 1;
        }
        for &b in chunks.remainder() {
            partial[0][b as usize] += 1;
        }
        for (i, slot) in self.counts.iter_mut().enumerate() {
            *slot += partial[0][i] + partial[1][i] + partial[2][i] + partial[3][i];
        }
        self.len += bytes.len();
    }

    pub fn remove_slice(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.remove(b);
        }
    }

    pub fn printable_count(&self) -> u64 {
        self.counts[0x20..=0x7E].iter().map(|&c| c as u64).sum()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Shannon entropy of the empirical byte distribution, bits per byte.
    pub fn entropy(&self) -> Result<f64, EmptyInput> {
        if self.len == 0 {
            return Err(EmptyInput);
        }
        let max = self.max_count();
        if max as usize == self.len {
            return Ok(0.0);
        }
        if self.len.is_multiple_of(256) && self.counts.iter().all(|&c| c == max) {
            return Ok(8.0);
        }
        // H = log2(n) - (1/n) * sum(c * log2 c), with 0 log 0 = 0.
        let table = c_log2_c_table();
        let mut acc = [0.0f64; 4];
        if (max as usize) < table.len() {
            for c in self.counts.chunks_exact(4) {
                for lane in 0..4 {
                    acc[lane] += table[c[lane] as usize];
                }
            }
        } else {
            for (i, &c) in self.counts.iter().enumerate() {
                acc[i % 4] += c_log2_c_direct(c as usize);
            }
        }
        let sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        let n = self.len as f64;
        Ok((n.log2() - sum / n).clamp(0.0, 8.0))
    }

    pub fn metric(&self, function: ConstraintFunction) -> Result<f64, EmptyInput> {
        if function == ConstraintFunction::FrameLengthBytes {
            return Ok(self.len as f64);
        }
        if self.len == 0 {
            return Err(EmptyInput);
        }
        let n = self.len as f64;
        Ok(match function {
            ConstraintFunction::EntropyBitsPerByte => self.entropy()?,
            ConstraintFunction::PrintableAsciiFraction => self.printable_count() as f64 / n,
            ConstraintFunction::ByteHistogramMaxFraction => self.max_count() as f64 / n,
            ConstraintFunction::FrameLengthBytes => unreachable!(),
        })
    }
}

/// Computes a metric over `bytes`.
pub fn eval_function(function: ConstraintFunction, bytes: &[u8]) -> Result<f64, EmptyInput> {
    if function == ConstraintFunction::FrameLengthBytes {
        return Ok(bytes.len() as f64);
    }
    ByteStats::from_bytes(bytes).metric(function)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub function: ConstraintFunction,
    pub value: f64,
    pub mode: ComparisonMode,
    pub target: PacketTarget,
    /// Optimizer hint slot. Stored and serialized, never consulted by evaluation.
    pub type_hint: Option<String>,
}

impl Constraint {
    pub fn new(
        function: ConstraintFunction,
        mode: ComparisonMode,
        value: f64,
        target: PacketTarget,
    ) -> Self {
        Self {
            function,
            value,
            mode,
            target,
            type_hint: None,
        }
    }

    /// Compares a measured metric against this constraint, ignoring the target.
    pub fn holds_for(&self, measured: f64) -> bool {
        self.mode
            .compare(measured, self.value, self.function.is_integer_valued())
    }

    pub fn check_stats(&self, stats: &ByteStats) -> Result<bool, EmptyInput> {
        Ok(self.holds_for(stats.metric(self.function)?))
    }

    /// Vacuously true when the target does not cover `ordinal`.
    pub fn check(&self, frame: &[u8], ordinal: u64) -> Result<bool, EmptyInput> {
        if !self.target.matches(ordinal) {
            return Ok(true);
        }
        if frame.is_empty() {
            return Err(EmptyInput);
        }
        Ok(self.holds_for(eval_function(self.function, frame)?))
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} on {}",
            self.function, self.mode, self.value, self.target
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub name: Option<String>,
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        Self {
            name: None,
            constraints,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    /// Constraints whose target covers `ordinal`, in set order.
    pub fn active_at(&self, ordinal: u64) -> impl Iterator<Item = &Constraint> {
        self.constraints
            .iter()
            .filter(move |c| c.target.matches(ordinal))
    }

    /// Returns the violated constraints in set order; empty iff all hold.
    pub fn check_all(&self, frame: &[u8], ordinal: u64) -> Result<Vec<&Constraint>, EmptyInput> {
        if frame.is_empty() {
            return Err(EmptyInput);
        }
        let mut stats: Option<ByteStats> = None;
        let mut violated = Vec::new();
        for c in self.active_at(ordinal) {
            let measured = match c.function {
                ConstraintFunction::FrameLengthBytes => frame.len() as f64,
                f => stats
                    .get_or_insert_with(|| ByteStats::from_bytes(frame))
                    .metric(f)?,
            };
            if !c.holds_for(measured) {
                violated.push(c);
            }
        }
        Ok(violated)
    }

    pub fn is_satisfied_by(&self, frame: &[u8], ordinal: u64) -> Result<bool, EmptyInput> {
        Ok(self.check_all(frame, ordinal)?.is_empty())
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let doc = Document::parse(text)?;
        for field in &doc.scalars {
            if field.key != "name" {
                return Err(ParseError::Malformed {
                    line: field.line,
                    message: format!("unknown top-level key `{}`", field.key),
                });
            }
        }
        let section = doc.section("constraints").ok_or(ParseError::Malformed {
            line: 1,
            message: "missing `constraints` section".into(),
        })?;
        if let Some(extra) = doc.sections.iter().find(|s| s.key != "constraints") {
            return Err(ParseError::Malformed {
                line: extra.line,
                message: format!("unknown section `{}`", extra.key),
            });
        }
        let constraints = section
            .entries
            .iter()
            .enumerate()
            .map(|(index, entry)| parse_constraint_entry(entry, index, &[]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            name: doc.scalar("name").map(|f| f.value.clone()),
            constraints,
        })
    }

    pub fn to_document(&self) -> String {
        let mut w = DocumentWriter::new();
        if let Some(name) = &self.name {
            w.scalar("name", name);
        }
        let entries: Vec<_> = self.constraints.iter().map(constraint_fields).collect();
        w.section("constraints", &entries);
        w.finish()
    }
}

/// Errors raised while loading a constraint or rule document. `entry` is the
/// zero-based position in the list section.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("entry {entry} (line {line}): {message}")]
    MalformedEntry {
        entry: usize,
        line: usize,
        message: String,
    },
    #[error("entry {entry} (line {line}): unknown function `{name}`")]
    UnknownFunction {
        entry: usize,
        line: usize,
        name: String,
    },
    #[error("entry {entry} (line {line}): unknown mode `{mode}`")]
    UnknownMode {
        entry: usize,
        line: usize,
        mode: String,
    },
    #[error("entry {entry} (line {line}): value `{value}` out of range for {function}")]
    ValueOutOfRange {
        entry: usize,
        line: usize,
        function: ConstraintFunction,
        value: String,
    },
    #[error("entry {entry} (line {line}): malformed target `{target}`")]
    MalformedTarget {
        entry: usize,
        line: usize,
        target: String,
    },
    #[error("entry {entry} (line {line}): unknown action `{action}`")]
    UnknownAction {
        entry: usize,
        line: usize,
        action: String,
    },
}

impl ParseError {
    pub fn line(&self) -> usize {
        match self {
            Self::Malformed { line, .. }
            | Self::MalformedEntry { line, .. }
            | Self::UnknownFunction { line, .. }
            | Self::UnknownMode { line, .. }
            | Self::ValueOutOfRange { line, .. }
            | Self::MalformedTarget { line, .. }
            | Self::UnknownAction { line, .. } => *line,
        }
    }
}

impl From<DocumentError> for ParseError {
    fn from(e: DocumentError) -> Self {
        Self::Malformed {
            line: e.line,
            message: e.message,
        }
    }
}

const CONSTRAINT_KEYS: [&str; 5] = ["function", "mode", "value", "target", "type"];

/// Parses one list entry into a [`Constraint`]. `extra_keys` are additional
/// keys the caller handles itself (the detector's `action`).
pub(crate) fn parse_constraint_entry(
    entry: &Entry,
    index: usize,
    extra_keys: &[&str],
) -> Result<Constraint, ParseError> {
    let malformed = |line: usize, message: String| ParseError::MalformedEntry {
        entry: index,
        line,
        message,
    };
    if let Some(field) = entry.unknown_key(&[&CONSTRAINT_KEYS[..], extra_keys].concat()) {
        return Err(malformed(
            field.line,
            format!("unknown key `{}`", field.key),
        ));
    }
    let required = |key: &str| -> Result<&Field, ParseError> {
        entry
            .get(key)
            .ok_or_else(|| malformed(entry.line, format!("missing `{key}`")))
    };

    let field = required("function")?;
    let function =
        field
            .value
            .parse::<ConstraintFunction>()
            .map_err(|_| ParseError::UnknownFunction {
                entry: index,
                line: field.line,
                name: field.value.clone(),
            })?;

    let field = required("mode")?;
    let mode = field
        .value
        .parse::<ComparisonMode>()
        .map_err(|_| ParseError::UnknownMode {
            entry: index,
            line: field.line,
            mode: field.value.clone(),
        })?;

    let field = required("value")?;
    let value = field
        .value
        .parse::<f64>()
        .ok()
        .filter(|v| function.accepts_value(*v))
        .ok_or_else(|| ParseError::ValueOutOfRange {
            entry: index,
            line: field.line,
            function,
            value: field.value.clone(),
        })?;

    let field = required("target")?;
    let target = field
        .value
        .parse::<PacketTarget>()
        .map_err(|_| ParseError::MalformedTarget {
            entry: index,
            line: field.line,
            target: field.value.clone(),
        })?;

    Ok(Constraint {
        function,
        value,
        mode,
        target,
        type_hint: entry.get("type").map(|f| f.value.clone()),
    })
}

pub(crate) fn constraint_fields(c: &Constraint) -> Vec<(&'static str, String)> {
    let mut fields = vec![
        ("function", c.function.to_string()),
        ("mode", c.mode.to_string()),
        ("value", c.value.to_string()),
        ("target", c.target.to_string()),
    ];
    if let Some(hint) = &c.type_hint {
        fields.push(("type", hint.clone()));
    }
    fields
}

#[cfg(test)]
mod tests {
    use super::*;
    use ComparisonMode::*;
    use ConstraintFunction::*;

    fn abcd_nul() -> Vec<u8> {
        let mut v = b"ABCD".to_vec();
        v.extend_from_slice(&[0; 4]);
        v
    }

    #[test]
    fn metric_anchors() {
        assert_eq!(eval_function(EntropyBitsPerByte, &[0u8; 100]).unwrap(), 0.0);
        let all: Vec<u8> = (0..=255).collect();
        assert_eq!(eval_function(EntropyBitsPerByte, &all).unwrap(), 8.0);
        assert_eq!(
            eval_function(PrintableAsciiFraction, &abcd_nul()).unwrap(),
            0.5
        );
        // -2 * (0.5 * log2 0.5)
        assert_eq!(eval_function(EntropyBitsPerByte, b"AABB").unwrap(), 1.0);
        assert_eq!(eval_function(FrameLengthBytes, &[]).unwrap(), 0.0);
        assert_eq!(
            eval_function(ByteHistogramMaxFraction, b"AAAB").unwrap(),
            0.75
        );
    }

    #[test]
    fn empty_input_rejected_for_distribution_metrics() {
        for f in [
            EntropyBitsPerByte,
            PrintableAsciiFraction,
            ByteHistogramMaxFraction,
        ] {
            assert_eq!(eval_function(f, &[]), Err(EmptyInput));
        }
    }

    #[test]
    fn printable_range_is_space_through_tilde() {
        assert_eq!(eval_function(PrintableAsciiFraction, b" ~").unwrap(), 1.0);
        assert_eq!(
            eval_function(PrintableAsciiFraction, &[0x1F, 0x7F]).unwrap(),
            0.0
        );
    }

    #[test]
    fn uniform_multiples_reach_eight_bits() {
        let twice: Vec<u8> = (0..512).map(|i| (i % 256) as u8).collect();
        assert_eq!(eval_function(EntropyBitsPerByte, &twice).unwrap(), 8.0);
        let mut skewed = twice.clone();
        skewed[0] = 1;
        assert!(eval_function(EntropyBitsPerByte, &skewed).unwrap() < 8.0);
    }

    #[test]
    fn target_matching() {
        assert!(PacketTarget::FirstN(1).matches(0));
        assert!(!PacketTarget::FirstN(1).matches(1));
        assert!(PacketTarget::Range { lo: 2, hi: 4 }.matches(3));
        assert!(!PacketTarget::Range { lo: 2, hi: 4 }.matches(5));
        assert!(PacketTarget::Index(7).matches(7));
        assert!(PacketTarget::All.matches(u64::MAX));
    }

    #[test]
    fn target_text_forms() {
        for t in ["all", "index:3", "range:2-4", "first:1"] {
            assert_eq!(t.parse::<PacketTarget>().unwrap().to_string(), t);
        }
        for bad in ["", "first:0", "range:4-2", "index:-1", "every:2", "range:1"] {
            assert!(bad.parse::<PacketTarget>().is_err(), "{bad}");
        }
    }

    #[test]
    fn check_examples() {
        let c = Constraint::new(PrintableAsciiFraction, Ge, 0.5, PacketTarget::All);
        assert!(c.check(&abcd_nul(), 0).unwrap());

        let c = Constraint::new(EntropyBitsPerByte, Lt, 4.0, PacketTarget::FirstN(1));
        let all: Vec<u8> = (0..=255).collect();
        assert!(c.check(&all, 5).unwrap());

        let c = Constraint::new(FrameLengthBytes, Eq, 8.0, PacketTarget::All);
        assert!(!c.check(&[0; 7], 0).unwrap());
    }

    #[test]
    fn real_equality_uses_epsilon() {
        let c = Constraint::new(PrintableAsciiFraction, Eq, 0.5 + 1e-10, PacketTarget::All);
        assert!(c.check(&abcd_nul(), 0).unwrap());
        let c = Constraint::new(PrintableAsciiFraction, Neq, 0.5 + 1e-10, PacketTarget::All);
        assert!(!c.check(&abcd_nul(), 0).unwrap());
    }

    #[test]
    fn check_all_reports_violations_in_order() {
        let frame = [7u8; 10];
        let empty = ConstraintSet::default();
        assert!(empty.check_all(&frame, 0).unwrap().is_empty());

        let set = ConstraintSet::new(vec![
            Constraint::new(FrameLengthBytes, Eq, 10.0, PacketTarget::All),
            Constraint::new(FrameLengthBytes, Eq, 11.0, PacketTarget::All),
        ]);
        let violated = set.check_all(&frame, 0).unwrap();
        assert_eq!(violated, vec![&set.constraints[1]]);

        let set = ConstraintSet::new(vec![
            Constraint::new(FrameLengthBytes, Eq, 1.0, PacketTarget::Index(0)),
            Constraint::new(EntropyBitsPerByte, Gt, 7.0, PacketTarget::Index(0)),
        ]);
        assert!(set.check_all(&frame, 3).unwrap().is_empty());
        assert_eq!(set.check_all(&frame, 0).unwrap().len(), 2);
        assert_eq!(set.check_all(&[], 0), Err(EmptyInput));
    }

    #[test]
    fn negated_mode_is_complement() {
        for m in ComparisonMode::ALL {
            for (a, b) in [(0.5, 0.5), (0.4, 0.5), (0.6, 0.5), (0.5 + 1e-12, 0.5)] {
                for exact in [true, false] {
                    assert_ne!(m.compare(a, b, exact), m.negate().compare(a, b, exact));
                }
            }
        }
    }

    #[test]
    fn parses_document() {
        let doc = "\
name: sample-set
constraints:
  - function: printable_ascii_fraction
    mode: ge
    value: 0.5
    target: all
    type: ascii
";
        let set = ConstraintSet::parse(doc).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.name.as_deref(), Some("sample-set"));
        assert_eq!(set.constraints[0].type_hint.as_deref(), Some("ascii"));
        assert_eq!(ConstraintSet::parse(&set.to_document()).unwrap(), set);
    }

    fn single(entry: &str) -> Result<ConstraintSet, ParseError> {
        ConstraintSet::parse(&format!("constraints:\n{entry}"))
    }

    #[test]
    fn parse_errors_name_the_entry() {
        let ok = "  - function: frame_length_bytes\n    mode: le\n    value: 64\n    target: all\n";
        let err = single(&format!(
            "{ok}  - function: bogus_metric\n    mode: ge\n    value: 1\n    target: all\n"
        ))
        .unwrap_err();
        assert!(
            matches!(
                err,
                ParseError::UnknownFunction {
                    entry: 1,
                    line: 6,
                    ..
                }
            ),
            "{err:?}"
        );

        let err = single(
            "  - function: entropy_bits_per_byte\n    mode: ge\n    value: 9.0\n    target: all\n",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::ValueOutOfRange { entry: 0, .. }));

        let err = single(
            "  - function: frame_length_bytes\n    mode: le\n    value: 6.5\n    target: all\n",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::ValueOutOfRange { .. }));

        let err = single(
            "  - function: frame_length_bytes\n    mode: about\n    value: 6\n    target: all\n",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::UnknownMode { .. }));

        let err = single(
            "  - function: frame_length_bytes\n    mode: eq\n    value: 6\n    target: range:5-1\n",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::MalformedTarget { .. }));

        let err =
            single("  - function: frame_length_bytes\n    mode: eq\n    value: 6\n").unwrap_err();
        assert!(matches!(err, ParseError::MalformedEntry { entry: 0, .. }));

        let err = single(
            "  - function: frame_length_bytes\n    mode: eq\n    value: nan\n    target: all\n",
        )
        .unwrap_err();
        assert!(matches!(err, ParseError::ValueOutOfRange { .. }));

        assert!(matches!(
            ConstraintSet::parse("name: x\n"),
            Err(ParseError::Malformed { .. })
        ));
        assert!(matches!(
            ConstraintSet::parse("constraints: []\nbogus: 1\n"),
            Err(ParseError::Malformed { line: 2, .. })
        ));
    }
}
