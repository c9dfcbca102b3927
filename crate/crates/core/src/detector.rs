//! Censor-side rule simulator.
//!
//! Rules reuse the constraint metric vocabulary. For each packet, EXEMPT rules
//! are tried first; a matching exemption clears the packet. Otherwise every
//! matching FLAG rule is recorded. Unlike constraints, a rule whose target
//! does not cover a packet simply does not fire.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use crate::config::{Document, DocumentWriter};
use crate::constraint::{
    constraint_fields, parse_constraint_entry, ComparisonMode, Constraint, ConstraintFunction,
    ConstraintSet, PacketTarget, ParseError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleAction {
    Flag,
    Exempt,
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flag => "flag",
            Self::Exempt => "exempt",
        })
    }
}

impl FromStr for RuleAction {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flag" => Ok(Self::Flag),
            "exempt" => Ok(Self::Exempt),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRule {
    pub function: ConstraintFunction,
    pub value: f64,
    pub mode: ComparisonMode,
    pub target: PacketTarget,
    pub action: RuleAction,
}

impl DetectorRule {
    pub fn new(
        action: RuleAction,
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
            action,
        }
    }

    /// A FLAG rule that fires exactly where `constraint` would be violated.
    pub fn flag_violation_of(constraint: &Constraint) -> Self {
        Self {
            function: constraint.function,
            value: constraint.value,
            mode: constraint.mode.negate(),
            target: constraint.target,
            action: RuleAction::Flag,
        }
    }

    fn as_constraint(&self) -> Constraint {
        Constraint::new(self.function, self.mode, self.value, self.target)
    }

    /// Whether this rule fires on a non-empty frame at `ordinal`.
    pub fn fires(&self, frame: &[u8], ordinal: u64) -> bool {
        self.target.matches(ordinal)
            && self
                .as_constraint()
                .check(frame, ordinal)
                .expect("frame is non-empty")
    }
}

/// FLAG rules equivalent to "some constraint of `set` is violated".
pub fn negate_constraints(set: &ConstraintSet) -> Vec<DetectorRule> {
    set.constraints
        .iter()
        .map(DetectorRule::flag_violation_of)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PacketOutcome {
    /// Zero-length frame, not evaluated.
    Skipped,
    Clean,
    /// Cleared by the EXEMPT rule at this index.
    Exempt(usize),
    /// Indices of the FLAG rules that fired.
    Flagged(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlowVerdict {
    pub flagged: bool,
    pub first_flagged_ordinal: Option<u64>,
    /// FLAG rule indices that fired on at least one packet, ascending.
    pub triggered_rules: Vec<usize>,
    pub per_packet: Vec<PacketOutcome>,
}

impl FlowVerdict {
    pub fn summary(&self) -> String {
        let count =
            |pred: fn(&PacketOutcome) -> bool| self.per_packet.iter().filter(|p| pred(p)).count();
        format!(
            "flagged={} first_flagged_ordinal={} packets={} flagged_packets={} exempt_packets={} skipped={} triggered_rules={:?}",
            self.flagged,
            self.first_flagged_ordinal
                .map_or_else(|| "-".to_string(), |o| o.to_string()),
            self.per_packet.len(),
            count(|p| matches!(p, PacketOutcome::Flagged(_))),
            count(|p| matches!(p, PacketOutcome::Exempt(_))),
            count(|p| matches!(p, PacketOutcome::Skipped)),
            self.triggered_rules,
        )
    }
}

pub fn inspect_flow<F: AsRef<[u8]>>(frames: &[F], rules: &[DetectorRule]) -> FlowVerdict {
    let mut verdict = FlowVerdict::default();
    let exempt: Vec<_> = rules
        .iter()
        .enumerate()
        .filter(|(_, r)| r.action == RuleAction::Exempt)
        .collect();
    let flag: Vec<_> = rules
        .iter()
        .enumerate()
        .filter(|(_, r)| r.action == RuleAction::Flag)
        .collect();

    for (ordinal, frame) in frames.iter().enumerate() {
        let frame = frame.as_ref();
        let ordinal = ordinal as u64;
        let outcome = if frame.is_empty() {
            PacketOutcome::Skipped
        } else if let Some(&(idx, _)) = exempt.iter().find(|(_, r)| r.fires(frame, ordinal)) {
            PacketOutcome::Exempt(idx)
        } else {
            let fired: Vec<usize> = flag
                .iter()
                .filter(|(_, r)| r.fires(frame, ordinal))
                .map(|&(i, _)| i)
                .collect();
            if fired.is_empty() {
                PacketOutcome::Clean
            } else {
                verdict.triggered_rules.extend(&fired);
                verdict.first_flagged_ordinal.get_or_insert(ordinal);
                verdict.flagged = true;
                PacketOutcome::Flagged(fired)
            }
        };
        verdict.per_packet.push(outcome);
    }
    verdict.triggered_rules.sort_unstable();
    verdict.triggered_rules.dedup();
    verdict
}

pub fn parse_rules(text: &str) -> Result<Vec<DetectorRule>, ParseError> {
    let doc = Document::parse(text)?;
    if let Some(f) = doc.scalars.iter().find(|f| f.key != "name") {
        return Err(ParseError::Malformed {
            line: f.line,
            message: format!("unknown top-level key `{}`", f.key),
        });
    }
    let section = doc.section("rules").ok_or(ParseError::Malformed {
        line: 1,
        message: "missing `rules` section".into(),
    })?;
    if let Some(extra) = doc.sections.iter().find(|s| s.key != "rules") {
        return Err(ParseError::Malformed {
            line: extra.line,
            message: format!("unknown section `{}`", extra.key),
        });
    }
    section
        .entries
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let action_field = entry.get("action").ok_or(ParseError::MalformedEntry {
                entry: index,
                line: entry.line,
                message: "missing `action`".into(),
            })?;
            let action = action_field.value.parse::<RuleAction>().map_err(|_| {
                ParseError::UnknownAction {
                    entry: index,
                    line: action_field.line,
                    action: action_field.value.clone(),
                }
            })?;
            let c = parse_constraint_entry(entry, index, &["action"])?;
            Ok(DetectorRule {
                function: c.function,
                value: c.value,
                mode: c.mode,
                target: c.target,
                action,
            })
        })
        .collect()
}

pub fn rules_to_document(rules: &[DetectorRule]) -> String {
    let entries: Vec<_> = rules
        .iter()
        .map(|r| {
            let mut fields = constraint_fields(&r.as_constraint());
            fields.push(("action", r.action.to_string()));
            fields
        })
        .collect();
    DocumentWriter::new().section("rules", &entries).finish()
}

/// Appends one record of a frames file: `u32` big-endian length, then bytes.
pub fn write_frame_record(out: &mut Vec<u8>, frame: &[u8]) {
    out.extend_from_slice(&(frame.len() as u32).to_be_bytes());
    out.extend_from_slice(frame);
}

pub fn parse_frames_file(bytes: &[u8]) -> io::Result<Vec<Vec<u8>>> {
    let mut frames = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "truncated record length",
            ));
        }
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("record of {len} bytes truncated to {}", rest.len()),
            ));
        }
        frames.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    Ok(frames)
}

/// Loads a flow from a frames file, or from a directory holding one file per
/// frame (ordered by file name).
pub fn load_flow(path: &Path) -> io::Result<Vec<Vec<u8>>> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)?
            .collect::<io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|e| e.path().is_file())
            .collect();
        entries.sort_by_key(|e| e.file_name());
        entries.iter().map(|e| fs::read(e.path())).collect()
    } else {
        parse_frames_file(&fs::read(path)?)
    }
}
