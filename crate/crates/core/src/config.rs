//! Line-oriented `key: value` configuration documents.
//!
//! All shaperd configuration files share one small syntax:
//!
//! ```text
//! # comment
//! name: strict-ascii
//! constraints:
//!   - function: printable_ascii_fraction
//!     mode: ge
//!     value: 0.5
//!     target: all
//! ```
//!
//! Unindented lines are top-level scalars. A top-level key with an empty value
//! opens a list section; inside it, `- key: value` starts a new entry and
//! further indented `key: value` lines extend that entry. `key: []` declares an
//! empty section. Blank lines and lines starting with `#` are ignored.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct DocumentError {
    pub line: usize,
    pub message: String,
}

impl DocumentError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub key: String,
    pub value: String,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub fields: Vec<Field>,
}

impl Entry {
    pub fn get(&self, key: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.key == key)
    }

    /// First field whose key is not in `allowed`.
    pub fn unknown_key(&self, allowed: &[&str]) -> Option<&Field> {
        self.fields
            .iter()
            .find(|f| !allowed.contains(&f.key.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub key: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    pub scalars: Vec<Field>,
    pub sections: Vec<Section>,
}

fn split_key_value(text: &str, line: usize) -> Result<(String, String), DocumentError> {
    let (key, value) = text
        .split_once(':')
        .ok_or_else(|| DocumentError::new(line, format!("expected `key: value`, got `{text}`")))?;
    let key = key.trim();
    if key.is_empty() || key.contains(char::is_whitespace) {
        return Err(DocumentError::new(line, format!("invalid key `{key}`")));
    }
    Ok((key.to_string(), value.trim().to_string()))
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, DocumentError> {
        let mut doc = Document::default();
        // Index into `doc.sections` of the section currently accepting entries.
        let mut open: Option<usize> = None;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let indented = raw.starts_with([' ', '\t']);

            if !indented {
                let (key, value) = split_key_value(trimmed, line)?;
                if doc.has_key(&key) {
                    return Err(DocumentError::new(line, format!("duplicate key `{key}`")));
                }
                if value.is_empty() || value == "[]" {
                    doc.sections.push(Section {
                        key,
                        line,
                        entries: Vec::new(),
                    });
                    open = (value.is_empty()).then(|| doc.sections.len() - 1);
                } else {
                    doc.scalars.push(Field { key, value, line });
                    open = None;
                }
                continue;
            }

            let section = match open {
                Some(idx) => &mut doc.sections[idx],
                None => {
                    return Err(DocumentError::new(
                        line,
                        "indented line outside of a list section",
                    ))
                }
            };

            let body = if let Some(rest) = trimmed.strip_prefix('-') {
                section.entries.push(Entry {
                    line,
                    fields: Vec::new(),
                });
                let rest = rest.trim();
                if rest.is_empty() {
                    continue;
                }
                rest
            } else {
                trimmed
            };

            let entry = section.entries.last_mut().ok_or_else(|| {
                DocumentError::new(line, "field before the first `-` entry marker")
            })?;
            let (key, value) = split_key_value(body, line)?;
            if entry.get(&key).is_some() {
                return Err(DocumentError::new(
                    line,
                    format!("duplicate key `{key}` in entry"),
                ));
            }
            entry.fields.push(Field { key, value, line });
        }
        Ok(doc)
    }

    fn has_key(&self, key: &str) -> bool {
        self.scalars.iter().any(|f| f.key == key) || self.sections.iter().any(|s| s.key == key)
    }

    pub fn scalar(&self, key: &str) -> Option<&Field> {
        self.scalars.iter().find(|f| f.key == key)
    }

    pub fn section(&self, key: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.key == key)
    }
}

/// Incremental writer producing text that [`Document::parse`] accepts.
#[derive(Debug, Default)]
pub struct DocumentWriter {
    out: String,
}

impl DocumentWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scalar(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.out.push_str(&format!("{key}: {value}\n"));
        self
    }

    /// Writes a list section. Each entry is a list of `(key, value)` pairs.
    pub fn section(&mut self, key: &str, entries: &[Vec<(&str, String)>]) -> &mut Self {
        if entries.is_empty() {
            self.out.push_str(&format!("{key}: []\n"));
            return self;
        }
        self.out.push_str(&format!("{key}:\n"));
        for entry in entries {
            for (i, (k, v)) in entry.iter().enumerate() {
                let marker = if i == 0 { "  - " } else { "    " };
                self.out.push_str(&format!("{marker}{k}: {v}\n"));
            }
        }
        self
    }

    pub fn finish(&mut self) -> String {
        std::mem::take(&mut self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scalars_and_sections() {
        let text = "\
# header comment
name: demo
constraints:
  - function: entropy_bits_per_byte
    mode: ge

  - function: frame_length_bytes
    value: 3
other: []
";
        let doc = Document::parse(text).unwrap();
        assert_eq!(doc.scalar("name").unwrap().value, "demo");
        let section = doc.section("constraints").unwrap();
        assert_eq!(section.entries.len(), 2);
        assert_eq!(section.entries[0].get("mode").unwrap().value, "ge");
        assert_eq!(section.entries[1].line, 7);
        assert!(doc.section("other").unwrap().entries.is_empty());
    }

    #[test]
    fn rejects_stray_indentation_and_duplicates() {
        assert_eq!(Document::parse("  mode: ge\n").unwrap_err().line, 1);
        assert_eq!(Document::parse("a: 1\na: 2\n").unwrap_err().line, 2);
        let err = Document::parse("c:\n  - mode: ge\n    mode: lt\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(Document::parse("c:\n    mode: ge\n").is_err());
        assert!(Document::parse("no colon here\n").is_err());
    }

    #[test]
    fn bare_dash_starts_entry() {
        let doc = Document::parse("c:\n  -\n    mode: ge\n").unwrap();
        assert_eq!(doc.section("c").unwrap().entries[0].fields.len(), 1);
    }

    #[test]
    fn writer_output_parses_back() {
        let text = DocumentWriter::new()
            .scalar("name", "x")
            .section(
                "rules",
                &[vec![
                    ("mode", "lt".to_string()),
                    ("value", "1.5".to_string()),
                ]],
            )
            .section("empty", &[])
            .finish();
        let doc = Document::parse(&text).unwrap();
        assert_eq!(doc.section("rules").unwrap().entries[0].fields.len(), 2);
        assert!(doc.section("empty").unwrap().entries.is_empty());
    }
}
