//! Block-structured text templates with named placeholders.
//!
//! ```text
//! # comment
//! [section candidates]
//! Candidate CCS Codes:
//! {candidates}
//! ```
//!
//! A block renders only if every placeholder it mentions has a value; a line
//! whose placeholders all expand to nothing is dropped.

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TemplateError {
    #[error("template line {line}: text outside any [section]")]
    Orphan { line: usize },
    #[error("template line {line}: unterminated placeholder")]
    Unterminated { line: usize },
    #[error("template line {line}: duplicate section `{name}`")]
    DuplicateSection { line: usize, name: String },
    #[error("template has no `{{{0}}}` placeholder")]
    MissingPlaceholder(String),
}

#[derive(Clone, Debug, PartialEq)]
struct Section {
    name: String,
    lines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    sections: Vec<Section>,
}

fn placeholders(line: &str, line_no: usize) -> Result<Vec<&str>, TemplateError> {
    let mut out = Vec::new();
    let mut rest = line;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or(TemplateError::Unterminated { line: line_no })?;
        let name = &after[..close];
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push(name);
        }
        rest = &after[close + 1..];
    }
    Ok(out)
}

impl Template {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut sections: Vec<Section> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.trim().strip_prefix("[section ").and_then(|r| r.strip_suffix(']')) {
                let name = name.trim().to_string();
                if sections.iter().any(|s| s.name == name) {
                    return Err(TemplateError::DuplicateSection { line: line_no, name });
                }
                sections.push(Section { name, lines: Vec::new() });
                continue;
            }
            placeholders(line, line_no)?;
            match sections.last_mut() {
                Some(s) => s.lines.push(line.to_string()),
                None if line.trim().is_empty() => {}
                None => return Err(TemplateError::Orphan { line: line_no }),
            }
        }
        for s in &mut sections {
            while s.lines.last().is_some_and(|l| l.trim().is_empty()) {
                s.lines.pop();
            }
        }
        Ok(Self { sections })
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.name.as_str())
    }

    /// Every placeholder name used anywhere in the template.
    pub fn placeholder_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .sections
            .iter()
            .flat_map(|s| s.lines.iter())
            .flat_map(|l| placeholders(l, 0).unwrap_or_default())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn require(&self, names: &[&str]) -> Result<(), TemplateError> {
        let have = self.placeholder_names();
        match names.iter().find(|n| !have.contains(n)) {
            Some(n) => Err(TemplateError::MissingPlaceholder((*n).to_string())),
            None => Ok(()),
        }
    }

    /// Renders the blocks whose placeholders all have values, as
    /// `(section name, text)` in template order.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Vec<(String, String)> {
        let mut out = Vec::new();
        'section: for s in &self.sections {
            let mut lines = Vec::with_capacity(s.lines.len());
            for line in &s.lines {
                let names = placeholders(line, 0).unwrap_or_default();
                if names.iter().any(|n| !values.contains_key(n)) {
                    continue 'section;
                }
                let mut rendered = line.clone();
                for n in &names {
                    rendered = rendered.replace(&format!("{{{n}}}"), &values[n]);
                }
                if !names.is_empty() && rendered.trim().is_empty() {
                    continue;
                }
                lines.push(rendered);
            }
            out.push((s.name.clone(), lines.join("\n")));
        }
        out
    }
}
