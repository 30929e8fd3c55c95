//! Minimal `{name}` placeholder substitution.
//!
//! A placeholder is `{` followed by one or more `[a-z0-9_]` characters and `}`.
//! Any other brace is literal, so JSON examples can appear in templates as-is.
//! Substituted values are not rescanned.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template references unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
}

fn placeholder_at(bytes: &[u8], start: usize) -> Option<(usize, &str)> {
    if bytes[start] != b'{' {
        return None;
    }
    let mut end = start + 1;
    while end < bytes.len() && (bytes[end].is_ascii_lowercase() || bytes[end].is_ascii_digit() || bytes[end] == b'_') {
        end += 1;
    }
    if end == start + 1 || end >= bytes.len() || bytes[end] != b'}' {
        return None;
    }
    let name = std::str::from_utf8(&bytes[start + 1..end]).ok()?;
    Some((end + 1, name))
}

pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let bytes = template.as_bytes();
    let mut out = String::with_capacity(template.len());
    let mut literal_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if let Some((next, name)) = placeholder_at(bytes, i) {
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::UnknownPlaceholder(name.to_string()))?;
            out.push_str(&template[literal_start..i]);
            out.push_str(value);
            i = next;
            literal_start = next;
        } else {
            i += 1;
        }
    }
    out.push_str(&template[literal_start..]);
    Ok(out)
}

/// Placeholder names in order of appearance.
pub fn placeholders(template: &str) -> Vec<&str> {
    let bytes = template.as_bytes();
    let mut names = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if let Some((next, name)) = placeholder_at(bytes, i) {
            names.push(name);
            i = next;
        } else {
            i += 1;
        }
    }
    names
}
