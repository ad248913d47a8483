//! Prompt templates and the placeholder renderer.
//!
//! Templates live in `templates/*.txt`, split into named sections by lines of
//! the form `@@ name`. Placeholders are `{name}`; literal braces are doubled.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const BLOCKS: &str = include_str!("../templates/blocks.txt");
pub const PREDICTOR: &str = include_str!("../templates/predictor.txt");
pub const AGENTS: &str = include_str!("../templates/agents.txt");

pub const ALL_SOURCES: [(&str, &str); 3] = [("blocks", BLOCKS), ("predictor", PREDICTOR), ("agents", AGENTS)];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("template section '{0}' not found")]
    UnknownSection(String),
    #[error("unresolved placeholder '{{{0}}}'")]
    Unresolved(String),
    #[error("stray brace at byte {0}")]
    StrayBrace(usize),
}

/// Named section bodies of a template file, in file order.
pub fn sections(source: &str) -> Vec<(&str, &str)> {
    let mut out = Vec::new();
    let mut current: Option<(&str, usize)> = None;
    let mut offset = 0;
    for line in source.split_inclusive('\n') {
        if let Some(name) = line.strip_prefix("@@ ") {
            if let Some((n, start)) = current {
                out.push((n, trim_newlines(&source[start..offset])));
            }
            current = Some((name.trim(), offset + line.len()));
        }
        offset += line.len();
    }
    if let Some((n, start)) = current {
        out.push((n, trim_newlines(&source[start..])));
    }
    out
}

fn trim_newlines(s: &str) -> &str {
    s.trim_end_matches(['\n', '\r'])
}

pub fn section<'a>(source: &'a str, name: &str) -> Result<&'a str, PromptError> {
    sections(source).into_iter().find(|(n, _)| *n == name).map(|(_, body)| body).ok_or_else(|| PromptError::UnknownSection(name.to_owned()))
}

/// Placeholder values for one rendering.
#[derive(Clone, Debug, Default)]
pub struct Vars(BTreeMap<String, String>);

impl Vars {
    pub fn new() -> Self {
        Vars::default()
    }

    pub fn set(mut self, name: &str, value: impl ToString) -> Self {
        self.0.insert(name.to_owned(), value.to_string());
        self
    }

    pub fn insert(&mut self, name: &str, value: impl ToString) {
        self.0.insert(name.to_owned(), value.to_string());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_'
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn tokenize(template: &str) -> Result<Vec<Piece<'_>>, PromptError> {
    let bytes = template.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut text_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' => {
                if text_start < i {
                    out.push(Piece::Text(&template[text_start..i]));
                }
                let b = bytes[i];
                if bytes.get(i + 1) == Some(&b) {
                    out.push(Piece::Brace(b as char));
                    i += 2;
                } else if b == b'{' {
                    let mut j = i + 1;
                    while j < bytes.len() && is_ident_byte(bytes[j]) {
                        j += 1;
                    }
                    if j == i + 1 || bytes.get(j) != Some(&b'}') {
                        return Err(PromptError::StrayBrace(i));
                    }
                    out.push(Piece::Slot(&template[i + 1..j]));
                    i = j + 1;
                } else {
                    return Err(PromptError::StrayBrace(i));
                }
                text_start = i;
            }
            _ => i += 1,
        }
    }
    if text_start < bytes.len() {
        out.push(Piece::Text(&template[text_start..]));
    }
    Ok(out)
}

/// Placeholder names used by a template, in order of first use.
pub fn placeholders(template: &str) -> Result<Vec<String>, PromptError> {
    let mut names: Vec<String> = Vec::new();
    for p in tokenize(template)? {
        if let Piece::Slot(n) = p {
            if !names.iter().any(|x| x == n) {
                names.push(n.to_owned());
            }
        }
    }
    Ok(names)
}

/// Substitutes every placeholder; a placeholder without a value is an error.
pub fn render(template: &str, vars: &Vars) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 64);
    for p in tokenize(template)? {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Slot(n) => out.push_str(vars.get(n).ok_or_else(|| PromptError::Unresolved(n.to_owned()))?),
        }
    }
    Ok(out)
}

pub fn render_section(source: &str, name: &str, vars: &Vars) -> Result<String, PromptError> {
    render(section(source, name)?, vars)
}
