//! Shared plumbing for the line-oriented text formats (datasets,
//! checkpoints, embeddings, metrics logs).
//!
//! Floats are written with `{:e}`, the shortest decimal that parses back to
//! the same bits, so every format round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MixcoError, Result};

pub(crate) fn push_f64s(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| MixcoError::io(path, e))
}

pub(crate) struct LineReader {
    path: PathBuf,
    text: String,
    pos: usize,
    line_start: usize,
}

impl LineReader {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MixcoError::io(path, e))?;
        let text = String::from_utf8(bytes).map_err(|e| MixcoError::Format {
            path: path.to_path_buf(),
            offset: e.utf8_error().valid_up_to() as u64,
            message: "invalid UTF-8".into(),
        })?;
        Ok(LineReader {
            path: path.to_path_buf(),
            text,
            pos: 0,
            line_start: 0,
        })
    }

    /// Error located at the start of the most recently read line.
    pub(crate) fn error(&self, message: impl Into<String>) -> MixcoError {
        MixcoError::Format {
            path: self.path.clone(),
            offset: self.line_start as u64,
            message: message.into(),
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.text[self.pos..].trim().is_empty()
    }

    pub(crate) fn next_line(&mut self) -> Result<&str> {
        if self.pos >= self.text.len() {
            self.line_start = self.pos;
            return Err(self.error("unexpected end of file"));
        }
        self.line_start = self.pos;
        let rest = &self.text[self.pos..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        Ok(line.trim_end_matches('\r'))
    }

    /// Reads a line of the form `key value...` and returns the value part.
    pub(crate) fn keyed(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?.to_string();
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ if line == key => Ok(String::new()),
            _ => Err(self.error(format!("expected `{key}`, found `{line}`"))),
        }
    }

    pub(crate) fn keyed_parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.keyed(key)?;
        v.parse()
            .map_err(|_| self.error(format!("cannot parse `{v}` as the value of `{key}`")))
    }

    pub(crate) fn keyed_list(&mut self, key: &str) -> Result<Vec<usize>> {
        let v = self.keyed(key)?;
        v.split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| self.error(format!("bad integer `{s}` in `{key}`")))
            })
            .collect()
    }

    pub(crate) fn f64_line(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next_line()?.to_string();
        self.parse_f64s(&line, expected)
    }

    pub(crate) fn parse_f64s(&self, line: &str, expected: usize) -> Result<Vec<f64>> {
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| self.error(format!("bad number `{s}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != expected {
            return Err(self.error(format!(
                "expected {expected} values, found {}",
                values.len()
            )));
        }
        Ok(values)
    }
}
