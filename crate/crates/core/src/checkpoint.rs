//! Text tensor container shared by estimator and training-state checkpoints.
//!
//! ```text
//! SIMUNC-CKPT v1
//! meta <key> <value>
//! ...
//! tensor <name> <rows> <cols>
//! <cols values>          (one line per row, 17 significant digits)
//! ...
//! end
//! ```
//!
//! Meta lines come first, tensors follow in declaration order. Values are
//! written with `{:.16e}` so parsing restores every bit.

use std::fmt::Write as _;

use thiserror::Error;

use crate::embeddings::format_real;
use crate::numerics::Matrix;

pub const HEADER: &str = "SIMUNC-CKPT v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing meta key `{0}`")]
    MissingMeta(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid meta `{key}`: {message}")]
    BadMeta { key: String, message: String },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| CheckpointError::BadMeta {
            key: key.to_string(),
            message: format!("cannot parse `{raw}`"),
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, m) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format_real(*v)).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let err = |line: usize, message: String| CheckpointError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            _ => return Err(err(1, format!("expected header `{HEADER}`"))),
        }
        let mut file = TensorFile::default();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                None => continue,
                Some("meta") => {
                    if !file.tensors.is_empty() {
                        return Err(err(ln, "meta after tensors".into()));
                    }
                    let key = parts.next().ok_or_else(|| err(ln, "meta without key".into()))?;
                    let value: Vec<&str> = parts.collect();
                    file.meta.push((key.to_string(), value.join(" ")));
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| err(ln, "tensor without name".into()))?
                        .to_string();
                    let mut dim = || -> Result<usize, CheckpointError> {
                        parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| err(ln, "bad tensor shape".into()))
                    };
                    let (rows, cols) = (dim()?, dim()?);
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rl, row) = lines
                            .next()
                            .ok_or_else(|| err(ln, format!("tensor `{name}` truncated")))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| err(rl, format!("`{tok}` is not a number")))?;
                            data.push(v);
                        }
                        if data.len() - before != cols {
                            return Err(err(
                                rl,
                                format!("expected {cols} values, found {}", data.len() - before),
                            ));
                        }
                    }
                    let m = Matrix::new(rows, cols, data)
                        .map_err(|e| err(ln, format!("tensor `{name}`: {e}")))?;
                    file.tensors.push((name, m));
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some(other) => return Err(err(ln, format!("unexpected `{other}`"))),
            }
        }
        if !ended {
            return Err(err(text.lines().count(), "missing `end`".into()));
        }
        Ok(file)
    }
}
