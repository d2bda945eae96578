//! Tab-separated representation records: `instance id, label id, floats...`.
//!
//! Used for past-representation snapshots and for representation dumps.
//! Floats are written with their shortest round-trip decimal form, so a
//! write followed by a read reproduces every bit. Lines starting with `#`
//! are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct RepRecord<S> {
    pub id: u64,
    pub label: usize,
    pub rep: Vec<S>,
}

pub fn format_records<'a, S: Scalar>(
    header: Option<&str>,
    records: impl IntoIterator<Item = (u64, usize, &'a [S])>,
) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        for line in h.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    for (id, label, rep) in records {
        let _ = write!(out, "{id}\t{label}");
        for v in rep {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_records<'a, S: Scalar>(
    path: &Path,
    header: Option<&str>,
    records: impl IntoIterator<Item = (u64, usize, &'a [S])>,
) -> Result<()> {
    std::fs::write(path, format_records(header, records)).map_err(|e| Error::io(path, e))
}

/// Parses records; also returns the comment lines (without the `# `).
pub fn parse_records<S: Scalar>(text: &str) -> Result<(Vec<String>, Vec<RepRecord<S>>)> {
    let mut comments = Vec::new();
    let mut records: Vec<RepRecord<S>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim_start().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .and_then(|f| f.parse::<u64>().ok())
            .ok_or_else(|| bad("missing or invalid instance id".into()))?;
        let label = fields
            .next()
            .and_then(|f| f.parse::<usize>().ok())
            .ok_or_else(|| bad("missing or invalid label id".into()))?;
        let rep = fields
            .map(|f| f.parse::<S>().map_err(|_| bad(format!("invalid float {f:?}"))))
            .collect::<Result<Vec<S>>>()?;
        if let Some(first) = records.first() {
            if first.rep.len() != rep.len() {
                return Err(bad(format!(
                    "{} floats, earlier records have {}",
                    rep.len(),
                    first.rep.len()
                )));
            }
        }
        records.push(RepRecord { id, label, rep });
    }
    Ok((comments, records))
}

pub fn read_records<S: Scalar>(path: &Path) -> Result<(Vec<String>, Vec<RepRecord<S>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}
