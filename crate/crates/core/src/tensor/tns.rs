//! FROSTT `.tns` text format: one element per line, 1-based coordinates
//! followed by the value, `#` comment lines.

use std::io::{BufRead, Write};

use super::SparseTensorCoo;
use crate::error::{Error, Result};

/// Parses a `.tns` stream. `dims` overrides the observed per-mode maxima.
pub fn load_tns<R: BufRead>(reader: R, dims: Option<&[u64]>) -> Result<SparseTensorCoo> {
    let mut columns: Option<usize> = None;
    let mut indices: Vec<Vec<u64>> = Vec::new();
    let mut values = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let expected = *columns.get_or_insert(tokens.len());
        if tokens.len() != expected || expected < 2 {
            return Err(Error::InconsistentColumns {
                line: lineno,
                expected,
                found: tokens.len(),
            });
        }
        if indices.is_empty() {
            indices = vec![Vec::new(); expected - 1];
        }
        let (coords, value) = tokens.split_at(expected - 1);
        for (mode, tok) in coords.iter().enumerate() {
            let c: i64 = tok.parse().map_err(|_| Error::BadToken {
                line: lineno,
                token: (*tok).to_string(),
            })?;
            if c < 1 {
                return Err(Error::ZeroCoordinate {
                    line: lineno,
                    value: c,
                });
            }
            indices[mode].push((c - 1) as u64);
        }
        let v: f64 = value[0].parse().map_err(|_| Error::BadToken {
            line: lineno,
            token: value[0].to_string(),
        })?;
        if !v.is_finite() {
            return Err(Error::BadToken {
                line: lineno,
                token: value[0].to_string(),
            });
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let observed: Vec<u64> = indices
        .iter()
        .map(|idx| idx.iter().copied().max().unwrap_or(0) + 1)
        .collect();
    let dims = match dims {
        Some(d) => {
            if d.len() != observed.len() {
                return Err(Error::Shape(format!(
                    "{} dims given for an order-{} tensor",
                    d.len(),
                    observed.len()
                )));
            }
            d.to_vec()
        }
        None => observed,
    };
    SparseTensorCoo::new(dims, indices, values)
}

/// Writes 1-based coordinates and the value, space separated, one element
/// per line.
pub fn write_tns<W: Write>(tensor: &SparseTensorCoo, mut out: W) -> Result<()> {
    let mut line = String::new();
    for e in 0..tensor.nnz() {
        line.clear();
        for mode in 0..tensor.order() {
            line.push_str(&(tensor.indices(mode)[e] + 1).to_string());
            line.push(' ');
        }
        line.push_str(&tensor.values()[e].to_string());
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}
