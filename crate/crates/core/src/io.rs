//! Shared helpers for the line-oriented headers of the binary file formats
//! (RVOL1, RIMG1, RNNCKPT1).

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        FormatError::Parse {
            offset,
            message: message.into(),
        }
    }
}

/// Cursor over an in-memory file that hands out LF-terminated header lines
/// while tracking the byte offset for diagnostics.
pub struct HeaderReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    /// Next header line without its terminating LF.
    pub fn line(&mut self) -> Result<&'a str, FormatError> {
        let start = self.pos;
        let rest = &self.buf[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| FormatError::parse(start, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| FormatError::parse(start, "header line is not valid UTF-8"))?;
        self.pos = start + end + 1;
        Ok(line)
    }

    /// Reads a line of the form `<key> <fields...>` and returns the fields.
    pub fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>), FormatError> {
        let start = self.pos;
        let line = self.line()?;
        let mut parts = line.split(' ');
        match parts.next() {
            Some(k) if k == key => Ok((start, parts.collect())),
            _ => Err(FormatError::parse(
                start,
                format!("expected `{key}` line, found `{line}`"),
            )),
        }
    }

    pub fn expect(&mut self, literal: &str) -> Result<(), FormatError> {
        let start = self.pos;
        let line = self.line()?;
        if line == literal {
            Ok(())
        } else {
            Err(FormatError::parse(
                start,
                format!("expected `{literal}`, found `{line}`"),
            ))
        }
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

pub fn parse_field<T: std::str::FromStr>(
    offset: usize,
    field: &str,
    what: &str,
) -> Result<T, FormatError> {
    field
        .parse()
        .map_err(|_| FormatError::parse(offset, format!("invalid {what} `{field}`")))
}

pub fn parse_fields<T: std::str::FromStr>(
    offset: usize,
    fields: &[&str],
    n: usize,
    what: &str,
) -> Result<Vec<T>, FormatError> {
    if fields.len() != n {
        return Err(FormatError::parse(
            offset,
            format!("expected {n} {what} values, found {}", fields.len()),
        ));
    }
    fields.iter().map(|f| parse_field(offset, f, what)).collect()
}

pub fn f32_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_f32_le(offset: usize, bytes: &[u8], count: usize) -> Result<Vec<f32>, FormatError> {
    if bytes.len() < count * 4 {
        return Err(FormatError::parse(
            offset,
            format!(
                "payload truncated: need {} bytes, have {}",
                count * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes[..count * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
