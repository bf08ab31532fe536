//! Shared plumbing for the on-disk formats: single-line text headers of
//! `key=value` pairs followed by little-endian binary blocks.

use crate::{Error, Result};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

/// Reads bytes up to (and consuming) the next newline. Bounded so a binary
/// file misread as a header fails fast instead of slurping the whole file.
pub(crate) fn read_line<R: Read>(r: &mut R) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|_| Error::Truncated("header line".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(Error::BadHeader("header line exceeds 4096 bytes".into()));
        }
    }
    String::from_utf8(line).map_err(|e| Error::BadHeader(format!("header not utf-8: {e}")))
}

pub(crate) fn parse_kv(line: &str) -> Result<Vec<(String, String)>> {
    line.split_whitespace()
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::BadHeader(format!("expected key=value, got {pair:?}")))
        })
        .collect()
}

pub(crate) fn field<T: FromStr>(fields: &[(String, String)], key: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let (_, v) = fields
        .iter()
        .find(|(k, _)| k == key)
        .ok_or_else(|| Error::BadHeader(format!("missing key {key}")))?;
    v.parse().map_err(|e| Error::BadHeader(format!("{key}: {e}")))
}

pub(crate) fn write_f64_block<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64_block<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|_| Error::Truncated(what.into()))?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn read_u64_le<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut bytes = [0u8; 8];
    r.read_exact(&mut bytes).map_err(|_| Error::Truncated(what.into()))?;
    Ok(u64::from_le_bytes(bytes))
}

/// Errors unless the reader is exactly at end of file.
pub(crate) fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::LengthMismatch(format!("{what}: trailing bytes after payload"))),
    }
}

/// Little-endian byte image of an f64 slice, for digesting.
pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}
