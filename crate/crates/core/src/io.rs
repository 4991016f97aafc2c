//! Shared little-endian helpers for the binary formats (CPTP, CPTE, CPTO).

use std::io::{ErrorKind, Read, Write};

use crate::error::{CptError, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: [u8; 4], version: u32) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&version.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: [u8; 4], version: u32) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact_or(r, &mut found, "magic")?;
    if found != magic {
        return Err(CptError::BadMagic { expected: magic, found });
    }
    let v = read_u32(r, "version")?;
    if v != version {
        return Err(CptError::VersionMismatch {
            expected: version,
            found: v,
        });
    }
    Ok(())
}

pub(crate) fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => CptError::Truncated(format!("while reading {what}")),
        _ => CptError::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; count * 4];
    read_exact_or(r, &mut raw, what)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CptError::Malformed(format!("trailing bytes after {what}")));
    }
    Ok(())
}
