//! Shared helpers for the little-endian binary formats.

use std::io::Read;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("missing entry {0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn read_exact_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], FormatError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16, FormatError> {
    Ok(u16::from_le_bytes(read_exact_array(r)?))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    Ok(u32::from_le_bytes(read_exact_array(r)?))
}

pub(crate) fn expect_header(r: &mut impl Read, magic: &'static [u8; 4], name: &'static str) -> Result<(), FormatError> {
    let m: [u8; 4] = read_exact_array(r)?;
    if &m != magic {
        return Err(FormatError::BadMagic { expected: name });
    }
    let v = read_u16(r)?;
    if v != 1 {
        return Err(FormatError::Version(v));
    }
    Ok(())
}
