//! Little-endian helpers shared by the binary formats.

use std::io::{self, Read, Write};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Writes a u32 length prefix followed by the UTF-8 bytes.
pub(crate) fn write_prefixed_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "metadata too long"))?;
    write_u32(w, len)?;
    w.write_all(s.as_bytes())
}

/// Reads until `buf` is full or the stream ends; returns the number of bytes read.
pub(crate) fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Outcome of trying to read a fixed-size field.
pub(crate) enum Field<T> {
    Value(T),
    /// Stream ended before the first byte.
    Eof,
    /// Stream ended part-way through.
    Partial,
}

pub(crate) fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<Field<[u8; N]>> {
    let mut buf = [0u8; N];
    let n = read_full(r, &mut buf)?;
    Ok(match n {
        0 if N > 0 => Field::Eof,
        n if n == N => Field::Value(buf),
        _ => Field::Partial,
    })
}
