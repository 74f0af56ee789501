//! Little-endian cursor shared by the binary formats.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                FormatError::new(
                    self.buf.len() as u64,
                    format!(
                        "truncated {what}: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.buf.len()
                    ),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Splits off and verifies the trailing CRC32 of everything before it.
pub(crate) fn check_crc(bytes: &[u8], min_len: usize) -> Result<&[u8], FormatError> {
    if bytes.len() < min_len + 4 {
        return Err(FormatError::new(
            bytes.len() as u64,
            format!(
                "truncated: file has {} bytes, header and checksum need at least {}",
                bytes.len(),
                min_len + 4
            ),
        ));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(FormatError::new(
            body.len() as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(body)
}

pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 8]) -> Result<(), FormatError> {
    let n = bytes.len().min(8);
    if bytes[..n] != magic[..n] {
        let at = bytes
            .iter()
            .zip(magic)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        return Err(FormatError::new(
            at as u64,
            format!("bad magic: expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    if n < 8 {
        return Err(FormatError::new(n as u64, "truncated magic"));
    }
    Ok(())
}

pub(crate) fn push_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}
