//! Little-endian readers and writers with byte offsets for error reporting.

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.offset(),
                detail: format!("truncated {what}: expected {n} bytes, found {}", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn error(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            detail: detail.into(),
        }
    }
}

/// Rank byte followed by one u64 per extent.
pub(crate) fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

pub(crate) fn read_shape(r: &mut ByteReader<'_>) -> Result<Vec<usize>> {
    let rank = r.u8("rank")? as usize;
    if rank == 0 {
        return Err(r.error("rank 0 is not allowed"));
    }
    (0..rank)
        .map(|_| {
            let at = r.offset();
            let e = r.u64("extent")?;
            usize::try_from(e).ok().filter(|&e| e > 0).ok_or(Error::Format {
                offset: at,
                detail: format!("invalid extent {e}"),
            })
        })
        .collect()
}

/// Payload byte count for `shape`, guarding against overflow.
pub(crate) fn payload_len(r: &ByteReader<'_>, shape: &[usize], elem: usize) -> Result<usize> {
    shape
        .iter()
        .try_fold(elem, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| r.error(format!("extents {shape:?} overflow")))
}
