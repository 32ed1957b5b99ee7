//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PXSEG1\0"                         7-byte magic, the '1' is the format version
//! repeated until end of file:
//!     name_len: u32, name: UTF-8 bytes
//!     rank: u32, dims: u32 * rank
//!     payload: f64 * product(dims)
//! ```

use std::io::Write;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"PXSEG1\0";
const VERSION_OFFSET: usize = 5;
const MAX_NAME_LEN: usize = 1 << 16;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    for (name, dims, data) in entries {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("payload of {name}"),
                numel,
                data.len(),
            ));
        }
        out.extend_from_slice(&u32_field(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_field(dims.len(), "rank")?.to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&u32_field(d, "dimension")?.to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated {
            what: "magic".into(),
            needed: MAGIC.len() - bytes.len(),
        });
    }
    if bytes[..VERSION_OFFSET] != MAGIC[..VERSION_OFFSET] || bytes[MAGIC.len() - 1] != 0 {
        return Err(Error::Format("not a PXSEG checkpoint (bad magic)".into()));
    }
    if bytes[VERSION_OFFSET] != MAGIC[VERSION_OFFSET] {
        return Err(Error::UnsupportedVersion {
            expected: MAGIC[VERSION_OFFSET],
            found: bytes[VERSION_OFFSET],
        });
    }

    let mut cursor = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let mut entries = Vec::new();
    while !cursor.at_end() {
        let name_len = cursor.u32("name length")? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!(
                "name length {name_len} exceeds limit"
            )));
        }
        let name = std::str::from_utf8(cursor.take(name_len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = cursor.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {rank} of {name} exceeds limit"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cursor.u32("dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} of {name} overflow")))?;
        let payload = cursor.take(numel * 8, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    Ok(entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Truncated {
                what: what.into(),
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}
