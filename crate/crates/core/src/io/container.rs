//! Versioned little-endian tensor container.
//!
//! Layout: magic `SCTT`, format version (u32), entry count (u32), then per
//! entry: name length (u32), UTF-8 name, dtype code (u8), rank (u8), rank
//! dims (u32 each), row-major payload.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCTT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    /// Raw bytes; used for UTF-8 metadata entries.
    U8(Vec<u8>),
}

impl TensorData {
    pub fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::I32(_) => 3,
            TensorData::U8(_) => 4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }
}

fn scalar_size(code: u8) -> Option<usize> {
    match code {
        1 | 3 => Some(4),
        2 => Some(8),
        4 => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
        if n != Some(data.len()) {
            return Err(Error::Data(format!("entry {name:?}: dims {dims:?} do not match {} scalars", data.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Data(format!("entry {name:?}: rank {} too large", dims.len())));
        }
        Ok(Entry { name, dims, data })
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let bytes = text.as_bytes().to_vec();
        Entry { name: name.into(), dims: vec![bytes.len() as u32], data: TensorData::U8(bytes) }
    }

    /// The payload as UTF-8 text, for `u8` entries.
    pub fn as_text(&self) -> Result<&str> {
        match &self.data {
            TensorData::U8(b) => std::str::from_utf8(b).map_err(|e| Error::Data(format!("entry {:?} is not UTF-8: {e}", self.name))),
            other => Err(Error::Data(format!("entry {:?} holds {} data, not text", self.name, other.type_name()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format { offset: at, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated: need {n} bytes for {what}, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Data(format!("duplicate entry name {:?}", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.entries.iter().map(|e| 10 + e.name.len() + 4 * e.dims.len() + 8 * e.data.len()).sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.code());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    /// Parses a complete container; trailing bytes are rejected so that
    /// parse-then-serialize reproduces the input exactly.
    pub fn parse(buf: &[u8]) -> Result<Container> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.err(0, format!("bad magic {magic:?}, expected \"SCTT\"")));
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(r.err(4, format!("unsupported format version {version} (this build reads version {FORMAT_VERSION})")));
        }
        let count = r.u32("entry count")?;
        let mut c = Container::new();
        for i in 0..count {
            let start = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| r.err(name_at, format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let code_at = r.pos;
            let code = r.u8("dtype")?;
            let size = scalar_size(code).ok_or_else(|| r.err(code_at, format!("entry {name:?}: unknown dtype code {code}")))?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(size).map(|b| (n, b)));
            let Some((numel, bytes)) = numel else {
                return Err(r.err(start, format!("entry {name:?}: payload size overflows")));
            };
            let raw = r.take(bytes, "payload")?;
            let data = match code {
                1 => TensorData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect()),
                2 => TensorData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect()),
                3 => TensorData::I32(raw.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().expect("4"))).collect()),
                _ => TensorData::U8(raw.to_vec()),
            };
            debug_assert_eq!(data.len(), numel);
            if c.get(&name).is_some() {
                return Err(r.err(start, format!("duplicate entry name {name:?}")));
            }
            c.entries.push(Entry { name, dims, data });
        }
        if r.pos != buf.len() {
            return Err(r.err(r.pos, format!("{} trailing bytes after last entry", buf.len() - r.pos)));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push(Entry::new("a", vec![2, 3], TensorData::F32(vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 7.0])).unwrap()).unwrap();
        c.push(Entry::new("b.c", vec![1], TensorData::F64(vec![std::f64::consts::PI])).unwrap()).unwrap();
        c.push(Entry::new("labels", vec![2, 2], TensorData::I32(vec![0, 1, -1, 255])).unwrap()).unwrap();
        c.push(Entry::text("__config__", "[model]\nvariant = \"S-toy\"\n")).unwrap();
        c.push(Entry::new("scalar", vec![], TensorData::F32(vec![1.5])).unwrap()).unwrap();
        c
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::parse(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("__config__").unwrap().as_text().unwrap(), "[model]\nvariant = \"S-toy\"\n");
        assert_eq!(back.entries.len(), 5);
    }

    #[test]
    fn header_layout() {
        let bytes = Container::new().to_bytes();
        assert_eq!(bytes, [b'S', b'C', b'T', b'T', 1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        match Container::parse(&bytes).unwrap_err() {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        let err = Container::parse(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_at_every_length_is_an_error() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            assert!(Container::parse(&bytes[..n]).is_err(), "prefix {n}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Container::parse(&bytes).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        let mut c = Container::new();
        c.push(Entry::text("x", "1")).unwrap();
        assert!(c.push(Entry::text("x", "2")).is_err());
        // forge a duplicate on disk
        let mut bytes = c.to_bytes();
        bytes[8] = 2;
        let tail = bytes[12..].to_vec();
        bytes.extend_from_slice(&tail);
        let err = Container::parse(&bytes).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn dims_must_match_payload() {
        assert!(Entry::new("x", vec![2, 2], TensorData::F32(vec![0.0; 3])).is_err());
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(2);
        bytes.push(3);
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(Container::parse(&bytes).is_err());
    }
}
