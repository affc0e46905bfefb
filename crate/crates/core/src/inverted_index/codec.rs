//! The `CFIX` container shared by text and image indices.
//!
//! ```text
//! "CFIX" | version u8 | section u8
//! corpus_name: u32 len + UTF-8 | sample_count: u64 | fingerprint: u32 len + UTF-8
//! [image section only] threshold: f64
//! key_count: u32 | keys: (u32 len + UTF-8)*, strictly ascending
//! per key: varint length, then varint gaps (first gap from 0)
//! checksum: u64 xxh3 of every preceding byte
//! ```
//! Fixed-width integers are little-endian; varints are unsigned LEB128.

use std::collections::BTreeMap;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64;

use super::posting::{PostingList, SampleIndex};

pub const MAGIC: &[u8; 4] = b"CFIX";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Text,
    Image,
}

impl Section {
    fn tag(self) -> u8 {
        match self {
            Section::Text => b'T',
            Section::Image => b'I',
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            b'T' => Some(Section::Text),
            b'I' => Some(Section::Image),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("magic-number mismatch: not a CFIX file")]
    BadMagic,
    #[error("unsupported CFIX version {0}")]
    UnsupportedVersion(u8),
    #[error("unexpected section tag {found:?}, expected {expected:?}")]
    WrongSection { expected: char, found: char },
    #[error("truncated file")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

/// Decoded contents of a CFIX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexPayload {
    pub section: Section,
    pub corpus_name: String,
    pub sample_count: u64,
    pub fingerprint: String,
    pub threshold: Option<f64>,
    pub lists: BTreeMap<String, PostingList>,
}

pub fn write_varint(out: &mut Vec<u8>, mut value: u64) {
    while value >= 0x80 {
        out.push((value as u8) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64, CodecError> {
    let mut value = 0u64;
    let mut shift = 0;
    loop {
        let byte = *bytes.get(*pos).ok_or(CodecError::Truncated)?;
        *pos += 1;
        if shift == 63 && byte > 1 {
            return Err(CodecError::Corrupt("varint overflow".into()));
        }
        value |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
        if shift > 63 {
            return Err(CodecError::Corrupt("varint overflow".into()));
        }
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(payload: &IndexPayload) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(payload.section.tag());
    write_str(&mut out, &payload.corpus_name);
    out.extend_from_slice(&payload.sample_count.to_le_bytes());
    write_str(&mut out, &payload.fingerprint);
    if payload.section == Section::Image {
        out.extend_from_slice(&payload.threshold.unwrap_or(f64::NAN).to_le_bytes());
    }
    out.extend_from_slice(&(payload.lists.len() as u32).to_le_bytes());
    for key in payload.lists.keys() {
        write_str(&mut out, key);
    }
    for list in payload.lists.values() {
        write_varint(&mut out, list.len() as u64);
        let mut prev = 0u64;
        for index in list {
            let index = u64::from(index);
            write_varint(&mut out, index - prev);
            prev = index;
        }
    }
    let checksum = xxh3_64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CodecError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CodecError::Corrupt("invalid UTF-8 string".into()))
    }

    fn varint(&mut self) -> Result<u64, CodecError> {
        read_varint(self.bytes, &mut self.pos)
    }
}

pub fn decode(bytes: &[u8], expected: Section) -> Result<IndexPayload, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < 6 + 8 {
        return Err(CodecError::Truncated);
    }
    if bytes[4] != VERSION {
        return Err(CodecError::UnsupportedVersion(bytes[4]));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if xxh3_64(body) != stored {
        return Err(CodecError::ChecksumMismatch);
    }
    let section = Section::from_tag(body[5])
        .ok_or_else(|| CodecError::Corrupt(format!("unknown section tag {}", body[5])))?;
    if section != expected {
        return Err(CodecError::WrongSection {
            expected: expected.tag() as char,
            found: section.tag() as char,
        });
    }

    let mut r = Reader {
        bytes: body,
        pos: 6,
    };
    let corpus_name = r.string()?;
    let sample_count = r.u64()?;
    let fingerprint = r.string()?;
    let threshold = match section {
        Section::Image => Some(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))),
        Section::Text => None,
    };
    let key_count = r.u32()? as usize;
    let mut keys: Vec<String> = Vec::with_capacity(key_count.min(body.len()));
    for _ in 0..key_count {
        let key = r.string()?;
        if keys.last().is_some_and(|prev| *prev >= key) {
            return Err(CodecError::Corrupt(
                "vocabulary keys not strictly ascending".into(),
            ));
        }
        keys.push(key);
    }
    let mut lists = BTreeMap::new();
    for key in keys {
        let len = r.varint()? as usize;
        let mut indices = Vec::with_capacity(len.min(body.len()));
        let mut prev = 0u64;
        for i in 0..len {
            let gap = r.varint()?;
            if i > 0 && gap == 0 {
                return Err(CodecError::Corrupt(format!(
                    "duplicate index in list {key:?}"
                )));
            }
            let index = prev
                .checked_add(gap)
                .filter(|&v| v < sample_count && v <= u64::from(SampleIndex::MAX))
                .ok_or_else(|| {
                    CodecError::Corrupt(format!("index out of range in list {key:?}"))
                })?;
            indices.push(index as SampleIndex);
            prev = index;
        }
        let list = PostingList::from_sorted(indices).expect("gaps are positive");
        lists.insert(key, list);
    }
    if r.pos != body.len() {
        return Err(CodecError::Corrupt("trailing bytes before checksum".into()));
    }
    Ok(IndexPayload {
        section,
        corpus_name,
        sample_count,
        fingerprint,
        threshold,
        lists,
    })
}
