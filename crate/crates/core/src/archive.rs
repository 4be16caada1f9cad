//! CAF1: the deterministic archive used for user tarballs and per-section
//! output.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CAF1"                      4 bytes, 43 41 46 31
//! entry_count                 u32
//! entry*                      sorted ascending by raw path bytes
//!   path_len                  u16
//!   path                      UTF-8, '/'-separated, no leading '/'
//!   mode                      u32
//!   size                      u64
//!   content                   size bytes
//! footer                      SHA-256 of every preceding byte
//! ```
//!
//! The same tree always packs to the same bytes. Output archives travel
//! gzip-wrapped; artifact ids are always computed over the uncompressed
//! CAF1 bytes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::artifact::ArtifactId;

pub const MAGIC: [u8; 4] = *b"CAF1";
pub const FOOTER_LEN: usize = 32;
const HEADER_LEN: usize = 8;

/// One file in an archive tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    pub mode: u32,
    pub data: Vec<u8>,
}

impl Entry {
    pub fn new(path: impl Into<String>, mode: u32, data: impl Into<Vec<u8>>) -> Self {
        Entry { path: path.into(), mode, data: data.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArchiveError {
    #[error("duplicate path {0:?}")]
    DuplicatePath(String),
    #[error("path of {0} bytes exceeds 65535")]
    PathTooLong(usize),
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("bad magic")]
    BadMagic,
    #[error("truncated archive")]
    TruncatedArchive,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed archive: {0}")]
    Malformed(&'static str),
}

/// Paths are relative, '/'-separated, with no empty, `.` or `..` components.
pub fn valid_path(path: &str) -> bool {
    !path.is_empty()
        && path
            .split('/')
            .all(|c| !c.is_empty() && c != "." && c != "..")
}

/// Serialize a tree. Entries may be given in any order.
pub fn pack(tree: &[Entry]) -> Result<(Vec<u8>, ArtifactId), ArchiveError> {
    let mut sorted: Vec<&Entry> = tree.iter().collect();
    sorted.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    for pair in sorted.windows(2) {
        if pair[0].path == pair[1].path {
            return Err(ArchiveError::DuplicatePath(pair[0].path.clone()));
        }
    }
    let body_len: usize = sorted
        .iter()
        .map(|e| 2 + e.path.len() + 4 + 8 + e.data.len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body_len + FOOTER_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for e in sorted {
        let path_len =
            u16::try_from(e.path.len()).map_err(|_| ArchiveError::PathTooLong(e.path.len()))?;
        if !valid_path(&e.path) {
            return Err(ArchiveError::InvalidPath(e.path.clone()));
        }
        out.extend_from_slice(&path_len.to_le_bytes());
        out.extend_from_slice(e.path.as_bytes());
        out.extend_from_slice(&e.mode.to_le_bytes());
        out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
        out.extend_from_slice(&e.data);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    let id = ArtifactId::of(&out);
    Ok((out, id))
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        if self.buf.len() < n {
            return Err(ArchiveError::TruncatedArchive);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse and verify an archive. Entries come back in archive order.
pub fn unpack(bytes: &[u8]) -> Result<Vec<Entry>, ArchiveError> {
    let magic_len = bytes.len().min(MAGIC.len());
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(ArchiveError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + FOOTER_LEN {
        return Err(ArchiveError::TruncatedArchive);
    }
    let (body, footer) = bytes.split_at(bytes.len() - FOOTER_LEN);
    if Sha256::digest(body).as_slice() != footer {
        return Err(ArchiveError::ChecksumMismatch);
    }

    let mut cur = Cursor { buf: &body[MAGIC.len()..] };
    let count = cur.u32()?;
    let mut entries: Vec<Entry> = Vec::new();
    for _ in 0..count {
        let path_len = cur.u16()? as usize;
        let path = core::str::from_utf8(cur.take(path_len)?)
            .map_err(|_| ArchiveError::Malformed("path is not UTF-8"))?;
        if !valid_path(path) {
            return Err(ArchiveError::InvalidPath(path.into()));
        }
        if let Some(prev) = entries.last() {
            match prev.path.as_bytes().cmp(path.as_bytes()) {
                core::cmp::Ordering::Less => {}
                core::cmp::Ordering::Equal => return Err(ArchiveError::DuplicatePath(path.into())),
                core::cmp::Ordering::Greater => return Err(ArchiveError::Malformed("entries out of order")),
            }
        }
        let mode = cur.u32()?;
        let size = usize::try_from(cur.u64()?).map_err(|_| ArchiveError::TruncatedArchive)?;
        let data = cur.take(size)?.to_vec();
        entries.push(Entry { path: path.into(), mode, data });
    }
    if !cur.buf.is_empty() {
        return Err(ArchiveError::Malformed("trailing bytes before footer"));
    }
    Ok(entries)
}

/// Convenience: unpack into a path-keyed map.
pub fn unpack_map(bytes: &[u8]) -> Result<BTreeMap<String, Entry>, ArchiveError> {
    Ok(unpack(bytes)?.into_iter().map(|e| (e.path.clone(), e)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn empty_archive_layout() {
        let (bytes, id) = pack(&[]).unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(&bytes[..8], &[0x43, 0x41, 0x46, 0x31, 0, 0, 0, 0]);
        assert_eq!(id, ArtifactId::of(&bytes));
        assert_eq!(unpack(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn roundtrip_and_order_independence() {
        let a = Entry::new("bin/a", 0o755, b"#!/bin/sh\n".to_vec());
        let b = Entry::new("lib/b.so", 0o644, vec![0u8; 300]);
        let (x, idx) = pack(&[a.clone(), b.clone()]).unwrap();
        let (y, idy) = pack(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(x, y);
        assert_eq!(idx, idy);
        assert_eq!(unpack(&x).unwrap(), vec![a, b]);
    }

    #[test]
    fn pack_rejects_bad_trees() {
        let a = Entry::new("x", 0, vec![]);
        assert_eq!(pack(&[a.clone(), a]), Err(ArchiveError::DuplicatePath("x".into())));
        let long = "a".repeat(65536);
        assert_eq!(pack(&[Entry::new(long, 0, vec![])]), Err(ArchiveError::PathTooLong(65536)));
        assert!(matches!(pack(&[Entry::new("/abs", 0, vec![])]), Err(ArchiveError::InvalidPath(_))));
        assert!(matches!(pack(&[Entry::new("a//b", 0, vec![])]), Err(ArchiveError::InvalidPath(_))));
        assert!(matches!(pack(&[Entry::new("a/../b", 0, vec![])]), Err(ArchiveError::InvalidPath(_))));
    }

    #[test]
    fn max_length_path_is_accepted() {
        let path = "p".repeat(65535);
        let (bytes, _) = pack(&[Entry::new(path.clone(), 1, b"z".to_vec())]).unwrap();
        assert_eq!(unpack(&bytes).unwrap()[0].path, path);
    }

    #[test]
    fn unpack_detects_corruption() {
        let (bytes, _) = pack(&[Entry::new("section.log", 0o644, b"hello".to_vec())]).unwrap();
        let mut flipped = bytes.clone();
        let content_at = bytes.len() - FOOTER_LEN - 2;
        flipped[content_at] ^= 0x01;
        assert_eq!(unpack(&flipped), Err(ArchiveError::ChecksumMismatch));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = 0;
        assert_eq!(unpack(&bad_magic), Err(ArchiveError::BadMagic));

        assert_eq!(unpack(&bytes[..20]), Err(ArchiveError::TruncatedArchive));
        assert_eq!(unpack(b"CA"), Err(ArchiveError::TruncatedArchive));
        assert_eq!(unpack(b""), Err(ArchiveError::TruncatedArchive));
    }

    #[test]
    fn unpack_rejects_well_checksummed_garbage() {
        // A count that promises more entries than exist, with a valid footer.
        let mut body = MAGIC.to_vec();
        body.extend_from_slice(&3u32.to_le_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert_eq!(unpack(&body), Err(ArchiveError::TruncatedArchive));
    }
}
