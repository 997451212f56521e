//! Versioned binary container of named f64 arrays.
//!
//! Used for policy checkpoints and the PDE gain-function cache. The format
//! is deliberately dumb: little-endian, no compression, bitwise
//! round-trip guaranteed.
//!
//! ```text
//! magic   8 bytes  "SDDGARR\0"
//! version u32      1
//! count   u32
//! entry*  name_len u32, name utf-8, rows u64, cols u64, rows*cols f64
//! ```

use crate::error::SddgError;
use crate::linalg::Mat;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SDDGARR\0";
const VERSION: u32 = 1;

/// Ordered collection of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    entries: Vec<(String, Mat)>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append an array. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, m: Mat) {
        let name = name.into();
        assert!(
            self.get(&name).is_none(),
            "ArrayFile: duplicate array name {name}"
        );
        self.entries.push((name, m));
    }

    /// Append a single scalar as a 1x1 array.
    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.push(name, Mat::new(1, 1, vec![v]));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64, SddgError> {
        let m = self
            .get(name)
            .ok_or_else(|| SddgError::InvalidContainer(format!("missing array {name}")))?;
        if m.shape() != (1, 1) {
            return Err(SddgError::InvalidContainer(format!(
                "array {name} has shape {:?}, want (1,1)",
                m.shape()
            )));
        }
        Ok(m.as_slice()[0])
    }

    pub fn require(&self, name: &str) -> Result<&Mat, SddgError> {
        self.get(name)
            .ok_or_else(|| SddgError::InvalidContainer(format!("missing array {name}")))
    }

    pub fn entries(&self) -> &[(String, Mat)] {
        &self.entries
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Mat)> {
        self.entries
            .iter()
            .filter_map(|(n, m)| {
                n.strip_prefix(prefix).map(|rest| (rest.to_string(), m.clone()))
            })
            .collect()
    }

    /// Serialize to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse from bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SddgError> {
        let bad = |msg: &str| SddgError::InvalidContainer(msg.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], SddgError> {
            if cur.len() < n {
                return Err(bad("truncated array file"));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic: not an array file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(SddgError::InvalidContainer(format!(
                "unsupported array file version {version}"
            )));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| bad("array name is not utf-8"))?
                .to_string();
            let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| bad("array dimensions overflow"))?;
            let raw = take(len * 8)?;
            let mut data = Vec::with_capacity(len);
            for chunk in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            entries.push((name, Mat::new(rows, cols, data)));
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(ArrayFile { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), SddgError> {
        let mut f =
            std::fs::File::create(path).map_err(|e| SddgError::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| SddgError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, SddgError> {
        let mut f =
            std::fs::File::open(path).map_err(|e| SddgError::io(path.display().to_string(), e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)
            .map_err(|e| SddgError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
