//! Dense row-major tensors and the flat binary checkpoint container.
//!
//! Both model checkpoints share one layout:
//!
//! ```text
//! magic (4 bytes, e.g. "TLM1" or "PRB1")
//! header fields (format-specific count of little-endian u32)
//! seed (little-endian u64)
//! tensor count (u32), then that many tensors, each:
//!     name length (u32) | name (UTF-8 bytes) | rank (u32)
//!     | dims (rank x u32) | data (row-major f32, little-endian)
//! ```
//!
//! The explicit count (rather than reading to EOF) makes every truncation
//! detectable, and trailing bytes are rejected.
//!
//! Writers are atomic: bytes land in a sibling temporary file which is then
//! renamed over the destination, so a crashed run never leaves a truncated
//! artifact behind.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{IconError, Result};

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// Dimension sizes, outermost first.
    pub dims: Vec<usize>,
    /// Row-major elements; `data.len() == dims.iter().product()`.
    pub data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor with the given dims.
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Build from explicit dims and data, checking the element count.
    pub fn from_data(dims: &[usize], data: Vec<f32>) -> Self {
        let expect: usize = dims.iter().product();
        assert_eq!(
            expect,
            data.len(),
            "tensor dims {:?} imply {} elements, got {}",
            dims,
            expect,
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major index for a 2-D tensor.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[r * self.dims[1] + c]
    }
}

/// One named tensor inside a checkpoint.
pub type NamedTensor = (String, Tensor);

/// Everything a checkpoint file holds besides its magic.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBody {
    /// Format-specific little-endian u32 header fields.
    pub header: Vec<u32>,
    /// Construction seed.
    pub seed: u64,
    /// Named tensors in file order.
    pub tensors: Vec<NamedTensor>,
}

impl CheckpointBody {
    /// Look up a tensor by name.
    pub fn tensor(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| IconError::CorruptCheckpoint {
                path: path.display().to_string(),
                reason: format!("missing tensor '{name}'"),
            })
    }
}

/// Write `bytes` to `path` atomically (temporary sibling file + rename).
pub fn atomic_write_bytes(op: &'static str, path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(|e| IconError::io(op, &tmp, e))?;
    f.write_all(bytes).map_err(|e| IconError::io(op, &tmp, e))?;
    f.sync_all().map_err(|e| IconError::io(op, &tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| IconError::io(op, path, e))?;
    Ok(())
}

fn tmp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| std::ffi::OsString::from("artifact"));
    name.push(".tmp");
    path.with_file_name(name)
}

/// Serialize a checkpoint to bytes.
pub fn encode_checkpoint(magic: &[u8; 4], body: &CheckpointBody) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    for field in &body.header {
        out.extend_from_slice(&field.to_le_bytes());
    }
    out.extend_from_slice(&body.seed.to_le_bytes());
    out.extend_from_slice(&(body.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &body.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
        for &d in &tensor.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write a checkpoint file atomically.
pub fn write_checkpoint(
    op: &'static str,
    path: &Path,
    magic: &[u8; 4],
    body: &CheckpointBody,
) -> Result<()> {
    atomic_write_bytes(op, path, &encode_checkpoint(magic, body))
}

/// Read a checkpoint file, verifying its magic and the header field count.
pub fn read_checkpoint(
    op: &'static str,
    path: &Path,
    magic: &[u8; 4],
    n_header_fields: usize,
) -> Result<CheckpointBody> {
    let bytes = fs::read(path).map_err(|e| IconError::io(op, path, e))?;
    decode_checkpoint(path, &bytes, magic, n_header_fields)
}

/// Parse checkpoint bytes, verifying magic and header length.
pub fn decode_checkpoint(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 4],
    n_header_fields: usize,
) -> Result<CheckpointBody> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let found = cur.take(4, "magic")?;
    if found != magic {
        return Err(IconError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let mut header = Vec::with_capacity(n_header_fields);
    for _ in 0..n_header_fields {
        header.push(cur.u32("header field")?);
    }
    let seed = cur.u64("seed")?;
    let n_tensors = cur.u32("tensor count")? as usize;
    if n_tensors > 1 << 20 {
        return Err(cur.corrupt(format!("unreasonable tensor count {n_tensors}")));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = cur.u32("tensor name length")? as usize;
        if name_len > 1 << 16 {
            return Err(cur.corrupt(format!("unreasonable tensor name length {name_len}")));
        }
        let name_bytes = cur.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| cur.corrupt("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = cur.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(cur.corrupt(format!("unreasonable tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("tensor dim")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| cur.corrupt("tensor element count overflows".to_string()))?;
        let raw = cur.take(count, "tensor data")?;
        let mut data = Vec::with_capacity(count / 4);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.push((name, Tensor { dims, data }));
    }
    if !cur.done() {
        return Err(cur.corrupt(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(CheckpointBody {
        header,
        seed,
        tensors,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn corrupt(&self, reason: String) -> IconError {
        IconError::CorruptCheckpoint {
            path: self.path.display().to_string(),
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!(
                "truncated while reading {what} at byte {} (need {n} more, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

// ════════════════════════════════════════════════════════════════════════
// Tests
// ════════════════════════════════════════════════════════════════════════
