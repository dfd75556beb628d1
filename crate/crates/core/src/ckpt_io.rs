//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "PLAMCKPT"
//! version      u32       1
//! header_len   u32       byte length of the header that follows
//! header:
//!   kind       u8        0 = base_lm, 1 = mllm, 2 = merged
//!   config     7 x u32   num_layers, hidden_dim, num_heads, vocab_size,
//!                        max_seq_len, vision_feature_dim, ffn_dim
//!   meta_count u32       then per entry: u32 len + key utf8, u32 len + value utf8
//!                        (ascending key order)
//!   n_tensors  u32       then per entry:
//!     name     u32 len + utf8
//!     dtype    u8        0 = f32 (only value)
//!     ndim     u8
//!     dims     ndim x u32
//!     offset   u64       relative to the start of the payload
//!     length   u64       = 4 * product(dims)
//! payload      raw f32 little-endian values, entries back to back in
//!              canonical name order
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PLAMCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorTableEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a checkpoint to its canonical byte representation.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let c = &ckpt.config;
    let mut header = Vec::new();
    header.push(ckpt.kind.code());
    for v in [
        c.num_layers,
        c.hidden_dim,
        c.num_heads,
        c.vocab_size,
        c.max_seq_len,
        c.vision_feature_dim,
        c.ffn_dim,
    ] {
        put_u32(&mut header, v as u32);
    }
    put_u32(&mut header, ckpt.meta.len() as u32);
    for (k, v) in &ckpt.meta {
        put_str(&mut header, k);
        put_str(&mut header, v);
    }
    let names = ckpt.canonical_names();
    put_u32(&mut header, names.len() as u32);
    let mut offset = 0u64;
    for name in &names {
        let t = &ckpt.tensors[*name];
        put_str(&mut header, name);
        header.push(DTYPE_F32);
        header.push(t.shape().len() as u8);
        for d in t.shape() {
            put_u32(&mut header, *d as u32);
        }
        let len = 4 * t.len() as u64;
        header.extend_from_slice(&offset.to_le_bytes());
        header.extend_from_slice(&len.to_le_bytes());
        offset += len;
    }

    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    for name in &names {
        for v in ckpt.tensors[*name].data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{} ends early at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string in header".into()))
    }
}

/// Parses only the tensor table, without reading the payload.
pub fn read_table(bytes: &[u8]) -> Result<(Checkpoint, Vec<TensorTableEntry>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::MagicMismatch);
    }
    let mut r = Reader { buf: bytes, pos: 8, what: "preamble" };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let header_len = r.u32()? as usize;
    let header = r.take(header_len)?;
    let payload_start = r.pos;

    let mut h = Reader { buf: header, pos: 0, what: "header" };
    let kind = CheckpointKind::from_code(h.u8()?)
        .ok_or_else(|| Error::Checkpoint("unknown checkpoint kind code".into()))?;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = h.u32()? as usize;
    }
    let config = ModelConfig {
        num_layers: dims[0],
        hidden_dim: dims[1],
        num_heads: dims[2],
        vocab_size: dims[3],
        max_seq_len: dims[4],
        vision_feature_dim: dims[5],
        ffn_dim: dims[6],
    };
    let mut meta = BTreeMap::new();
    for _ in 0..h.u32()? {
        let k = h.string()?;
        let v = h.string()?;
        meta.insert(k, v);
    }
    let n = h.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    let mut seen = BTreeSet::new();
    for _ in 0..n {
        let name = h.string()?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let dtype = h.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype {dtype}")));
        }
        let ndim = h.u8()? as usize;
        let shape = (0..ndim).map(|_| h.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let byte_offset = h.u64()?;
        let byte_length = h.u64()?;
        entries.push(TensorTableEntry { name, dtype, shape, byte_offset, byte_length });
    }
    if h.pos != header.len() {
        return Err(Error::Checkpoint("trailing bytes in header".into()));
    }
    let ckpt = Checkpoint { config, kind, tensors: BTreeMap::new(), meta };
    Ok((ckpt, entries, payload_start))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (mut ckpt, entries, payload_start) = read_table(bytes)?;
    let payload = &bytes[payload_start..];
    let mut expected_offset = 0u64;
    for e in &entries {
        let numel: usize = e.shape.iter().product();
        if e.byte_length != 4 * numel as u64 {
            return Err(Error::Checkpoint(format!(
                "`{}`: byte length {} inconsistent with shape {:?}",
                e.name, e.byte_length, e.shape
            )));
        }
        if e.byte_offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "`{}`: offset {} (expected {}): entries must be contiguous and ascending",
                e.name, e.byte_offset, expected_offset
            )));
        }
        let end = e.byte_offset + e.byte_length;
        if end > payload.len() as u64 {
            return Err(Error::Truncated(format!("payload ends before `{}`", e.name)));
        }
        let raw = &payload[e.byte_offset as usize..end as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        ckpt.tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes beyond the tensor table",
            payload.len() as u64 - expected_offset
        )));
    }
    ckpt.validate()?;
    Ok(ckpt)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the canonical checkpoint bytes.
pub fn digest(ckpt: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(ckpt)?)))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffEntry {
    pub name: String,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub entries: Vec<DiffEntry>,
    /// True when every value has identical bits in both checkpoints.
    pub equal_bitwise: bool,
}

impl DiffReport {
    pub fn nonzero(&self) -> impl Iterator<Item = &DiffEntry> {
        self.entries.iter().filter(|e| e.max_abs_diff != 0.0)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.max_abs_diff)
    }
}

/// Per-tensor maximum absolute difference between two checkpoints.
pub fn diff(a: &Checkpoint, b: &Checkpoint) -> Result<DiffReport> {
    if a.config != b.config {
        return Err(Error::Checkpoint("configs differ".into()));
    }
    let an: BTreeSet<&String> = a.tensors.keys().collect();
    let bn: BTreeSet<&String> = b.tensors.keys().collect();
    if an != bn {
        let only_a: Vec<_> = an.difference(&bn).collect();
        let only_b: Vec<_> = bn.difference(&an).collect();
        return Err(Error::NameSetMismatch(format!("only in a: {only_a:?}; only in b: {only_b:?}")));
    }
    let mut entries = Vec::new();
    let mut equal_bitwise = true;
    for name in a.canonical_names() {
        let (ta, tb) = (&a.tensors[name], &b.tensors[name]);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("`{name}`: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut max = 0.0f64;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            if x.to_bits() != y.to_bits() {
                equal_bitwise = false;
            }
            max = max.max((*x as f64 - *y as f64).abs());
        }
        entries.push(DiffEntry { name: name.to_string(), max_abs_diff: max });
    }
    Ok(DiffReport { entries, equal_bitwise })
}
