//! Versioned single-file checkpoint.
//!
//! ```text
//! b"EMOE1\n"
//! u64 little-endian: header length in bytes
//! header: JSON { version, config, groups, params: [{name, kind, rows, cols}] }
//! data: every parameter's values as f64 little-endian, in header order
//! ```
//!
//! Group checksums in the header are verified on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_ctx, Error, Result};
use crate::model::Tracker;
use crate::params::{ParamKind, ParameterGroup};

pub const MAGIC: &[u8] = b"EMOE1\n";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    groups: Vec<ParameterGroup>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    rows: usize,
    cols: usize,
}

pub fn to_bytes(t: &Tracker) -> Vec<u8> {
    let header = Header {
        version: VERSION,
        config: t.cfg.clone(),
        groups: t.freeze_report(),
        params: t
            .store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), kind: p.kind, rows: p.value.rows(), cols: p.value.cols() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in t.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tracker> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing EMOE1 magic"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut data = &rest[len..];
    let mut t = Tracker::new(header.config)?;
    if t.store.len() != header.params.len() {
        return Err(bad("parameter list does not match the configuration"));
    }
    for entry in &header.params {
        let id = t.store.id(&entry.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        let value = t.store.value_mut(id);
        if value.shape() != (entry.rows, entry.cols) {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", entry.name)));
        }
        let n = entry.rows * entry.cols * 8;
        if data.len() < n {
            return Err(bad("truncated parameter data"));
        }
        for (v, chunk) in value.data_mut().iter_mut().zip(data[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after parameter data"));
    }
    for g in &header.groups {
        if t.store.group_checksum(&g.name) != g.checksum {
            return Err(Error::Checkpoint(format!("checksum mismatch in group {}", g.name)));
        }
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tracker) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        io_ctx(fs::create_dir_all(dir), || format!("creating {}", dir.display()))?;
    }
    io_ctx(fs::write(path, to_bytes(t)), || format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> Result<Tracker> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
