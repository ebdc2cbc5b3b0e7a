// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace container: a directory holding `meta.json`, `hidden.bin`, and
//! optionally `heads.bin`.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic[4] | u32 version=1 | u32 num_layers | u32 num_tokens | u32 width | f32 payload
//! ```
//!
//! `width` is `hidden_dim` for `hidden.bin` (magic `CPTH`) and `num_heads`
//! for `heads.bin` (magic `CPTA`). Value `(l, t, k)` sits at byte
//! `20 + ((l * T + t) * width + k) * 4`: the
//! five header fields take 20 bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_trace, ConflictLabel, ObjectiveConflict, Span, Tensor3, Trace};
use crate::error::{Error, Result};

pub const HIDDEN_MAGIC: &[u8; 4] = b"CPTH";
pub const HEADS_MAGIC: &[u8; 4] = b"CPTA";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

const META_FILE: &str = "meta.json";
const HIDDEN_FILE: &str = "hidden.bin";
const HEADS_FILE: &str = "heads.bin";

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    sample_id: String,
    model_id: String,
    objective_conflict: ObjectiveConflict,
    layer_ids: Vec<usize>,
    hidden_dim: usize,
    num_tokens: usize,
    num_heads: Option<usize>,
    tokens: Vec<String>,
    labels: Vec<u8>,
    spans: Vec<Span>,
}

/// Write `trace` into directory `dir`, creating it if needed.
pub fn save_trace(trace: &Trace, dir: &Path) -> Result<()> {
    let violations = validate_trace(trace);
    if !violations.is_empty() {
        return Err(Error::InvalidTrace(violations));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = Meta {
        version: VERSION,
        sample_id: trace.sample_id.clone(),
        model_id: trace.model_id.clone(),
        objective_conflict: trace.objective_conflict,
        layer_ids: trace.layer_ids.clone(),
        hidden_dim: trace.hidden_dim(),
        num_tokens: trace.num_tokens(),
        num_heads: trace.num_heads(),
        tokens: trace.tokens.clone(),
        labels: trace.labels.iter().map(|l| l.code()).collect(),
        spans: trace.spans.clone(),
    };
    crate::util::write_json(&dir.join(META_FILE), &meta)?;

    write_tensor(&dir.join(HIDDEN_FILE), HIDDEN_MAGIC, &trace.hidden)?;
    let heads_path = dir.join(HEADS_FILE);
    match &trace.head_norms {
        Some(heads) => write_tensor(&heads_path, HEADS_MAGIC, heads)?,
        None if heads_path.exists() => fs::remove_file(&heads_path).map_err(|e| Error::io(&heads_path, e))?,
        None => {}
    }
    Ok(())
}

fn write_tensor(path: &Path, magic: &[u8; 4], tensor: &Tensor3) -> Result<()> {
    let dims = tensor.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + tensor.data().len() * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, magic: &[u8; 4]) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Shape(format!(
            "{}: {} bytes is shorter than the {HEADER_LEN}-byte header",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4-byte slice"));
    let version = word(1);
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let dims = [word(2) as usize, word(3) as usize, word(4) as usize];
    let count = dims[0] * dims[1] * dims[2];
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::Shape(format!(
            "{}: header {dims:?} needs {} payload bytes, found {}",
            path.display(),
            count * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Tensor3::from_vec(dims, data)
}

/// Read and validate the trace container at `dir`.
pub fn load_trace(dir: &Path) -> Result<Trace> {
    let meta: Meta = crate::util::read_json(&dir.join(META_FILE))?;
    if meta.version != VERSION {
        return Err(Error::Version(meta.version));
    }
    let hidden = read_tensor(&dir.join(HIDDEN_FILE), HIDDEN_MAGIC)?;
    let [hl, ht, hd] = hidden.dims();
    let declared = [meta.layer_ids.len(), meta.num_tokens, meta.hidden_dim];
    if [hl, ht, hd] != declared {
        return Err(Error::DimMismatch(format!(
            "meta.json declares [L, T, d] = {declared:?} but hidden.bin header has [{hl}, {ht}, {hd}]"
        )));
    }

    let heads_path = dir.join(HEADS_FILE);
    let head_norms = match meta.num_heads {
        Some(num_heads) => {
            let heads = read_tensor(&heads_path, HEADS_MAGIC)?;
            let expected = [hl, ht, num_heads];
            if heads.dims() != expected {
                return Err(Error::DimMismatch(format!(
                    "meta.json declares heads {expected:?} but heads.bin header has {:?}",
                    heads.dims()
                )));
            }
            Some(heads)
        }
        None => None,
    };

    let labels = meta
        .labels
        .iter()
        .map(|&c| ConflictLabel::from_code(c))
        .collect::<Result<Vec<_>>>()?;

    let trace = Trace {
        sample_id: meta.sample_id,
        model_id: meta.model_id,
        objective_conflict: meta.objective_conflict,
        tokens: meta.tokens,
        hidden,
        layer_ids: meta.layer_ids,
        labels,
        spans: meta.spans,
        head_norms,
    };
    let violations = validate_trace(&trace);
    if !violations.is_empty() {
        return Err(Error::InvalidTrace(violations));
    }
    Ok(trace)
}

/// Trace directories under `root`: `root` itself if it is a container,
/// otherwise every immediate subdirectory holding a `meta.json`, sorted by name.
pub fn trace_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(META_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Load every trace under `root` (see [`trace_dirs`]).
pub fn load_traces(root: &Path) -> Result<Vec<Trace>> {
    let dirs = trace_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no trace containers under {}", root.display())));
    }
    dirs.iter().map(|d| load_trace(d)).collect()
}
