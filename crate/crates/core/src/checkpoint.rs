//! Checkpoint files: a text manifest listing every tensor, then the
//! tensors themselves as concatenated TNSR blobs.
//!
//! ```text
//! REFOCUS-CKPT 1
//! tensors <n>
//! <name> <d0>x<d1>x... <offset> <length>     (one line per tensor)
//! payload
//! <blob bytes; offsets are relative to the first byte after "payload\n">
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::tnsr;
use crate::Parameters;

const HEADER: &str = "REFOCUS-CKPT 1";
const PAYLOAD: &str = "payload";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn encode<P: Parameters>(params: &P) -> Vec<u8> {
    let named = params.named();
    let mut head = format!("{HEADER}\ntensors {}\n", named.len());
    let mut offset = 0;
    for (name, t) in &named {
        let len = tnsr::encoded_len(t);
        head.push_str(&format!("{name} {} {offset} {len}\n", shape_str(t.shape())));
        offset += len;
    }
    head.push_str(PAYLOAD);
    head.push('\n');
    let mut out = head.into_bytes();
    out.reserve(offset);
    for (_, t) in &named {
        out.extend(tnsr::encode(t));
    }
    out
}

pub fn save<P: Parameters>(params: &P, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

fn parse_entry(line: &str, index: usize) -> Result<ManifestEntry> {
    let fields: Vec<&str> = line.split(' ').collect();
    let [name, shape, offset, length] = fields[..] else {
        return Err(ckpt(format!("manifest entry {index} is malformed: {line:?}")));
    };
    let bad = |what: &str| ckpt(format!("manifest entry {index} ({name}) has a bad {what}"));
    let shape = shape
        .split('x')
        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("shape"))?;
    Ok(ManifestEntry {
        name: name.to_string(),
        shape,
        offset: offset.parse().map_err(|_| bad("offset"))?,
        length: length.parse().map_err(|_| bad("length"))?,
    })
}

/// Reads and checks the manifest, leaving `r` at the first payload byte.
pub fn read_manifest<R: BufRead>(r: &mut R) -> Result<Vec<ManifestEntry>> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            return Err(ckpt("manifest is truncated"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next(r)? != HEADER {
        return Err(ckpt("not a checkpoint (bad header)"));
    }
    let count_line = next(r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ckpt(format!("bad tensor count line {count_line:?}")))?;
    let mut entries = Vec::with_capacity(count.min(4096));
    let mut expected_offset = 0;
    for i in 0..count {
        let e = parse_entry(&next(r)?, i)?;
        if e.offset != expected_offset {
            return Err(ckpt(format!("tensor {} has offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        expected_offset += e.length;
        entries.push(e);
    }
    if next(r)? != PAYLOAD {
        return Err(ckpt("manifest does not end with the payload marker"));
    }
    Ok(entries)
}

/// Checks `entries` against the tensors of `params`, naming the first
/// mismatching tensor.
pub fn check_manifest<P: Parameters>(entries: &[ManifestEntry], params: &P) -> Result<()> {
    let named = params.named();
    for (i, (name, t)) in named.iter().enumerate() {
        let Some(e) = entries.get(i) else {
            return Err(ckpt(format!("checkpoint is missing tensor {name}")));
        };
        if &e.name != name {
            return Err(ckpt(format!("tensor {i} is {} in the checkpoint, expected {name}", e.name)));
        }
        if e.shape != t.shape() {
            return Err(ckpt(format!(
                "tensor {name} has shape {:?} in the checkpoint, expected {:?}",
                e.shape,
                t.shape()
            )));
        }
    }
    if let Some(extra) = entries.get(named.len()) {
        return Err(ckpt(format!("checkpoint has unexpected tensor {}", extra.name)));
    }
    Ok(())
}

fn fill<P: Parameters>(entries: &[ManifestEntry], payload: &[u8], params: &mut P) -> Result<()> {
    let mut loaded = Vec::with_capacity(entries.len());
    for e in entries {
        let blob = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| ckpt(format!("payload is truncated inside tensor {}", e.name)))?;
        let (t, used) = tnsr::decode(blob).map_err(|m| ckpt(format!("tensor {}: {m}", e.name)))?;
        if used != e.length || t.shape() != e.shape {
            return Err(ckpt(format!("tensor {} does not match its manifest entry", e.name)));
        }
        loaded.push(t);
    }
    let end = entries.last().map_or(0, |e| e.offset + e.length);
    if payload.len() != end {
        return Err(ckpt(format!("{} trailing payload bytes", payload.len() - end)));
    }
    for ((_, slot), t) in params.named_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(())
}

/// Overwrites `params` with the checkpoint in `bytes`. Nothing is written
/// unless the whole checkpoint is valid.
pub fn decode_into<P: Parameters>(bytes: &[u8], params: &mut P) -> Result<()> {
    let mut cursor = std::io::Cursor::new(bytes);
    let entries = read_manifest(&mut cursor)?;
    check_manifest(&entries, params)?;
    let start = cursor.position() as usize;
    fill(&entries, &bytes[start..], params)
}

/// Loads `path` into `params`, whose structure (built from the run
/// configuration) the manifest must match before any payload is read.
pub fn load_into<P: Parameters>(path: &Path, params: &mut P) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let entries = read_manifest(&mut r)?;
    check_manifest(&entries, params)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    fill(&entries, &payload, params)
}

/// Shapes recorded in a checkpoint, keyed by tensor name.
pub fn tensor_shapes(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_manifest(&mut BufReader::new(file))?;
    Ok(entries.into_iter().map(|e| (e.name, e.shape)).collect())
}
