//! Tensor persistence and image export.
//!
//! Binary tensor format `DPGT`: magic bytes `DPGT`, u32 rank, u32 per
//! dimension, then the entries as little-endian f64. Images export to PGM
//! (P5, single channel) or PPM (P6, three channels) with a linear clamp of
//! [0,1] onto [0,255].

use crate::error::{Error, Result};
use crate::tensor::TensorGrid;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"DPGT";
const MAX_RANK: u32 = 8;

/// Serializes a tensor into the DPGT byte layout.
pub fn tensor_to_bytes(t: &TensorGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the DPGT byte layout back into a tensor.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<TensorGrid> {
    let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
        bytes
            .get(range)
            .ok_or_else(|| Error::Format("truncated tensor file".into()))
    };
    if take(0..4)? != MAGIC {
        return Err(Error::Format("missing DPGT magic".into()));
    }
    let rank = u32::from_le_bytes(take(4..8)?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(Error::Format(format!(
            "rank {rank} exceeds limit {MAX_RANK}"
        )));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut off = 8;
    for _ in 0..rank {
        let d = u32::from_le_bytes(take(off..off + 4)?.try_into().unwrap());
        shape.push(d as usize);
        off += 4;
    }
    let count: usize = shape.iter().product();
    let expected = off + 8 * count;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "tensor payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let start = off + 8 * i;
        data.push(f64::from_le_bytes(
            bytes[start..start + 8].try_into().unwrap(),
        ));
    }
    TensorGrid::new(shape, data)
}

/// Writes a tensor to `path` in DPGT format.
pub fn write_tensor(path: &Path, t: &TensorGrid) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

/// Reads a DPGT tensor from `path`.
pub fn read_tensor(path: &Path) -> Result<TensorGrid> {
    tensor_from_bytes(&fs::read(path)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Exports a `[1,H,W]` tensor as an 8-bit PGM (P5) image.
pub fn write_pgm(path: &Path, t: &TensorGrid) -> Result<()> {
    let (c, h, w) = t.image_dims()?;
    if c != 1 {
        return Err(Error::InvalidOperator(format!(
            "PGM export needs 1 channel, got {c}"
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| quantize(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Exports a `[3,H,W]` tensor as an 8-bit PPM (P6) image.
pub fn write_ppm(path: &Path, t: &TensorGrid) -> Result<()> {
    let (c, h, w) = t.image_dims()?;
    if c != 3 {
        return Err(Error::InvalidOperator(format!(
            "PPM export needs 3 channels, got {c}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(t.data()[ch * plane + p]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads an atom set: every `*.dpgt` file in `dir` (sorted by file name for
/// determinism) plus an optional weights file with one real per line.
/// Missing weights mean uniform.
pub fn load_atoms_dir(dir: &Path, weights: Option<&Path>) -> Result<(Vec<TensorGrid>, Vec<f64>)> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "dpgt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidPrior(format!(
            "no .dpgt atoms in {}",
            dir.display()
        )));
    }
    let atoms = paths
        .iter()
        .map(|p| read_tensor(p))
        .collect::<Result<Vec<_>>>()?;
    let weights = match weights {
        Some(wp) => {
            let text = fs::read_to_string(wp)?;
            let ws = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.parse::<f64>()
                        .map_err(|e| Error::Format(format!("weight line {l:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if ws.len() != atoms.len() {
                return Err(Error::InvalidPrior(format!(
                    "{} weights for {} atoms",
                    ws.len(),
                    atoms.len()
                )));
            }
            ws
        }
        None => vec![1.0 / atoms.len() as f64; atoms.len()],
    };
    Ok((atoms, weights))
}
