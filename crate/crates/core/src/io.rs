//! Tensor file format (SDT1).
//!
//! Layout, all little-endian: magic `SDT1`, u32 rank, u32 per dimension,
//! then f32 elements row-major. Grids always serialize with rank 3 and
//! dimensions (height, width, channels).

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use std::path::Path;

pub fn tensor_bytes(g: &ImageGrid) -> Vec<u8> {
    let (h, w, d) = g.shape();
    let mut out = Vec::with_capacity(16 + 4 * g.numel());
    out.extend_from_slice(b"SDT1");
    out.extend_from_slice(&3u32.to_le_bytes());
    for dim in [h, w, d] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in g.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<ImageGrid> {
    let fail = |msg: &str| Error::Format { path: "<bytes>".into(), message: msg.into() };
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        bytes.get(off..off + len).ok_or_else(|| fail("truncated tensor"))
    };
    if take(0, 4)? != b"SDT1" {
        return Err(fail("bad magic, expected SDT1"));
    }
    let read_u32 =
        |off: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap())) };
    let rank = read_u32(4)? as usize;
    if rank != 3 {
        return Err(fail(&format!("expected rank 3 tensor, got rank {rank}")));
    }
    let h = read_u32(8)? as usize;
    let w = read_u32(12)? as usize;
    let d = read_u32(16)? as usize;
    if h == 0 || w == 0 || d == 0 {
        return Err(fail("zero-sized dimension"));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| fail("dimension overflow"))?;
    let mut data = Vec::with_capacity(n);
    let mut off = 20;
    for _ in 0..n {
        let b: [u8; 4] = take(off, 4)?.try_into().unwrap();
        data.push(f32::from_le_bytes(b) as f64);
        off += 4;
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after payload"));
    }
    ImageGrid::from_vec(h, w, d, data)
}

pub fn save_tensor(path: &Path, g: &ImageGrid) -> Result<()> {
    std::fs::write(path, tensor_bytes(g)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor(path: &Path) -> Result<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    tensor_from_bytes(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => {
            Error::Format { path: path.display().to_string(), message }
        }
        other => other,
    })
}
