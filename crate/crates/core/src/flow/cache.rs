//! On-disk flow clips: `"FLO3"`, u32 T/H/W, then every u plane followed by
//! every v plane, f32 little-endian. Values are stored exactly as they enter
//! the flow stream, i.e. already scaled by `1 / clip_limit`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FLO3";

pub fn encode(flow_clip: &Tensor<f32>) -> Vec<u8> {
    let &[2, t, h, w] = flow_clip.shape() else {
        panic!("flow clip must be [2, T, H, W], got {:?}", flow_clip.shape());
    };
    let mut out = Vec::with_capacity(16 + 4 * flow_clip.len());
    out.extend_from_slice(MAGIC);
    for d in [t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in flow_clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> io::Result<Tensor<f32>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a FLO3 flow file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let n = 2usize
        .checked_mul(t)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("flow extents overflow".into()))?;
    if n == 0 || bytes.len() != 16 + 4 * n {
        return Err(bad(format!(
            "flow file of {} bytes does not match extents {t}x{h}x{w}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(vec![2, t, h, w], data).map_err(|e| bad(e.to_string()))
}

/// Path of a clip's cached flow inside `dir`.
pub fn cache_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.flo3"))
}

pub fn save(path: &Path, flow_clip: &Tensor<f32>) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(flow_clip))
}

pub fn load(path: &Path) -> io::Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}
