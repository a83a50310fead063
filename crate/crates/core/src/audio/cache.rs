//! Binary feature cache: magic "FBK1", utterance id, frame count, dimension,
//! frame shift, then row-major little-endian f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FBK1";

pub fn write_feature_cache(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(32 + features.data.len() * 8);
    out.extend_from_slice(MAGIC);
    let id = features.utterance_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(features.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(features.dim as u32).to_le_bytes());
    out.extend_from_slice(&features.frame_shift_s.to_le_bytes());
    for v in &features.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |detail: &str| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        detail: format!("feature cache: {detail}"),
    };
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated file"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("id not utf-8"))?;
    let n_frames = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let frame_shift_s = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let payload = take(n_frames * dim * 8)?;
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(FeatureMatrix {
        utterance_id: id,
        frame_shift_s,
        n_frames,
        dim,
        data,
    })
}
