//! Versioned binary checkpoints: magic "FQA1", a format version, the model
//! configuration as text, the step counter, then named little-endian f64
//! arrays for parameters and Adam moments. Round trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_config_to_text, parse_model_config_text};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 4] = b"FQA1";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub moments: Vec<(String, Vec<f64>)>,
}

fn push_named_array(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: Option<&AdamState>,
    step: u64,
) -> Result<()> {
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = model_config_to_text(&model.config);
    out.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        push_named_array(&mut out, name, p.shape(), &p.values());
    }
    match adam {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(state) => {
            out.extend_from_slice(&(2 * params.len() as u32).to_le_bytes());
            for (i, (name, _)) in params.iter().enumerate() {
                push_named_array(&mut out, &format!("adam.m.{name}"), &[state.m[i].len()], &state.m[i]);
                push_named_array(&mut out, &format!("adam.v.{name}"), &[state.v[i].len()], &state.v[i]);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn named_array(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("array name not utf-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptCheckpoint(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = self.take(numel * 8)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, values))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version} (want {VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::CorruptCheckpoint("config not utf-8".into()))?;
    let config = parse_model_config_text(&cfg_text, &path.display().to_string())?;
    let step = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.named_array()?);
    }
    let n_moments = r.u32()? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        let (name, _, values) = r.named_array()?;
        moments.push((name, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        moments,
    })
}

impl Checkpoint {
    /// Copy stored parameters into an existing model. The model's config and
    /// every parameter name/shape must match.
    pub fn apply_to(&self, model: &Model) -> Result<()> {
        if model.config != self.config {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is a {} model; target is {}",
                self.config.variant.as_str(),
                model.config.variant.as_str()
            )));
        }
        let params = model.params();
        if params.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} stored arrays vs {} model parameters",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, p), (sname, sdims, svals)) in params.iter().zip(&self.params) {
            if name != sname || p.shape() != &sdims[..] {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {sname} {sdims:?} does not match model's {name} {:?}",
                    p.shape()
                )));
            }
            p.set_values(svals)?;
        }
        Ok(())
    }

    /// Build a fresh model from the stored config and parameters.
    pub fn build_model(&self) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // init overwritten below
        let model = Model::new(self.config.clone(), &mut rng)?;
        self.apply_to(&model)?;
        Ok(model)
    }

    /// Rebuild the optimizer state stored alongside the parameters.
    pub fn restore_adam(&self, params: &[(String, Tensor)]) -> Result<AdamState> {
        let mut state = AdamState::new(params);
        state.step = self.step;
        if self.moments.is_empty() {
            return Ok(state);
        }
        if self.moments.len() != 2 * params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} moment arrays for {} parameters",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, (name, _)) in params.iter().enumerate() {
            let (mn, mv) = &self.moments[2 * i];
            let (vn, vv) = &self.moments[2 * i + 1];
            if mn != &format!("adam.m.{name}") || vn != &format!("adam.v.{name}") {
                return Err(Error::CorruptCheckpoint(format!(
                    "moment arrays {mn}/{vn} out of order for {name}"
                )));
            }
            state.m[i] = mv.clone();
            state.v[i] = vv.clone();
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests;
