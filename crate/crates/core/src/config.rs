//! Flat "key = value" configuration files with bracketed [model], [train],
//! and [data] sections. Unknown sections or keys are errors; missing keys
//! fall back to documented defaults. Lines starting with '#' are comments.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::freq::FreqAttentionConfig;
use crate::model::{ModelConfig, Variant};
use crate::train::{Schedule, TrainConfig};

#[derive(Clone, Debug, Default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub cmvn: bool,
}

#[derive(Clone, Debug)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

type Sections = BTreeMap<String, Vec<(String, String, usize)>>;

fn split_sections(text: &str, file: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                file: file.into(),
                line: i + 1,
                detail: format!("malformed section header {line:?}"),
            })?;
            if !matches!(name, "model" | "train" | "data") {
                return Err(Error::Parse {
                    file: file.into(),
                    line: i + 1,
                    detail: format!("unknown section [{name}]"),
                });
            }
            current = Some(name.to_string());
            out.entry(name.to_string()).or_default();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: file.into(),
            line: i + 1,
            detail: format!("expected key = value, got {line:?}"),
        })?;
        let section = current.clone().ok_or_else(|| Error::Parse {
            file: file.into(),
            line: i + 1,
            detail: "key before any [section] header".into(),
        })?;
        out.entry(section)
            .or_default()
            .push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

struct KeyReader<'a> {
    file: &'a str,
    entries: BTreeMap<&'a str, (&'a str, usize)>,
    used: std::cell::RefCell<Vec<&'a str>>,
}

impl<'a> KeyReader<'a> {
    fn new(file: &'a str, entries: &'a [(String, String, usize)]) -> Result<KeyReader<'a>> {
        let mut map = BTreeMap::new();
        for (k, v, line) in entries {
            if map.insert(k.as_str(), (v.as_str(), *line)).is_some() {
                return Err(Error::Parse {
                    file: file.into(),
                    line: *line,
                    detail: format!("duplicate key {k:?}"),
                });
            }
        }
        Ok(KeyReader {
            file,
            entries: map,
            used: std::cell::RefCell::new(Vec::new()),
        })
    }

    fn raw(&self, key: &'a str) -> Option<&'a str> {
        self.used.borrow_mut().push(key);
        self.entries.get(key).map(|(v, _)| *v)
    }

    fn parse<T: std::str::FromStr>(&self, key: &'a str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| self.bad(key, v)),
        }
    }

    fn bad(&self, key: &str, v: &str) -> Error {
        let line = self.entries.get(key).map(|(_, l)| *l).unwrap_or(0);
        Error::Parse {
            file: self.file.into(),
            line,
            detail: format!("bad value {v:?} for {key}"),
        }
    }

    fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        for (k, (_, line)) in &self.entries {
            if !used.contains(k) {
                return Err(Error::Parse {
                    file: self.file.into(),
                    line: *line,
                    detail: format!("unknown key {k:?}"),
                });
            }
        }
        Ok(())
    }
}

fn parse_bool(r: &KeyReader, key: &'static str, default: bool) -> Result<bool> {
    match r.raw(key) {
        None => Ok(default),
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(v) => Err(r.bad(key, v)),
    }
}

fn parse_model_section(file: &str, entries: &[(String, String, usize)]) -> Result<ModelConfig> {
    let r = KeyReader::new(file, entries)?;
    let variant = match r.raw("variant") {
        None => Variant::Baseline,
        Some(v) => Variant::parse(v)?,
    };
    let channels_raw = r.raw("conv_channels").unwrap_or("8,16,16,16");
    let parts: Vec<usize> = channels_raw
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| r.bad("conv_channels", channels_raw))?;
    let conv_channels: [usize; 4] = parts
        .try_into()
        .map_err(|_| r.bad("conv_channels", channels_raw))?;
    let config = ModelConfig {
        variant,
        conv_channels,
        bilstm_hidden: r.parse("bilstm_hidden", 32)?,
        vocab_size: r.parse("vocab_size", 0)?,
        freq_attention: FreqAttentionConfig {
            n_layers: r.parse("attn_layers", 4)?,
            n_heads: r.parse("attn_heads", 4)?,
            d_model: r.parse("attn_d_model", 16)?,
            d_ff: r.parse("attn_d_ff", 64)?,
            dropout: r.parse("dropout", 0.1)?,
            positional_encoding: parse_bool(&r, "positional_encoding", false)?,
        },
        dropout: r.parse("dropout", 0.1)?,
    };
    r.finish()?;
    Ok(config)
}

fn parse_train_section(
    file: &str,
    entries: &[(String, String, usize)],
    variant: Variant,
) -> Result<TrainConfig> {
    let r = KeyReader::new(file, entries)?;
    let learning_rate: f64 = r.parse("learning_rate", 1e-4)?;
    let warmup_steps: usize = r.parse("warmup_steps", 5000)?;
    // the constant schedule is the baseline default, warmup the proposed one
    let schedule = match r.raw("schedule") {
        None => match variant {
            Variant::Baseline => Schedule::Constant(learning_rate),
            Variant::Proposed => Schedule::Warmup { warmup_steps },
        },
        Some("constant") => Schedule::Constant(learning_rate),
        Some("warmup") => Schedule::Warmup { warmup_steps },
        Some(v) => return Err(r.bad("schedule", v)),
    };
    let clip_norm = match r.raw("clip_norm") {
        None => Some(5.0),
        Some("none") => None,
        Some(v) => Some(v.parse().map_err(|_| r.bad("clip_norm", v))?),
    };
    let cfg = TrainConfig {
        epochs: r.parse("epochs", 20)?,
        batch_size: r.parse("batch_size", 8)?,
        schedule,
        seed: r.parse("seed", 0)?,
        clip_norm,
        max_steps: r.parse("max_steps", 0)?,
    };
    r.finish()?;
    Ok(cfg)
}

fn parse_data_section(file: &str, entries: &[(String, String, usize)]) -> Result<DataConfig> {
    let r = KeyReader::new(file, entries)?;
    let cfg = DataConfig {
        train_manifest: r.raw("train_manifest").map(PathBuf::from),
        test_manifest: r.raw("test_manifest").map(PathBuf::from),
        vocab: r.raw("vocab").map(PathBuf::from),
        cmvn: parse_bool(&r, "cmvn", true)?,
    };
    r.finish()?;
    Ok(cfg)
}

/// Parse a full configuration file.
pub fn parse_config(text: &str, file: &str) -> Result<FileConfig> {
    let sections = split_sections(text, file)?;
    let empty = Vec::new();
    let model = parse_model_section(file, sections.get("model").unwrap_or(&empty))?;
    let train = parse_train_section(file, sections.get("train").unwrap_or(&empty), model.variant)?;
    let data = parse_data_section(file, sections.get("data").unwrap_or(&empty))?;
    Ok(FileConfig { model, train, data })
}

pub fn load_config(path: &std::path::Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text, &path.display().to_string())
}

/// Serialize a model configuration as a [model] section; the inverse of
/// [`parse_model_config_text`]. Embedded in checkpoints.
pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let fa = &cfg.freq_attention;
    format!(
        "[model]\nvariant = {}\nconv_channels = {},{},{},{}\nbilstm_hidden = {}\n\
         vocab_size = {}\nattn_layers = {}\nattn_heads = {}\nattn_d_model = {}\n\
         attn_d_ff = {}\ndropout = {}\npositional_encoding = {}\n",
        cfg.variant.as_str(),
        cfg.conv_channels[0],
        cfg.conv_channels[1],
        cfg.conv_channels[2],
        cfg.conv_channels[3],
        cfg.bilstm_hidden,
        cfg.vocab_size,
        fa.n_layers,
        fa.n_heads,
        fa.d_model,
        fa.d_ff,
        cfg.dropout,
        fa.positional_encoding,
    )
}

pub fn parse_model_config_text(text: &str, file: &str) -> Result<ModelConfig> {
    let sections = split_sections(text, file)?;
    let empty = Vec::new();
    parse_model_section(file, sections.get("model").unwrap_or(&empty))
}

#[cfg(test)]
mod tests;
