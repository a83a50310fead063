//! The frequency-directional feature converter: split a (batch, units, time,
//! frequency) activation into per-frame sequences of frequency-bin tokens,
//! run a Transformer encoder stack across the bins of each frame
//! independently, and restore the original layout.
//!
//! The per-item, per-frame loop is executed as one batched pass over all
//! `B * T` frame sequences; the two are bit-identical because every sequence
//! is processed with the same arithmetic in both arrangements.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_encoding, Mode, TransformerEncoderLayer};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FreqAttentionConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Optional sinusoidal encoding over the bin index, off by default.
    pub positional_encoding: bool,
}

impl Default for FreqAttentionConfig {
    fn default() -> Self {
        FreqAttentionConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 16,
            d_ff: 64,
            dropout: 0.1,
            positional_encoding: false,
        }
    }
}

/// One batch item decomposed to (T, F, units) frame sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqSequenceBatch {
    pub t: usize,
    pub f: usize,
    pub units: usize,
    /// Row-major over (t, f, unit).
    pub values: Vec<f64>,
}

/// Per-frame attention weights for one batch item,
/// indexed (layer, head, frame, query_bin, key_bin).
#[derive(Debug, Clone)]
pub struct FrameAttentionMaps {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_frames: usize,
    pub f: usize,
    data: Vec<f64>,
}

impl FrameAttentionMaps {
    pub fn frame_map(&self, layer: usize, head: usize, frame: usize) -> &[f64] {
        let ff = self.f * self.f;
        let base = ((layer * self.n_heads + head) * self.n_frames + frame) * ff;
        &self.data[base..base + ff]
    }

    /// Mean of the F x F weight matrices over an inclusive frame range.
    /// Rows of the result still sum to one.
    pub fn mean_over(&self, first: usize, last: usize) -> Result<AttentionMaps> {
        if first > last || last >= self.n_frames {
            return Err(Error::InvalidValue {
                op: "collect_attention",
                detail: format!(
                    "frame range {first}..{last} out of 0..{} or empty",
                    self.n_frames
                ),
            });
        }
        let ff = self.f * self.f;
        let n = (last - first + 1) as f64;
        let mut data = vec![0.0; self.n_layers * self.n_heads * ff];
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let dst = (l * self.n_heads + h) * ff;
                for t in first..=last {
                    let src = self.frame_map(l, h, t);
                    for (d, s) in data[dst..dst + ff].iter_mut().zip(src) {
                        *d += s / n;
                    }
                }
            }
        }
        Ok(AttentionMaps {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            f: self.f,
            data,
        })
    }
}

/// Frame-averaged attention weights, indexed (layer, head, query, key).
/// Every (layer, head, query) row is a distribution over key bins.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub n_layers: usize,
    pub n_heads: usize,
    pub f: usize,
    data: Vec<f64>,
}

impl AttentionMaps {
    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        let ff = self.f * self.f;
        let base = (layer * self.n_heads + head) * ff;
        &self.data[base..base + ff]
    }

    /// Mean over heads of one layer's maps.
    pub fn head_mean(&self, layer: usize) -> Vec<f64> {
        let ff = self.f * self.f;
        let mut out = vec![0.0; ff];
        for h in 0..self.n_heads {
            for (o, s) in out.iter_mut().zip(self.map(layer, h)) {
                *o += s / self.n_heads as f64;
            }
        }
        out
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let m = self.map(l, h);
                for q in 0..self.f {
                    let s: f64 = m[q * self.f..(q + 1) * self.f].iter().sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        worst
    }
}

/// Pure axis permutation of a (B, units, T, F) tensor's values into per-item
/// (T, F, units) sequences; value-preserving.
pub fn decompose(x: &Tensor) -> Result<Vec<FreqSequenceBatch>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "decompose",
            detail: format!("want (B, units, T, F), got {s:?}"),
        });
    }
    let (b, u, t, f) = (s[0], s[1], s[2], s[3]);
    let xv = x.values();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut values = Vec::with_capacity(u * t * f);
        for ti in 0..t {
            for fi in 0..f {
                for ui in 0..u {
                    values.push(xv[((bi * u + ui) * t + ti) * f + fi]);
                }
            }
        }
        out.push(FreqSequenceBatch {
            t,
            f,
            units: u,
            values,
        });
    }
    Ok(out)
}

/// Inverse of [`decompose`]: reassemble per-item sequences into the original
/// (B, units, T, F) layout.
pub fn compose(items: &[FreqSequenceBatch]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Shape {
            op: "compose",
            detail: "no items".into(),
        });
    }
    let (t, f, u) = (items[0].t, items[0].f, items[0].units);
    if items.iter().any(|i| i.t != t || i.f != f || i.units != u) {
        return Err(Error::Shape {
            op: "compose",
            detail: "items disagree on (T, F, units)".into(),
        });
    }
    let b = items.len();
    let mut values = vec![0.0; b * u * t * f];
    for (bi, item) in items.iter().enumerate() {
        for ti in 0..t {
            for fi in 0..f {
                for ui in 0..u {
                    values[((bi * u + ui) * t + ti) * f + fi] =
                        item.values[(ti * f + fi) * u + ui];
                }
            }
        }
    }
    Tensor::from_vec(vec![b, u, t, f], values, false)
}

/// The encoder stack plus the reshape adapter around it.
pub struct FreqTransformer {
    pub config: FreqAttentionConfig,
    pub layers: Vec<TransformerEncoderLayer>,
}

impl FreqTransformer {
    pub fn new(config: FreqAttentionConfig, rng: &mut impl Rng) -> Result<FreqTransformer> {
        if config.n_layers > 0 && (config.n_heads == 0 || config.d_model % config.n_heads != 0) {
            return Err(Error::InvalidValue {
                op: "freq_transformer",
                detail: format!(
                    "d_model {} not divisible by {} heads",
                    config.d_model, config.n_heads
                ),
            });
        }
        let layers = (0..config.n_layers)
            .map(|_| {
                TransformerEncoderLayer::new(
                    config.d_model,
                    config.n_heads,
                    config.d_ff,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(FreqTransformer {
            config,
            layers,
        })
    }

    /// x: (B, units, T, F) -> same shape. Every one of the B*T frames is an
    /// independent F-token sequence through the encoder stack; no attention
    /// crosses time frames. Attention maps are collected only in eval mode.
    pub fn apply(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
        collect: bool,
    ) -> Result<(Tensor, Option<Vec<FrameAttentionMaps>>)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.d_model {
            return Err(Error::Shape {
                op: "freq_transformer",
                detail: format!("want (B, {}, T, F), got {s:?}", self.config.d_model),
            });
        }
        let collect = collect && mode == Mode::Eval;
        let (b, u, t, f) = (s[0], s[1], s[2], s[3]);
        let mut tokens = x
            .transpose(1, 2)? // (B, T, units, F)
            .transpose(2, 3)? // (B, T, F, units)
            .reshape(vec![b * t, f, u])?;
        if self.config.positional_encoding && !self.layers.is_empty() {
            tokens = tokens.add(&sinusoidal_encoding(f, u))?;
        }
        let mut layer_maps: Vec<Vec<f64>> = Vec::new();
        for layer in &self.layers {
            let (next, maps) = layer.forward(&tokens, mode, rng, collect)?;
            tokens = next;
            if let Some(m) = maps {
                layer_maps.push(m);
            }
        }
        let out = tokens
            .reshape(vec![b, t, f, u])?
            .transpose(2, 3)? // (B, T, units, F)
            .transpose(1, 2)?; // (B, units, T, F)
        let maps = collect.then(|| self.split_maps(&layer_maps, b, t, f));
        Ok((out, maps))
    }

    /// Reorganize per-layer (B*T, H, F, F) buffers into per-item
    /// (layer, head, frame, q, k) maps.
    fn split_maps(&self, layer_maps: &[Vec<f64>], b: usize, t: usize, f: usize) -> Vec<FrameAttentionMaps> {
        let h = self.config.n_heads;
        let ff = f * f;
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let mut data = vec![0.0; layer_maps.len() * h * t * ff];
            for (l, lm) in layer_maps.iter().enumerate() {
                for hi in 0..h {
                    for ti in 0..t {
                        let src = ((bi * t + ti) * h + hi) * ff;
                        let dst = ((l * h + hi) * t + ti) * ff;
                        data[dst..dst + ff].copy_from_slice(&lm[src..src + ff]);
                    }
                }
            }
            out.push(FrameAttentionMaps {
                n_layers: layer_maps.len(),
                n_heads: h,
                n_frames: t,
                f,
                data,
            });
        }
        out
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params(&format!("{prefix}.{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests;
