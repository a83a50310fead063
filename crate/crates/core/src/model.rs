//! Model assembly: the baseline CNN/BiLSTM/CTC stack and the proposed
//! variant that inserts the frequency-directional Transformer after the
//! pooled second convolution.
//!
//! Padded batches reproduce unpadded per-utterance results exactly: padding
//! frames are re-zeroed between convolutions and the BiLSTM gates its state
//! by true sequence length.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::freq::{FrameAttentionMaps, FreqAttentionConfig, FreqTransformer};
use crate::nn::{dropout, max_pool_time, BiLstm, Conv2d, Linear, Mode};
use crate::tensor::Tensor;

pub const N_MELS: usize = 40;
pub const TIME_POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Proposed,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Proposed => "proposed",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "proposed" => Ok(Variant::Proposed),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (want baseline or proposed)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub conv_channels: [usize; 4],
    pub bilstm_hidden: usize,
    pub vocab_size: usize,
    pub freq_attention: FreqAttentionConfig,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small preset for fast experiments and CI.
    pub fn toy(variant: Variant, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant,
            conv_channels: [8, 16, 16, 16],
            bilstm_hidden: 32,
            vocab_size,
            freq_attention: FreqAttentionConfig::default(),
            dropout: 0.1,
        }
    }

    /// Full-size preset. The BiLSTM widths land the baseline near 13M
    /// parameters and the proposed model near 4M, preserving the published
    /// ordering; the exact published dimensions are not recoverable.
    pub fn paper_scale(variant: Variant, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant,
            conv_channels: [32, 16, 32, 32],
            bilstm_hidden: match variant {
                Variant::Baseline => 768,
                Variant::Proposed => 320,
            },
            vocab_size,
            freq_attention: FreqAttentionConfig::default(),
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 3 (blank, unk, one phoneme), got {}",
                self.vocab_size
            )));
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.bilstm_hidden == 0 {
            return Err(Error::Config("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.variant == Variant::Proposed {
            let fa = &self.freq_attention;
            if fa.d_model != self.conv_channels[1] {
                return Err(Error::Config(format!(
                    "proposed variant needs conv_channels[1] ({}) == attention d_model ({})",
                    self.conv_channels[1], fa.d_model
                )));
            }
            if fa.n_layers > 0 && (fa.n_heads == 0 || fa.d_model % fa.n_heads != 0) {
                return Err(Error::Config(format!(
                    "d_model {} not divisible by {} heads",
                    fa.d_model, fa.n_heads
                )));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count for this architecture.
    pub fn analytic_param_count(&self) -> usize {
        let k = crate::nn::DEFAULT_KERNEL;
        let [c1, c2, c3, c4] = self.conv_channels;
        let conv = |cin: usize, cout: usize| cout * cin * k * k + cout;
        let mut total = conv(1, c1) + conv(c1, c2) + conv(c2, c3) + conv(c3, c4);
        if self.variant == Variant::Proposed {
            let fa = &self.freq_attention;
            let d = fa.d_model;
            let per_layer = 4 * (d * d + d)                  // QKVO projections
                + d * fa.d_ff + fa.d_ff + fa.d_ff * d + d    // feed-forward
                + 2 * 2 * d; // two layer norms
            total += fa.n_layers * per_layer;
        }
        let input = c4 * N_MELS;
        let h = self.bilstm_hidden;
        total += 2 * (input * 4 * h + h * 4 * h + 4 * h); // both LSTM directions
        total += 2 * h * self.vocab_size + self.vocab_size; // output FC
        total
    }
}

pub struct ForwardOutput {
    /// (B, T', vocab) per-frame scores.
    pub logits: Tensor,
    /// True frame count per utterance after pooling.
    pub pooled_lengths: Vec<usize>,
    /// Per-utterance frequency-attention maps (proposed variant, eval mode,
    /// when requested).
    pub attention: Option<Vec<FrameAttentionMaps>>,
}

pub struct Model {
    pub config: ModelConfig,
    convs: Vec<Conv2d>,
    freq: Option<FreqTransformer>,
    lstm: BiLstm,
    fc: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.conv_channels;
        let convs = vec![
            Conv2d::new(1, c1, rng),
            Conv2d::new(c1, c2, rng),
            Conv2d::new(c2, c3, rng),
            Conv2d::new(c3, c4, rng),
        ];
        let freq = match config.variant {
            Variant::Proposed => Some(FreqTransformer::new(config.freq_attention.clone(), rng)?),
            Variant::Baseline => None,
        };
        let lstm = BiLstm::new(c4 * N_MELS, config.bilstm_hidden, rng);
        let fc = Linear::new(2 * config.bilstm_hidden, config.vocab_size, rng);
        Ok(Model {
            config,
            convs,
            freq,
            lstm,
            fc,
        })
    }

    /// Named trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            conv.params(&format!("conv{}", i + 1), &mut out);
        }
        if let Some(freq) = &self.freq {
            freq.params("freq", &mut out);
        }
        self.lstm.params("bilstm", &mut out);
        self.fc.params("fc", &mut out);
        out
    }

    pub fn count_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.params() {
            p.zero_grad();
        }
    }

    /// feats: (B, 1, T, n_mels); `lengths` gives each utterance's true frame
    /// count. Returns per-frame logits over the pooled time axis.
    pub fn forward(
        &self,
        feats: &Tensor,
        lengths: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
        collect_attention: bool,
    ) -> Result<ForwardOutput> {
        let s = feats.shape();
        if s.len() != 4 || s[1] != 1 || s[3] != N_MELS {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("want (B, 1, T, {N_MELS}), got {s:?}"),
            });
        }
        let (b, t) = (s[0], s[2]);
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Shape {
                op: "model_forward",
                detail: format!("bad lengths {lengths:?} for (B={b}, T={t})"),
            });
        }
        let needs_mask = lengths.iter().any(|&l| l < t);
        let mask_full = |x: &Tensor, lens: &[usize]| -> Result<Tensor> {
            if !needs_mask {
                return Ok(x.clone());
            }
            let xs = x.shape();
            let (c, tt, f) = (xs[1], xs[2], xs[3]);
            let mut mv = vec![0.0; b * c * tt * f];
            for (bi, &l) in lens.iter().enumerate() {
                for ci in 0..c {
                    let base = (bi * c + ci) * tt * f;
                    mv[base..base + l.min(tt) * f].fill(1.0);
                }
            }
            x.mul(&Tensor::from_vec(xs.to_vec(), mv, false)?)
        };

        let mut x = mask_full(&self.convs[0].forward(feats)?.relu(), lengths)?;
        x = self.convs[1].forward(&x)?.relu();
        x = max_pool_time(&x, TIME_POOL)?;
        let pooled: Vec<usize> = lengths.iter().map(|&l| l / TIME_POOL).collect();
        x = mask_full(&x, &pooled)?;
        let mut attention = None;
        if let Some(freq) = &self.freq {
            let (y, maps) = freq.apply(&x, mode, rng, collect_attention)?;
            x = mask_full(&y, &pooled)?;
            attention = maps;
        }
        x = mask_full(&self.convs[2].forward(&x)?.relu(), &pooled)?;
        x = mask_full(&self.convs[3].forward(&x)?.relu(), &pooled)?;
        // (B, C, T', F) -> (B, T', C*F)
        let xs = x.shape().to_vec();
        let flat = x
            .transpose(1, 2)?
            .reshape(vec![b, xs[2], xs[1] * xs[3]])?;
        let lstm_lengths: Vec<usize> = pooled.iter().map(|&l| l.max(1)).collect();
        let h = self.lstm.forward_batch(&flat, Some(&lstm_lengths))?;
        let h = dropout(&h, self.config.dropout, mode, rng)?;
        let logits = self.fc.forward(&h)?;
        Ok(ForwardOutput {
            logits,
            pooled_lengths: pooled,
            attention,
        })
    }
}

#[cfg(test)]
mod tests;
