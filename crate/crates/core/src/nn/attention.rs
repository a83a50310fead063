//! Multi-head self-attention over an unmasked token sequence and the
//! post-norm Transformer encoder layer built from it.

use rand::Rng;

use super::{dropout, LayerNorm, Linear, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense (unmasked) multi-head self-attention: every query attends to every
/// position in the sequence.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<MultiHeadAttention> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::InvalidValue {
                op: "multi_head_attention",
                detail: format!("d_model {d_model} not divisible by {n_heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(d_model, d_model, rng),
            wk: Linear::new(d_model, d_model, rng),
            wv: Linear::new(d_model, d_model, rng),
            wo: Linear::new(d_model, d_model, rng),
            d_model,
            n_heads,
            d_k: d_model / n_heads,
        })
    }

    /// x: (N, S, d_model) -> same shape. When `collect` is set, also returns
    /// the (N, heads, S, S) attention weights.
    pub fn forward(&self, x: &Tensor, collect: bool) -> Result<(Tensor, Option<Vec<f64>>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::Shape {
                op: "multi_head_attention",
                detail: format!("want (N, S, {}), got {s:?}", self.d_model),
            });
        }
        let (n, seq) = (s[0], s[1]);
        let split = |t: Tensor| -> Result<Tensor> {
            t.reshape(vec![n, seq, self.n_heads, self.d_k])?.transpose(1, 2)
        };
        let q = split(self.wq.forward(x)?)?;
        let k = split(self.wk.forward(x)?)?;
        let v = split(self.wv.forward(x)?)?;
        let scores = q
            .matmul(&k.transpose(2, 3)?)?
            .scale(1.0 / (self.d_k as f64).sqrt());
        let attn = scores.softmax(3)?; // (N, H, S, S)
        let maps = collect.then(|| attn.to_vec());
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape(vec![n, seq, self.d_model])?;
        Ok((self.wo.forward(&ctx)?, maps))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

/// Post-norm encoder layer:
/// y = LN(x + Drop(SelfAttn(x))); out = LN(y + Drop(W2 relu(W1 y))).
pub struct TransformerEncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub dropout_p: f64,
}

impl TransformerEncoderLayer {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        dropout_p: f64,
        rng: &mut impl Rng,
    ) -> Result<TransformerEncoderLayer> {
        Ok(TransformerEncoderLayer {
            attn: MultiHeadAttention::new(d_model, n_heads, rng)?,
            ff1: Linear::new(d_model, d_ff, rng),
            ff2: Linear::new(d_ff, d_model, rng),
            ln1: LayerNorm::new(d_model),
            ln2: LayerNorm::new(d_model),
            dropout_p,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
        collect: bool,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        let (a, maps) = self.attn.forward(x, collect)?;
        let y = self.ln1.forward(&x.add(&dropout(&a, self.dropout_p, mode, rng)?)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&y)?.relu())?;
        let out = self
            .ln2
            .forward(&y.add(&dropout(&f, self.dropout_p, mode, rng)?)?)?;
        Ok((out, maps))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ff1.params(&format!("{prefix}.ff1"), out);
        self.ff2.params(&format!("{prefix}.ff2"), out);
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
    }
}

/// Sinusoidal positional encoding over sequence position, (seq, d_model).
pub fn sinusoidal_encoding(seq: usize, d_model: usize) -> Tensor {
    let mut v = vec![0.0; seq * d_model];
    for pos in 0..seq {
        for i in 0..d_model {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            v[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![seq, d_model], v, false).expect("pe shape")
}
