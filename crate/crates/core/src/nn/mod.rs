//! Neural building blocks on top of the tensor engine: linear, layer norm,
//! dropout, 2-D convolution, time pooling, BiLSTM, multi-head self-attention,
//! and the Transformer encoder layer.

mod attention;
mod conv;
mod lstm;

pub use attention::{sinusoidal_encoding, MultiHeadAttention, TransformerEncoderLayer};
pub use conv::{max_pool_time, Conv2d};
pub use lstm::{BiLstm, LstmDirection};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{CustomGrad, Tensor};

/// Forward-pass mode; dropout fires only in `Train`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Xavier-uniform leaf: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape.to_vec(), -a, a, rng, true)
}

/// Fully-connected layer, y = x W + b, applied over the trailing axis.
pub struct Linear {
    pub weight: Tensor, // (in, out)
    pub bias: Tensor,   // (out)
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Linear {
        Linear {
            weight: xavier_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
            bias: Tensor::from_vec(vec![out_dim], vec![0.0; out_dim], true).expect("bias"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let in_dim = self.weight.shape()[0];
        if *x.shape().last().unwrap_or(&0) != in_dim {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("input {:?} does not end in {in_dim}", x.shape()),
            });
        }
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Inverted dropout: zero with probability `p` and scale survivors by
/// 1/(1-p) in train mode; identity in eval mode.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidValue {
            op: "dropout",
            detail: format!("p must be in [0,1), got {p}"),
        });
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(x.shape().to_vec(), mask, false)?;
    x.mul(&mask)
}

/// Layer normalization over the trailing axis with learned gain and shift.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    dim: usize,
}

struct LayerNormGrad {
    dim: usize,
    x_hat: Vec<f64>,
    inv_sigma: Vec<f64>, // one per row
    gamma: Vec<f64>,
}

impl CustomGrad for LayerNormGrad {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let d = self.dim;
        let rows = out_grad.len() / d;
        let mut dx = vec![0.0; out_grad.len()];
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..rows {
            let g = &out_grad[r * d..(r + 1) * d];
            let xh = &self.x_hat[r * d..(r + 1) * d];
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                let dxh = g[j] * self.gamma[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            let inv_s = self.inv_sigma[r];
            for j in 0..d {
                let dxh = g[j] * self.gamma[j];
                dx[r * d + j] = inv_s * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::from_vec(vec![dim], vec![1.0; dim], true).expect("gamma"),
            beta: Tensor::from_vec(vec![dim], vec![0.0; dim], true).expect("beta"),
            eps: 1e-5,
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if *x.shape().last().unwrap_or(&0) != self.dim {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("input {:?} does not end in {}", x.shape(), self.dim),
            });
        }
        let d = self.dim;
        let xv = x.values();
        let gv = self.gamma.values();
        let bv = self.beta.values();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut x_hat = vec![0.0; xv.len()];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_s = 1.0 / (var + self.eps).sqrt();
            inv_sigma[r] = inv_s;
            for j in 0..d {
                let xh = (row[j] - mean) * inv_s;
                x_hat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let grad = LayerNormGrad {
            dim: d,
            x_hat,
            inv_sigma,
            gamma: gv.clone(),
        };
        drop(xv);
        drop(gv);
        drop(bv);
        Ok(Tensor::custom(
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            x.shape().to_vec(),
            out,
            Box::new(grad),
        ))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}
