//! 2-D convolution over (batch, channels, time, frequency) tensors and
//! max pooling along the time axis.

use rand::Rng;

use super::xavier_uniform;
use crate::error::{Error, Result};
use crate::tensor::{CustomGrad, Tensor};

pub const DEFAULT_KERNEL: usize = 3;

/// "Same" convolution with an odd square kernel, stride 1. Cross-correlation
/// plus bias; time and frequency extents are preserved.
pub struct Conv2d {
    pub weight: Tensor, // (out_ch, in_ch, k, k)
    pub bias: Tensor,   // (out_ch)
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Conv2d {
        Conv2d::with_kernel(in_channels, out_channels, DEFAULT_KERNEL, rng)
    }

    pub fn with_kernel(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Conv2d {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        Conv2d {
            weight: xavier_uniform(
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                fan_out,
                rng,
            ),
            bias: Tensor::from_vec(vec![out_channels], vec![0.0; out_channels], true)
                .expect("bias"),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// x: (B, C_in, T, F) -> (B, C_out, T, F).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("want (B, {}, T, F), got {:?}", self.in_channels, x.shape()),
            });
        }
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let k = self.kernel;
        let pad = k / 2;
        // zero-pad time and frequency for "same" output size
        let xp = if pad > 0 {
            let zt = Tensor::zeros(vec![b, c, pad, f]);
            let xp = Tensor::concat(&[zt.clone(), x.clone(), zt], 2)?;
            let zf = Tensor::zeros(vec![b, c, t + 2 * pad, pad]);
            Tensor::concat(&[zf.clone(), xp, zf], 3)?
        } else {
            x.clone()
        };
        // im2col: one shifted slice per kernel tap, stacked on the channel axis
        let mut taps = Vec::with_capacity(k * k);
        for dh in 0..k {
            for dw in 0..k {
                taps.push(xp.slice(2, dh, dh + t)?.slice(3, dw, dw + f)?);
            }
        }
        let cols = Tensor::concat(&taps, 1)?; // (B, k*k*C, T, F), tap-major
        let cols = cols.transpose(1, 2)?.transpose(2, 3)?; // (B, T, F, k*k*C)
        // kernel as a (k*k*C, out) matrix in the same tap-major order
        let kmat = self
            .weight
            .reshape(vec![self.out_channels, c, k * k])?
            .transpose(1, 2)?
            .reshape(vec![self.out_channels, k * k * c])?
            .transpose(0, 1)?;
        let y = cols.matmul(&kmat)?.add(&self.bias)?; // (B, T, F, out)
        y.transpose(2, 3)?.transpose(1, 2) // (B, out, T, F)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

struct MaxPoolTimeGrad {
    in_numel: usize,
    argmax: Vec<usize>, // flat input index per output cell
}

impl CustomGrad for MaxPoolTimeGrad {
    fn name(&self) -> &'static str {
        "max_pool_time"
    }

    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let mut dx = vec![0.0; self.in_numel];
        for (o, &src) in self.argmax.iter().enumerate() {
            dx[src] += out_grad[o];
        }
        vec![dx]
    }
}

/// Max over disjoint windows of `pool` frames along the time axis of a
/// (B, C, T, F) tensor; a trailing partial window is dropped. Ties go to the
/// earlier frame.
pub fn max_pool_time(x: &Tensor, pool: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "max_pool_time",
            detail: format!("want rank 4, got {s:?}"),
        });
    }
    let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
    if pool == 0 || t < pool {
        return Err(Error::Shape {
            op: "max_pool_time",
            detail: format!("time axis {t} shorter than pool {pool}"),
        });
    }
    let t_out = t / pool;
    let xv = x.values();
    let mut out = Vec::with_capacity(b * c * t_out * f);
    let mut argmax = Vec::with_capacity(b * c * t_out * f);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * t * f;
            for to in 0..t_out {
                for fi in 0..f {
                    let mut best_idx = base + (to * pool) * f + fi;
                    let mut best = xv[best_idx];
                    for p in 1..pool {
                        let idx = base + (to * pool + p) * f + fi;
                        if xv[idx] > best {
                            best = xv[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    drop(xv);
    let grad = MaxPoolTimeGrad {
        in_numel: x.numel(),
        argmax,
    };
    Ok(Tensor::custom(
        vec![x.clone()],
        vec![b, c, t_out, f],
        out,
        Box::new(grad),
    ))
}
