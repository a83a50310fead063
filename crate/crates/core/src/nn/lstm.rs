//! Bidirectional LSTM with per-utterance length masking so padded batches
//! reproduce unpadded results exactly.

use rand::Rng;

use super::xavier_uniform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One direction's parameters. Gates are packed (input, forget, cell, output)
/// along the trailing axis.
pub struct LstmDirection {
    pub w: Tensor, // (input_dim, 4H)
    pub u: Tensor, // (H, 4H)
    pub b: Tensor, // (4H)
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> LstmDirection {
        LstmDirection {
            w: xavier_uniform(&[input_dim, 4 * hidden], input_dim, hidden, rng),
            u: xavier_uniform(&[hidden, 4 * hidden], hidden, hidden, rng),
            b: Tensor::from_vec(vec![4 * hidden], vec![0.0; 4 * hidden], true).expect("bias"),
            hidden,
        }
    }

    /// One cell step: (h, c) + input (B, D) -> new (h, c), each (B, H).
    fn step(&self, x_t: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let h_dim = self.hidden;
        let z = x_t.matmul(&self.w)?.add(&h.matmul(&self.u)?)?.add(&self.b)?;
        let i = z.slice(1, 0, h_dim)?.sigmoid();
        let f = z.slice(1, h_dim, 2 * h_dim)?.sigmoid();
        let g = z.slice(1, 2 * h_dim, 3 * h_dim)?.tanh();
        let o = z.slice(1, 3 * h_dim, 4 * h_dim)?.sigmoid();
        let c_new = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_new = o.mul(&c_new.tanh())?;
        Ok((h_new, c_new))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.u"), self.u.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> BiLstm {
        BiLstm {
            fwd: LstmDirection::new(input_dim, hidden, rng),
            bwd: LstmDirection::new(input_dim, hidden, rng),
            hidden,
        }
    }

    /// x: (B, T, D) -> (B, T, 2H), forward outputs then backward outputs
    /// concatenated per frame. `lengths`, when given, mask state updates so
    /// each sequence behaves exactly as if it were run unpadded: the backward
    /// direction stays at its initial state until it reaches the sequence's
    /// true last frame.
    pub fn forward_batch(&self, x: &Tensor, lengths: Option<&[usize]>) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "bilstm",
                detail: format!("want (B, T, D), got {s:?}"),
            });
        }
        let (b, t, _d) = (s[0], s[1], s[2]);
        if t == 0 {
            return Err(Error::Shape {
                op: "bilstm",
                detail: "empty sequence".into(),
            });
        }
        if let Some(ls) = lengths {
            if ls.len() != b || ls.iter().any(|&l| l == 0 || l > t) {
                return Err(Error::Shape {
                    op: "bilstm",
                    detail: format!("bad lengths {ls:?} for (B={b}, T={t})"),
                });
            }
        }
        let steps: Vec<Tensor> = (0..t)
            .map(|ti| x.slice(1, ti, ti + 1)?.reshape(vec![b, s[2]]))
            .collect::<Result<_>>()?;
        let fwd_out = self.run_direction(&self.fwd, &steps, b, lengths, false)?;
        let bwd_out = self.run_direction(&self.bwd, &steps, b, lengths, true)?;
        let mut frames = Vec::with_capacity(t);
        for ti in 0..t {
            let both = Tensor::concat(&[fwd_out[ti].clone(), bwd_out[ti].clone()], 1)?;
            frames.push(both.reshape(vec![b, 1, 2 * self.hidden])?);
        }
        Tensor::concat(&frames, 1)
    }

    fn run_direction(
        &self,
        dir: &LstmDirection,
        steps: &[Tensor],
        b: usize,
        lengths: Option<&[usize]>,
        reversed: bool,
    ) -> Result<Vec<Tensor>> {
        let t = steps.len();
        let h_dim = self.hidden;
        let mut h = Tensor::zeros(vec![b, h_dim]);
        let mut c = Tensor::zeros(vec![b, h_dim]);
        let mut out: Vec<Option<Tensor>> = vec![None; t];
        let order: Vec<usize> = if reversed {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for ti in order {
            let (h_new, c_new) = dir.step(&steps[ti], &h, &c)?;
            match lengths {
                Some(ls) if ls.iter().any(|&l| ti >= l) => {
                    // keep the previous state wherever this frame is padding
                    let mut mv = vec![0.0; b * h_dim];
                    for (bi, &l) in ls.iter().enumerate() {
                        if ti < l {
                            mv[bi * h_dim..(bi + 1) * h_dim].fill(1.0);
                        }
                    }
                    let m = Tensor::from_vec(vec![b, h_dim], mv.clone(), false)?;
                    let inv = Tensor::from_vec(
                        vec![b, h_dim],
                        mv.iter().map(|v| 1.0 - v).collect(),
                        false,
                    )?;
                    h = h_new.mul(&m)?.add(&h.mul(&inv)?)?;
                    c = c_new.mul(&m)?.add(&c.mul(&inv)?)?;
                }
                _ => {
                    h = h_new;
                    c = c_new;
                }
            }
            out[ti] = Some(h.clone());
        }
        Ok(out.into_iter().map(|o| o.expect("filled")).collect())
    }

    /// Single sequence (T, D) -> (T, 2H).
    pub fn forward_seq(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "bilstm",
                detail: format!("want (T, D), got {s:?}"),
            });
        }
        let y = self.forward_batch(&x.reshape(vec![1, s[0], s[1]])?, None)?;
        y.reshape(vec![s[0], 2 * self.hidden])
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fwd.params(&format!("{prefix}.fwd"), out);
        self.bwd.params(&format!("{prefix}.bwd"), out);
    }
}
