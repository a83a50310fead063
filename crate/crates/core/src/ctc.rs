//! Connectionist Temporal Classification: the forward-backward loss in log
//! space with analytic gradients, an exact path-enumeration oracle, and
//! best-path (greedy) decoding.
//!
//! Index 0 is the blank symbol throughout.

use crate::error::{Error, Result};
use crate::tensor::{CustomGrad, Tensor};

pub const BLANK: usize = 0;

/// Per-frame pre-softmax scores, row-major T x V.
#[derive(Debug, Clone)]
pub struct LogitMatrix {
    pub n_frames: usize,
    pub vocab_size: usize,
    pub data: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(n_frames: usize, vocab_size: usize, data: Vec<f64>) -> Result<LogitMatrix> {
        if data.len() != n_frames * vocab_size {
            return Err(Error::Shape {
                op: "logit_matrix",
                detail: format!(
                    "{} values for {n_frames} x {vocab_size}",
                    data.len()
                ),
            });
        }
        Ok(LogitMatrix {
            n_frames,
            vocab_size,
            data,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    /// Stable log-softmax of every row.
    pub fn log_softmax(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.n_frames {
            let row = self.row(t);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            let lz = mx + z.ln();
            for (o, &x) in out[t * self.vocab_size..(t + 1) * self.vocab_size]
                .iter_mut()
                .zip(row)
            {
                *o = x - lz;
            }
        }
        out
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Shortest frame count that can align to `target`: its length plus one for
/// every adjacent repeat (a repeat needs an interposed blank).
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate_target(target: &[usize], vocab_size: usize) -> Result<()> {
    for &l in target {
        if l == BLANK || l >= vocab_size {
            return Err(Error::InvalidValue {
                op: "ctc",
                detail: format!("target symbol {l} out of range 1..{vocab_size}"),
            });
        }
    }
    Ok(())
}

/// Blank-augmented label sequence: blank, l1, blank, l2, ..., blank.
fn augment(target: &[usize]) -> Vec<usize> {
    let mut aug = Vec::with_capacity(2 * target.len() + 1);
    aug.push(BLANK);
    for &l in target {
        aug.push(l);
        aug.push(BLANK);
    }
    aug
}

/// Forward (alpha) dynamic program over the augmented labels. Both alpha and
/// beta include the emission at their own frame. Returns (alphas, log_prob).
fn alpha_pass(log_probs: &[f64], v: usize, t_len: usize, aug: &[usize]) -> (Vec<f64>, f64) {
    let s_len = aug.len();
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = log_probs[aug[0]];
    if s_len > 1 {
        alpha[1] = log_probs[aug[1]];
    }
    for t in 1..t_len {
        let lp = &log_probs[t * v..(t + 1) * v];
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && aug[s] != BLANK && aug[s] != aug[s - 2] {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp[aug[s]] };
        }
    }
    let mut log_p = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    (alpha, log_p)
}

fn beta_pass(log_probs: &[f64], v: usize, t_len: usize, aug: &[usize]) -> Vec<f64> {
    let s_len = aug.len();
    let ninf = f64::NEG_INFINITY;
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    let lp_last = &log_probs[(t_len - 1) * v..t_len * v];
    beta[last + s_len - 1] = lp_last[aug[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp_last[aug[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        let lp = &log_probs[t * v..(t + 1) * v];
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && aug[s] != BLANK && aug[s] != aug[s + 2] {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + lp[aug[s]] };
        }
    }
    beta
}

/// Exact log probability of emitting `target`, computed by the forward
/// algorithm over already log-softmaxed rows.
pub fn ctc_sequence_log_prob(log_probs: &[f64], v: usize, t_len: usize, target: &[usize]) -> f64 {
    if t_len < min_frames(target) {
        return f64::NEG_INFINITY;
    }
    let aug = augment(target);
    alpha_pass(log_probs, v, t_len, &aug).1
}

struct CtcGrad {
    t_len: usize,
    v: usize,
    log_probs: Vec<f64>,
    alpha: Vec<f64>,
    aug: Vec<usize>,
    log_p: f64,
}

impl CustomGrad for CtcGrad {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let g = out_grad[0];
        let (t_len, v, s_len) = (self.t_len, self.v, self.aug.len());
        let beta = beta_pass(&self.log_probs, v, t_len, &self.aug);
        let mut dx = vec![0.0; t_len * v];
        for t in 0..t_len {
            let lp = &self.log_probs[t * v..(t + 1) * v];
            // gamma[k]: posterior occupancy of symbol k at frame t
            let mut gamma = vec![0.0; v];
            for s in 0..s_len {
                let a = self.alpha[t * s_len + s];
                let b = beta[t * s_len + s];
                if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                    continue;
                }
                let k = self.aug[s];
                gamma[k] += (a + b - lp[k] - self.log_p).exp();
            }
            for k in 0..v {
                dx[t * v + k] = g * (lp[k].exp() - gamma[k]);
            }
        }
        vec![dx]
    }
}

/// CTC loss for one utterance: the negative log probability, over all
/// blank-augmented alignments, of `logits` (a (T, V) tensor) emitting
/// `target`. Differentiable with respect to the logits.
pub fn ctc_loss(logits: &Tensor, target: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "ctc_loss",
            detail: format!("want (T, V), got {s:?}"),
        });
    }
    let (t_len, v) = (s[0], s[1]);
    validate_target(target, v)?;
    let need = min_frames(target);
    if t_len < need {
        return Err(Error::TargetTooLong {
            target_len: target.len(),
            need,
            got: t_len,
        });
    }
    let mat = LogitMatrix::new(t_len, v, logits.to_vec())?;
    let log_probs = mat.log_softmax();
    let aug = augment(target);
    let (alpha, log_p) = alpha_pass(&log_probs, v, t_len, &aug);
    let loss = -log_p;
    let grad = CtcGrad {
        t_len,
        v,
        log_probs,
        alpha,
        aug,
        log_p,
    };
    Ok(Tensor::custom(
        vec![logits.clone()],
        vec![1],
        vec![loss],
        Box::new(grad),
    ))
}

/// Remove repeats then blanks: the CTC collapse function.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != BLANK {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Exact loss by enumerating all V^T paths and summing those that collapse
/// to `target`. Unreachable targets give +infinity.
pub fn ctc_brute_force(logits: &LogitMatrix, target: &[usize]) -> Result<f64> {
    let (t_len, v) = (logits.n_frames, logits.vocab_size);
    let total = (v as f64).powi(t_len as i32);
    if total > 1e6 {
        return Err(Error::InvalidValue {
            op: "ctc_brute_force",
            detail: format!("{v}^{t_len} paths exceed the 1e6 cap"),
        });
    }
    validate_target(target, v)?;
    let log_probs = logits.log_softmax();
    let mut path = vec![0usize; t_len];
    let mut log_p = f64::NEG_INFINITY;
    loop {
        if collapse(&path) == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| log_probs[t * v + k])
                .sum();
            log_p = log_add(log_p, lp);
        }
        // odometer increment
        let mut i = t_len;
        loop {
            if i == 0 {
                return Ok(-log_p);
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Best-path decoding: per-frame argmax (ties toward the lower index),
/// collapse repeats, drop blanks.
pub fn greedy_decode(logits: &LogitMatrix) -> Vec<usize> {
    let v = logits.vocab_size;
    let path: Vec<usize> = (0..logits.n_frames)
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for k in 1..v {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

#[cfg(test)]
mod tests;
