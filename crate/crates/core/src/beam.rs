//! CTC prefix beam search with N-best rescoring.
//!
//! The search merges blank-ending and symbol-ending probabilities per label
//! prefix in log space, pruning to the beam width each frame. Each frame also
//! restricts expansion to the `beam_width` highest-scoring symbols, which
//! makes width 1 coincide exactly with best-path (greedy) decoding. Surviving
//! prefixes are rescored with the exact forward-algorithm CTC probability and
//! optionally a language model; the final score is
//! `log P_ctc + lm_weight * log P_lm`.

use std::collections::HashMap;

use crate::ctc::{ctc_sequence_log_prob, LogitMatrix, BLANK};
use crate::error::{Error, Result};

/// Scores label index sequences; implemented by the phoneme LM adapter.
pub trait SequenceScorer {
    /// Full-sequence log probability including the sentence end.
    fn sequence_log_prob(&self, labels: &[usize]) -> f64;
    /// log P(next | prefix context), used for in-beam shallow fusion.
    fn extension_log_prob(&self, prefix: &[usize], next: usize) -> f64;
}

#[derive(Debug, Clone)]
pub struct BeamOptions {
    pub beam_width: usize,
    pub lm_weight: f64,
    /// Add LM scores during beam expansion instead of only rescoring.
    pub shallow_fusion: bool,
    /// Symbols the decoder must never hypothesize (e.g. <unk>).
    pub forbidden: Vec<usize>,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_width: 20,
            lm_weight: 1.0,
            shallow_fusion: false,
            forbidden: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub ctc_log_prob: f64,
    pub lm_log_prob: f64,
    pub score: f64,
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

#[derive(Clone, Copy)]
struct Mass {
    blank: f64,
    symbol: f64,
}

impl Mass {
    const EMPTY: Mass = Mass {
        blank: f64::NEG_INFINITY,
        symbol: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.symbol)
    }
}

/// N-best decoding. Returns hypotheses sorted by final score (descending),
/// ties broken by lexicographic label order.
pub fn beam_search_decode(
    logits: &LogitMatrix,
    opts: &BeamOptions,
    scorer: Option<&dyn SequenceScorer>,
) -> Result<Vec<Hypothesis>> {
    if opts.beam_width == 0 {
        return Err(Error::InvalidValue {
            op: "beam_search",
            detail: "beam width must be at least 1".into(),
        });
    }
    let v = logits.vocab_size;
    let log_probs = logits.log_softmax();
    let fusion = opts.shallow_fusion && scorer.is_some();

    let mut beams: Vec<(Vec<usize>, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            symbol: f64::NEG_INFINITY,
        },
    )];
    for t in 0..logits.n_frames {
        let lp = &log_probs[t * v..(t + 1) * v];
        // per-frame symbol pruning: the beam_width best symbols, ties toward
        // the lower index
        let mut ranked: Vec<usize> = (0..v).filter(|k| !opts.forbidden.contains(k)).collect();
        ranked.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
        ranked.truncate(opts.beam_width);

        let mut next: HashMap<Vec<usize>, Mass> = HashMap::new();
        for (prefix, mass) in &beams {
            let total = mass.total();
            for &k in &ranked {
                if k == BLANK {
                    let e = next.entry(prefix.clone()).or_insert(Mass::EMPTY);
                    e.blank = log_add(e.blank, lp[BLANK] + total);
                } else if Some(&k) == prefix.last() {
                    // staying on the same symbol extends the emission
                    let e = next.entry(prefix.clone()).or_insert(Mass::EMPTY);
                    e.symbol = log_add(e.symbol, lp[k] + mass.symbol);
                    // a blank-separated repeat starts a new emission
                    if mass.blank > f64::NEG_INFINITY {
                        let mut ext = prefix.clone();
                        ext.push(k);
                        let add = if fusion {
                            opts.lm_weight
                                * scorer.unwrap().extension_log_prob(prefix, k)
                        } else {
                            0.0
                        };
                        let e = next.entry(ext).or_insert(Mass::EMPTY);
                        e.symbol = log_add(e.symbol, lp[k] + mass.blank + add);
                    }
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let add = if fusion {
                        opts.lm_weight * scorer.unwrap().extension_log_prob(prefix, k)
                    } else {
                        0.0
                    };
                    let e = next.entry(ext).or_insert(Mass::EMPTY);
                    e.symbol = log_add(e.symbol, lp[k] + total + add);
                }
            }
        }
        let mut merged: Vec<(Vec<usize>, Mass)> = next.into_iter().collect();
        merged.sort_by(|a, b| {
            b.1.total()
                .partial_cmp(&a.1.total())
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        merged.truncate(opts.beam_width);
        beams = merged;
    }

    // exact rescoring pass
    let mut out: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(labels, _)| {
            let ctc = ctc_sequence_log_prob(&log_probs, v, logits.n_frames, &labels);
            let lm = scorer.map_or(0.0, |s| s.sequence_log_prob(&labels));
            Hypothesis {
                score: ctc + opts.lm_weight * lm,
                ctc_log_prob: ctc,
                lm_log_prob: lm,
                labels,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.labels.cmp(&b.labels))
    });
    Ok(out)
}

#[cfg(test)]
mod tests;
