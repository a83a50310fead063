//! Phoneme n-gram language model with Witten-Bell smoothing, stored as
//! ARPA-style probability tables with per-context backoff weights.
//!
//! Trained counts are compiled into explicit tables so a saved and reloaded
//! model evaluates identically to the trained one: for every context h and
//! word w, P(w|h) is either the interpolated Witten-Bell estimate (seen
//! pairs) or bow(h) * P(w|h') (backoff).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const SENT_START: &str = "<s>";
pub const SENT_END: &str = "</s>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct PhonemeLM {
    pub order: usize,
    /// Predictable symbols: phonemes plus the end marker and <unk>.
    vocab: Vec<String>,
    /// Level n (1-based) tables: space-joined ngram -> ln P(last | rest).
    probs: Vec<BTreeMap<String, f64>>,
    /// Backoff weights ln bow(context) for contexts of length 1..order-1.
    bows: BTreeMap<String, f64>,
}

fn join(parts: &[&str]) -> String {
    parts.join(" ")
}

impl PhonemeLM {
    /// Train a Witten-Bell smoothed backoff model of the given order over
    /// tokenized sentences.
    pub fn train(corpus: &[Vec<String>], order: usize) -> Result<PhonemeLM> {
        if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::InvalidValue {
                op: "train_ngram_lm",
                detail: "empty corpus".into(),
            });
        }
        if order == 0 {
            return Err(Error::InvalidValue {
                op: "train_ngram_lm",
                detail: "order must be at least 1".into(),
            });
        }
        // vocabulary of predictable symbols
        let mut vocab: Vec<String> = corpus
            .iter()
            .flatten()
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        vocab.push(SENT_END.to_string());
        vocab.push(UNK.to_string());
        vocab.sort();
        vocab.dedup();

        // counts per level: context words -> next word -> count
        let mut counts: Vec<BTreeMap<Vec<String>, BTreeMap<String, u64>>> =
            vec![BTreeMap::new(); order];
        for sentence in corpus {
            let mut padded: Vec<String> = vec![SENT_START.to_string(); order - 1];
            padded.extend(sentence.iter().cloned());
            padded.push(SENT_END.to_string());
            for i in (order - 1)..padded.len() {
                for n in 1..=order {
                    let ctx: Vec<String> = padded[i + 1 - n..i].to_vec();
                    *counts[n - 1]
                        .entry(ctx)
                        .or_default()
                        .entry(padded[i].clone())
                        .or_insert(0) += 1;
                }
            }
        }

        // interpolated Witten-Bell probability, recursive over order
        fn wb_prob(
            counts: &[BTreeMap<Vec<String>, BTreeMap<String, u64>>],
            vocab_size: usize,
            ctx: &[String],
            w: &str,
        ) -> f64 {
            let lower = if ctx.is_empty() {
                1.0 / vocab_size as f64
            } else {
                wb_prob(counts, vocab_size, &ctx[1..], w)
            };
            match counts[ctx.len()].get(ctx) {
                None => lower,
                Some(nexts) => {
                    let n: u64 = nexts.values().sum();
                    let t = nexts.len() as u64;
                    let c = nexts.get(w).copied().unwrap_or(0);
                    (c as f64 + t as f64 * lower) / (n + t) as f64
                }
            }
        }

        let v_size = vocab.len();
        let mut probs: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); order];
        let mut bows: BTreeMap<String, f64> = BTreeMap::new();

        // unigram table covers the whole vocabulary
        for w in &vocab {
            let p = wb_prob(&counts, v_size, &[], w);
            probs[0].insert(w.clone(), p.ln());
        }

        // higher-order tables cover seen (context, word) pairs
        for n in 2..=order {
            for (ctx, nexts) in &counts[n - 1] {
                let ctx_refs: Vec<&str> = ctx.iter().map(|s| s.as_str()).collect();
                let mut seen_mass = 0.0;
                let mut lower_mass = 0.0;
                for w in nexts.keys() {
                    let p = wb_prob(&counts, v_size, ctx, w);
                    probs[n - 1].insert(format!("{} {}", join(&ctx_refs), w), p.ln());
                    seen_mass += p;
                    lower_mass += wb_prob(&counts, v_size, &ctx[1..], w);
                }
                // bow scales the lower-order distribution over unseen words
                let num = (1.0 - seen_mass).max(f64::MIN_POSITIVE);
                let den = (1.0 - lower_mass).max(f64::MIN_POSITIVE);
                bows.insert(join(&ctx_refs), (num / den).ln());
            }
        }

        Ok(PhonemeLM {
            order,
            vocab,
            probs,
            bows,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn map_symbol<'a>(&self, s: &'a str) -> &'a str {
        if s == SENT_END || self.vocab.binary_search_by(|v| v.as_str().cmp(s)).is_ok() {
            s
        } else {
            UNK
        }
    }

    /// ln P(w | ctx) with backoff; unknown words map to <unk>.
    pub fn cond_log_prob(&self, ctx: &[&str], w: &str) -> f64 {
        let w = self.map_symbol(w);
        let ctx = if ctx.len() > self.order - 1 {
            &ctx[ctx.len() - (self.order - 1)..]
        } else {
            ctx
        };
        self.lookup(ctx, w)
    }

    fn lookup(&self, ctx: &[&str], w: &str) -> f64 {
        if ctx.is_empty() {
            return *self
                .probs[0]
                .get(w)
                .unwrap_or_else(|| self.probs[0].get(UNK).expect("unk in table"));
        }
        let key = format!("{} {}", join(ctx), w);
        if let Some(p) = self.probs[ctx.len()].get(&key) {
            return *p;
        }
        let bow = self.bows.get(&join(ctx)).copied().unwrap_or(0.0);
        bow + self.lookup(&ctx[1..], w)
    }

    /// Sum over the full sequence of ln P(s_i | history), including the end
    /// marker. Histories are padded with start markers.
    pub fn log_prob(&self, sequence: &[&str]) -> f64 {
        let mut history: Vec<&str> = vec![SENT_START; self.order - 1];
        let mut total = 0.0;
        for &s in sequence.iter().chain(std::iter::once(&SENT_END)) {
            let s = self.map_symbol(s);
            total += self.cond_log_prob(&history, s);
            history.push(s);
            if history.len() > self.order - 1 {
                history.remove(0);
            }
        }
        total
    }

    /// Write the ARPA-layout text format: one line per n-gram,
    /// "log10prob<TAB>ngram<TAB>backoff". Context-only n-grams (the start
    /// markers) appear with the conventional -99 probability so their
    /// backoff weights survive the round trip.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ln10 = std::f64::consts::LN_10;
        // per level: probability entries plus any context-only bow entries
        let mut levels: Vec<BTreeMap<String, Option<f64>>> = Vec::with_capacity(self.order);
        for n in 1..=self.order {
            let mut entries: BTreeMap<String, Option<f64>> = self.probs[n - 1]
                .iter()
                .map(|(k, v)| (k.clone(), Some(*v)))
                .collect();
            for ctx in self.bows.keys() {
                if ctx.split(' ').count() == n {
                    entries.entry(ctx.clone()).or_insert(None);
                }
            }
            levels.push(entries);
        }
        let mut out = String::new();
        out.push_str("\\data\\\n");
        for (n, entries) in levels.iter().enumerate() {
            out.push_str(&format!("ngram {}={}\n", n + 1, entries.len()));
        }
        for (n, entries) in levels.iter().enumerate() {
            out.push_str(&format!("\n\\{}-grams:\n", n + 1));
            for (ngram, lnp) in entries {
                match lnp {
                    Some(p) => out.push_str(&format!("{:.17e}\t{ngram}", p / ln10)),
                    None => out.push_str(&format!("-99\t{ngram}")),
                }
                if let Some(b) = self.bows.get(ngram) {
                    out.push_str(&format!("\t{:.17e}", b / ln10));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Read the format written by [`PhonemeLM::save`].
    pub fn load(path: &Path) -> Result<PhonemeLM> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ln10 = std::f64::consts::LN_10;
        let perr = |line: usize, detail: String| Error::Parse {
            file: path.display().to_string(),
            line,
            detail,
        };
        let mut order = 0usize;
        let mut probs: Vec<BTreeMap<String, f64>> = Vec::new();
        let mut bows: BTreeMap<String, f64> = BTreeMap::new();
        let mut section = 0usize; // current n-gram section
        let mut seen_data = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                seen_data = true;
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (n, _count) = rest
                    .split_once('=')
                    .ok_or_else(|| perr(i + 1, "bad ngram header".into()))?;
                let n: usize = n
                    .trim()
                    .parse()
                    .map_err(|_| perr(i + 1, "bad ngram order".into()))?;
                order = order.max(n);
                while probs.len() < order {
                    probs.push(BTreeMap::new());
                }
                continue;
            }
            if line.ends_with("-grams:") && line.starts_with('\\') {
                let n: usize = line[1..line.len() - "-grams:".len()]
                    .parse()
                    .map_err(|_| perr(i + 1, "bad section header".into()))?;
                section = n;
                continue;
            }
            if !seen_data || section == 0 {
                return Err(perr(i + 1, format!("unexpected line {line:?}")));
            }
            let mut parts = raw.split('\t');
            let p10: f64 = parts
                .next()
                .ok_or_else(|| perr(i + 1, "missing probability".into()))?
                .trim()
                .parse()
                .map_err(|_| perr(i + 1, "bad probability".into()))?;
            let ngram = parts
                .next()
                .ok_or_else(|| perr(i + 1, "missing ngram".into()))?
                .trim()
                .to_string();
            if ngram.split(' ').count() != section {
                return Err(perr(i + 1, format!("{ngram:?} not a {section}-gram")));
            }
            if let Some(b) = parts.next() {
                let b: f64 = b
                    .trim()
                    .parse()
                    .map_err(|_| perr(i + 1, "bad backoff".into()))?;
                bows.insert(ngram.clone(), b * ln10);
            }
            // -99 marks a context-only entry carrying just its backoff
            if p10 != -99.0 {
                probs[section - 1].insert(ngram, p10 * ln10);
            }
        }
        if order == 0 {
            return Err(perr(0, "no ngram sections found".into()));
        }
        let vocab: Vec<String> = probs[0].keys().cloned().collect();
        Ok(PhonemeLM {
            order,
            vocab,
            probs,
            bows,
        })
    }
}

/// Adapts the string-based LM to the decoder's label index sequences.
pub struct IndexedScorer<'a> {
    pub lm: &'a PhonemeLM,
    /// Symbol name per label index.
    pub symbols: Vec<String>,
}

impl crate::beam::SequenceScorer for IndexedScorer<'_> {
    fn sequence_log_prob(&self, labels: &[usize]) -> f64 {
        let seq: Vec<&str> = labels.iter().map(|&i| self.symbols[i].as_str()).collect();
        self.lm.log_prob(&seq)
    }

    fn extension_log_prob(&self, prefix: &[usize], next: usize) -> f64 {
        let mut history: Vec<&str> = vec![SENT_START; self.lm.order - 1];
        history.extend(prefix.iter().map(|&i| self.symbols[i].as_str()));
        let ctx = &history[history.len() - (self.lm.order - 1)..];
        self.lm.cond_log_prob(ctx, &self.symbols[next])
    }
}

#[cfg(test)]
mod tests;
