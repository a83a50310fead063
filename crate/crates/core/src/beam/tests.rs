use super::*;
use crate::ctc::{greedy_decode, min_frames};
use crate::lm::{IndexedScorer, PhonemeLM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_logits(t: usize, v: usize, rng: &mut ChaCha8Rng) -> LogitMatrix {
    let data = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
    LogitMatrix::new(t, v, data).unwrap()
}

fn opts(width: usize) -> BeamOptions {
    BeamOptions {
        beam_width: width,
        ..BeamOptions::default()
    }
}

/// All label sequences over 1..V of length <= max_len.
fn all_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let syms = v - 1;
    for len in 1..=max_len {
        for mut code in 0..syms.pow(len as u32) {
            let mut s = Vec::with_capacity(len);
            for _ in 0..len {
                s.push(1 + code % syms);
                code /= syms;
            }
            out.push(s);
        }
    }
    out
}

#[test]
fn width_one_equals_greedy_on_500_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..500 {
        let t = rng.gen_range(1..=12usize);
        let v = rng.gen_range(2..=8usize);
        let logits = rand_logits(t, v, &mut rng);
        let greedy = greedy_decode(&logits);
        let best = beam_search_decode(&logits, &opts(1), None).unwrap();
        assert_eq!(best[0].labels, greedy, "instance {i}");
    }
}

#[test]
fn score_is_monotone_in_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let t = rng.gen_range(2..=10usize);
        let v = rng.gen_range(2..=6usize);
        let logits = rand_logits(t, v, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for w in [1usize, 2, 5, 20] {
            let best = beam_search_decode(&logits, &opts(w), None).unwrap();
            assert!(
                best[0].score >= prev - 1e-12,
                "instance {i}: width {w} scored {} after {prev}",
                best[0].score
            );
            prev = best[0].score;
        }
    }
}

#[test]
fn wide_beam_matches_exhaustive_scoring_without_lm() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let t = rng.gen_range(1..=3usize);
        let logits = rand_logits(t, 3, &mut rng);
        let log_probs = logits.log_softmax();
        // exhaustive: best exact CTC score over every reachable sequence
        let mut best_seq = Vec::new();
        let mut best_score = f64::NEG_INFINITY;
        for seq in all_sequences(3, t) {
            if min_frames(&seq) > t {
                continue;
            }
            let s = crate::ctc::ctc_sequence_log_prob(&log_probs, 3, t, &seq);
            if s > best_score || (s == best_score && seq < best_seq) {
                best_score = s;
                best_seq = seq;
            }
        }
        let hyps = beam_search_decode(&logits, &opts(20), None).unwrap();
        assert_eq!(hyps[0].labels, best_seq);
        assert!((hyps[0].score - best_score).abs() < 1e-12);
    }
}

#[test]
fn beam_with_lm_matches_exhaustive_scoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let corpus: Vec<Vec<String>> = ["a b", "a b a", "b a", "a", "b b a"]
        .iter()
        .map(|s| s.split_whitespace().map(str::to_string).collect())
        .collect();
    let lm = PhonemeLM::train(&corpus, 3).unwrap();
    let scorer = IndexedScorer {
        lm: &lm,
        symbols: vec!["<blank>".into(), "a".into(), "b".into()],
    };
    for _ in 0..30 {
        let t = rng.gen_range(1..=4usize);
        let logits = rand_logits(t, 3, &mut rng);
        let log_probs = logits.log_softmax();
        let mut best_seq = Vec::new();
        let mut best_score = f64::NEG_INFINITY;
        for seq in all_sequences(3, t) {
            if min_frames(&seq) > t {
                continue;
            }
            let ctc = crate::ctc::ctc_sequence_log_prob(&log_probs, 3, t, &seq);
            let syms: Vec<&str> = seq.iter().map(|&i| if i == 1 { "a" } else { "b" }).collect();
            let s = ctc + 1.0 * lm.log_prob(&syms);
            if s > best_score || (s == best_score && seq < best_seq) {
                best_score = s;
                best_seq = seq;
            }
        }
        let o = BeamOptions {
            beam_width: 20,
            lm_weight: 1.0,
            ..BeamOptions::default()
        };
        let hyps = beam_search_decode(&logits, &o, Some(&scorer)).unwrap();
        assert_eq!(hyps[0].labels, best_seq);
        assert!((hyps[0].score - best_score).abs() < 1e-12);
    }
}

#[test]
fn zero_lm_weight_equals_pure_ctc_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let corpus: Vec<Vec<String>> = vec![vec!["a".into(), "b".into()]];
    let lm = PhonemeLM::train(&corpus, 3).unwrap();
    let scorer = IndexedScorer {
        lm: &lm,
        symbols: vec!["<blank>".into(), "a".into(), "b".into()],
    };
    for _ in 0..20 {
        let logits = rand_logits(4, 3, &mut rng);
        let o = BeamOptions {
            beam_width: 5,
            lm_weight: 0.0,
            ..BeamOptions::default()
        };
        let with_lm = beam_search_decode(&logits, &o, Some(&scorer)).unwrap();
        let without = beam_search_decode(&logits, &opts(5), None).unwrap();
        let a: Vec<_> = with_lm.iter().map(|h| h.labels.clone()).collect();
        let b: Vec<_> = without.iter().map(|h| h.labels.clone()).collect();
        assert_eq!(a, b);
        assert!((with_lm[0].score - without[0].score).abs() < 1e-12);
    }
}

#[test]
fn forbidden_symbols_are_never_hypothesized() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        // make symbol 1 overwhelmingly likely; forbidding it must exclude it
        let mut logits = rand_logits(5, 4, &mut rng);
        for t in 0..5 {
            logits.data[t * 4 + 1] = 10.0;
        }
        let o = BeamOptions {
            beam_width: 4,
            forbidden: vec![1],
            ..BeamOptions::default()
        };
        for h in beam_search_decode(&logits, &o, None).unwrap() {
            assert!(!h.labels.contains(&1));
        }
    }
}

#[test]
fn shallow_fusion_runs_and_returns_valid_hypotheses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let corpus: Vec<Vec<String>> = vec![
        vec!["a".into(), "b".into()],
        vec!["a".into(), "b".into(), "a".into()],
    ];
    let lm = PhonemeLM::train(&corpus, 3).unwrap();
    let scorer = IndexedScorer {
        lm: &lm,
        symbols: vec!["<blank>".into(), "a".into(), "b".into()],
    };
    let logits = rand_logits(5, 3, &mut rng);
    let o = BeamOptions {
        beam_width: 5,
        lm_weight: 1.0,
        shallow_fusion: true,
        ..BeamOptions::default()
    };
    let hyps = beam_search_decode(&logits, &o, Some(&scorer)).unwrap();
    assert!(!hyps.is_empty());
    for pair in hyps.windows(2) {
        assert!(pair[0].score >= pair[1].score);
    }
}

#[test]
fn zero_width_is_rejected() {
    let logits = LogitMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
    assert!(beam_search_decode(&logits, &opts(0), None).is_err());
}
