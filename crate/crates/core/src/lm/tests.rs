use super::*;
use tempfile::tempdir;

fn sentences(s: &[&str]) -> Vec<Vec<String>> {
    s.iter()
        .map(|x| x.split_whitespace().map(str::to_string).collect())
        .collect()
}

#[test]
fn witten_bell_hand_computed_values() {
    // single sentence "a a a"; vocab {a, </s>, <unk>}
    let lm = PhonemeLM::train(&sentences(&["a a a"]), 3).unwrap();
    // hand-applied interpolated Witten-Bell:
    let p_a = (3.0 + 2.0 * (1.0 / 3.0)) / 6.0; // unigram
    let p_a_a = (2.0 + 2.0 * p_a) / 5.0; // bigram ctx [a]
    let p_a_aa = (1.0 + 2.0 * p_a_a) / 4.0; // trigram ctx [a, a]
    let got = lm.cond_log_prob(&["a", "a"], "a").exp();
    assert!((got - p_a_aa).abs() < 1e-12, "{got} vs {p_a_aa}");
    assert!(got > 0.5);
    // and unseen continuations are strictly less likely but nonzero
    let unseen = lm.cond_log_prob(&["a", "a"], "zzz").exp();
    assert!(unseen > 0.0 && unseen < got);
}

#[test]
fn conditionals_sum_to_one() {
    let lm = PhonemeLM::train(&sentences(&["a b a", "b a", "a a b"]), 3).unwrap();
    let contexts: Vec<Vec<&str>> = vec![
        vec![],
        vec!["a"],
        vec!["b", "a"],
        vec!["a", "a"],
        vec!["<s>", "<s>"],
        vec!["b", "b"], // unseen context
    ];
    for ctx in contexts {
        let total: f64 = lm
            .vocab()
            .iter()
            .map(|w| lm.cond_log_prob(&ctx, w).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "ctx {ctx:?}: sum {total}");
    }
}

#[test]
fn unseen_context_backs_off_and_never_zeroes() {
    let lm = PhonemeLM::train(&sentences(&["a b c", "c b a"]), 3).unwrap();
    // context never seen as a trigram history: backs off to bigram then unigram
    let p = lm.cond_log_prob(&["c", "c"], "a");
    assert!(p.is_finite() && p.exp() > 0.0);
    // totally unseen context equals the unigram path
    let p2 = lm.cond_log_prob(&["zzz", "qqq"], "a");
    assert!((p2 - lm.cond_log_prob(&[], "a")).abs() < 1e-12);
}

#[test]
fn sequence_scoring() {
    // sentence ends are well attested after every context here, so each
    // appended symbol strictly lowers the log probability
    let lm = PhonemeLM::train(
        &sentences(&["a", "b", "a b", "b a", "a b a", "b a b", "a a", "b b"]),
        3,
    )
    .unwrap();
    // empty sequence scores the end marker after two start markers
    let empty = lm.log_prob(&[]);
    assert!((empty - lm.cond_log_prob(&[SENT_START, SENT_START], SENT_END)).abs() < 1e-12);
    let mut seq: Vec<&str> = vec!["a"];
    let mut prev = lm.log_prob(&seq);
    for s in ["b", "a", "b", "a"] {
        seq.push(s);
        let lp = lm.log_prob(&seq);
        assert!(lp < prev, "{seq:?}: {lp} vs {prev}");
        prev = lp;
    }
}

#[test]
fn own_sentence_is_most_probable_among_equal_length() {
    let lm = PhonemeLM::train(&sentences(&["a b c", "a b c", "a b c"]), 3).unwrap();
    let syms = ["a", "b", "c"];
    let own = lm.log_prob(&["a", "b", "c"]);
    for i in 0..27 {
        let seq = [syms[i / 9], syms[(i / 3) % 3], syms[i % 3]];
        let lp = lm.log_prob(&seq);
        assert!(lp <= own, "{seq:?} scored {lp} above {own}");
    }
}

#[test]
fn save_load_round_trip_preserves_scores() {
    let lm = PhonemeLM::train(&sentences(&["a b a c", "c a", "b b a"]), 3).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("phoneme.lm");
    lm.save(&path).unwrap();
    let loaded = PhonemeLM::load(&path).unwrap();
    let probes: Vec<Vec<&str>> = vec![
        vec![],
        vec!["a"],
        vec!["a", "b", "a"],
        vec!["c", "c", "c"],
        vec!["b", "a", "zzz"],
    ];
    for seq in probes {
        let a = lm.log_prob(&seq);
        let b = loaded.log_prob(&seq);
        assert!((a - b).abs() < 1e-9, "{seq:?}: {a} vs {b}");
    }
    // conditionals still normalized after the round trip
    let total: f64 = loaded
        .vocab()
        .iter()
        .map(|w| loaded.cond_log_prob(&["a", "b"], w).exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-9, "sum {total}");
}

#[test]
fn empty_corpus_is_rejected() {
    assert!(PhonemeLM::train(&[], 3).is_err());
    assert!(PhonemeLM::train(&sentences(&[""]), 3).is_err());
}
