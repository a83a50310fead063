use super::*;
use crate::tensor::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform_logits(t: usize, v: usize) -> LogitMatrix {
    LogitMatrix::new(t, v, vec![0.0; t * v]).unwrap()
}

fn rand_logits(t: usize, v: usize, rng: &mut ChaCha8Rng) -> LogitMatrix {
    let data = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    LogitMatrix::new(t, v, data).unwrap()
}

fn loss_of(logits: &LogitMatrix, target: &[usize]) -> crate::error::Result<f64> {
    let t = Tensor::from_vec(
        vec![logits.n_frames, logits.vocab_size],
        logits.data.clone(),
        false,
    )
    .unwrap();
    Ok(ctc_loss(&t, target)?.item())
}

#[test]
fn uniform_two_frame_closed_forms() {
    // T=2, V={blank,a,b}, uniform: paths collapsing to "a" are a_, _a, aa
    let logits = uniform_logits(2, 3);
    let loss_a = loss_of(&logits, &[1]).unwrap();
    assert!((loss_a - 3f64.ln()).abs() < 1e-12, "{loss_a}");
    assert!((loss_a - ctc_brute_force(&logits, &[1]).unwrap()).abs() < 1e-12);

    // target "ab": only the path ab survives collapse
    let loss_ab = loss_of(&logits, &[1, 2]).unwrap();
    assert!((loss_ab - 9f64.ln()).abs() < 1e-12, "{loss_ab}");
    assert!((loss_ab - ctc_brute_force(&logits, &[1, 2]).unwrap()).abs() < 1e-12);
}

#[test]
fn repeat_needs_separating_blank() {
    let logits = uniform_logits(2, 3);
    let err = loss_of(&logits, &[1, 1]).unwrap_err();
    assert!(matches!(
        err,
        crate::error::Error::TargetTooLong { need: 3, got: 2, .. }
    ));
    // brute force reports an impossible target as +infinity
    assert_eq!(ctc_brute_force(&logits, &[1, 1]).unwrap(), f64::INFINITY);
    // with 3 frames the blank-separated repeat fits
    let logits3 = uniform_logits(3, 3);
    let loss = loss_of(&logits3, &[1, 1]).unwrap();
    assert!((loss - ctc_brute_force(&logits3, &[1, 1]).unwrap()).abs() < 1e-12);
}

#[test]
fn empty_target_is_the_all_blank_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = rand_logits(1, 4, &mut rng);
    let loss = loss_of(&logits, &[]).unwrap();
    let lp = logits.log_softmax();
    assert!((loss + lp[BLANK]).abs() < 1e-12);
    assert!((loss - ctc_brute_force(&logits, &[]).unwrap()).abs() < 1e-12);
}

/// Exhaustive oracle agreement: every (T, V, target) on the small grid plus
/// 200 random instances.
#[test]
fn matches_brute_force_on_grid_and_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // all targets over symbols 1..V with length <= 3
    fn targets(v: usize) -> Vec<Vec<usize>> {
        let mut all = vec![vec![]];
        for len in 1..=3usize {
            let syms = v - 1;
            for mut code in 0..syms.pow(len as u32) {
                let mut t = Vec::with_capacity(len);
                for _ in 0..len {
                    t.push(1 + code % syms);
                    code /= syms;
                }
                all.push(t);
            }
        }
        all
    }
    let mut checked = 0;
    for v in 2..=4usize {
        for t_len in 1..=6usize {
            let logits = rand_logits(t_len, v, &mut rng);
            for target in targets(v) {
                let brute = ctc_brute_force(&logits, &target).unwrap();
                if t_len < min_frames(&target) {
                    assert_eq!(brute, f64::INFINITY);
                    assert!(loss_of(&logits, &target).is_err());
                } else {
                    let dp = loss_of(&logits, &target).unwrap();
                    assert!(
                        (dp - brute).abs() < 1e-10,
                        "T={t_len} V={v} target {target:?}: {dp} vs {brute}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 234, "exhaustive grid size changed");

    for _ in 0..200 {
        let v = rng.gen_range(2..=4usize);
        let t_len = rng.gen_range(1..=5usize);
        let logits = rand_logits(t_len, v, &mut rng);
        let len = rng.gen_range(0..=3usize.min(t_len));
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        if t_len < min_frames(&target) {
            continue;
        }
        let dp = loss_of(&logits, &target).unwrap();
        let brute = ctc_brute_force(&logits, &target).unwrap();
        assert!((dp - brute).abs() < 1e-10, "{dp} vs {brute}");
    }
}

/// exp(-loss) summed over every possible target (lengths 0..=T) is exactly
/// the total path probability, 1.
#[test]
fn probability_partition_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in 2..=3usize {
        for t_len in 1..=4usize {
            let logits = rand_logits(t_len, v, &mut rng);
            let mut total = 0.0;
            // all targets with length <= T over non-blank symbols
            let syms = v - 1;
            for len in 0..=t_len {
                let combos = syms.pow(len as u32);
                for mut code in 0..combos {
                    let mut target = Vec::with_capacity(len);
                    for _ in 0..len {
                        target.push(1 + code % syms);
                        code /= syms;
                    }
                    if t_len < min_frames(&target) {
                        continue; // probability zero
                    }
                    total += (-loss_of(&logits, &target).unwrap()).exp();
                }
            }
            assert!(
                (total - 1.0).abs() < 1e-9,
                "T={t_len} V={v}: partition {total}"
            );
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let t_len = rng.gen_range(3..=6usize);
        let v = rng.gen_range(3..=5usize);
        let target: Vec<usize> = (0..2).map(|_| rng.gen_range(1..v)).collect();
        let data: Vec<f64> = (0..t_len * v).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let err = grad_check(
            |t| ctc_loss(&t[0], &target),
            &[(vec![t_len, v], data)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn greedy_collapse_rules() {
    // argmax frames a a _ b b _ -> "a b"
    let mk = |path: &[usize], v: usize| {
        let mut data = vec![0.0; path.len() * v];
        for (t, &k) in path.iter().enumerate() {
            data[t * v + k] = 5.0;
        }
        LogitMatrix::new(path.len(), v, data).unwrap()
    };
    assert_eq!(greedy_decode(&mk(&[1, 1, 0, 2, 2, 0], 3)), vec![1, 2]);
    assert_eq!(greedy_decode(&mk(&[0, 0, 0], 3)), Vec::<usize>::new());
    assert_eq!(greedy_decode(&mk(&[1, 0, 1], 3)), vec![1, 1]);
}

#[test]
fn greedy_ties_break_toward_lower_index() {
    let logits = uniform_logits(3, 4);
    // all scores equal: argmax is blank everywhere -> empty output
    assert_eq!(greedy_decode(&logits), Vec::<usize>::new());
}

#[test]
fn brute_force_size_cap() {
    let logits = uniform_logits(20, 5);
    assert!(ctc_brute_force(&logits, &[1]).is_err());
}
