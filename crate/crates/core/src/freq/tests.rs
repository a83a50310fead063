use super::*;
use crate::tensor::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng, false)
}

fn cfg(n_layers: usize, n_heads: usize, d_model: usize, d_ff: usize) -> FreqAttentionConfig {
    FreqAttentionConfig {
        n_layers,
        n_heads,
        d_model,
        d_ff,
        dropout: 0.1,
        positional_encoding: false,
    }
}

#[test]
fn decompose_shapes() {
    let mut r = rng(1);
    let x = rand_tensor(vec![2, 16, 5, 40], &mut r);
    let items = decompose(&x).unwrap();
    assert_eq!(items.len(), 2);
    for item in &items {
        assert_eq!((item.t, item.f, item.units), (5, 40, 16));
        assert_eq!(item.values.len(), 5 * 40 * 16);
    }
    // degenerate single-item, single-frame case
    let y = rand_tensor(vec![1, 16, 1, 40], &mut r);
    let single = decompose(&y).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!((single[0].t, single[0].f, single[0].units), (1, 40, 16));
}

#[test]
fn compose_decompose_round_trip_bit_exact() {
    let mut r = rng(2);
    for _ in 0..50 {
        let b = r.gen_range(1..4usize);
        let u = r.gen_range(1..6usize);
        let t = r.gen_range(1..5usize);
        let f = r.gen_range(1..8usize);
        let x = rand_tensor(vec![b, u, t, f], &mut r);
        let back = compose(&decompose(&x).unwrap()).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in x.to_vec().iter().zip(back.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn apply_preserves_shape() {
    let mut r = rng(3);
    let ft = FreqTransformer::new(cfg(2, 2, 6, 12), &mut r).unwrap();
    let x = rand_tensor(vec![3, 6, 4, 7], &mut r);
    let (y, maps) = ft.apply(&x, Mode::Eval, &mut r, false).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(maps.is_none());
}

#[test]
fn zero_layer_stack_is_identity_bit_exact() {
    let mut r = rng(4);
    let ft = FreqTransformer::new(cfg(0, 1, 5, 1), &mut r).unwrap();
    let x = rand_tensor(vec![2, 5, 3, 4], &mut r);
    let (y, _) = ft.apply(&x, Mode::Eval, &mut r, false).unwrap();
    for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn identical_frames_produce_identical_outputs() {
    let mut r = rng(5);
    let ft = FreqTransformer::new(cfg(2, 2, 4, 8), &mut r).unwrap();
    // two frames with identical token content
    let frame: Vec<f64> = (0..4 * 6).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut vals = vec![0.0; 4 * 2 * 6];
    for u in 0..4 {
        for t in 0..2 {
            for f in 0..6 {
                vals[(u * 2 + t) * 6 + f] = frame[u * 6 + f];
            }
        }
    }
    let x = Tensor::from_vec(vec![1, 4, 2, 6], vals, false).unwrap();
    let (y, _) = ft.apply(&x, Mode::Eval, &mut r, false).unwrap();
    let yv = y.to_vec();
    for u in 0..4 {
        for f in 0..6 {
            let a = yv[(u * 2) * 6 + f];
            let b = yv[(u * 2 + 1) * 6 + f];
            assert_eq!(a.to_bits(), b.to_bits(), "unit {u} bin {f}");
        }
    }
}

#[test]
fn permuting_frames_permutes_outputs() {
    let mut r = rng(6);
    let ft = FreqTransformer::new(cfg(2, 2, 4, 8), &mut r).unwrap();
    let x = rand_tensor(vec![1, 4, 3, 5], &mut r);
    let (y, _) = ft.apply(&x, Mode::Eval, &mut r.clone(), false).unwrap();
    // swap frames 0 and 2 in the input
    let perm = [2usize, 1, 0];
    let xv = x.to_vec();
    let mut pv = vec![0.0; xv.len()];
    for u in 0..4 {
        for t in 0..3 {
            for f in 0..5 {
                pv[(u * 3 + t) * 5 + f] = xv[(u * 3 + perm[t]) * 5 + f];
            }
        }
    }
    let xp = Tensor::from_vec(vec![1, 4, 3, 5], pv, false).unwrap();
    let (yp, _) = ft.apply(&xp, Mode::Eval, &mut r, false).unwrap();
    let yv = y.to_vec();
    let ypv = yp.to_vec();
    for u in 0..4 {
        for t in 0..3 {
            for f in 0..5 {
                let a = ypv[(u * 3 + t) * 5 + f];
                let b = yv[(u * 3 + perm[t]) * 5 + f];
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn batched_pass_matches_literal_per_frame_loop() {
    let mut r = rng(7);
    let ft = FreqTransformer::new(cfg(2, 2, 4, 8), &mut r).unwrap();
    let x = rand_tensor(vec![2, 4, 3, 5], &mut r);
    let (y, _) = ft.apply(&x, Mode::Eval, &mut r, false).unwrap();
    let yv = y.to_vec();
    // literal loop: each item, each frame, one (1, F, units) sequence
    let items = decompose(&x).unwrap();
    for (bi, item) in items.iter().enumerate() {
        for t in 0..item.t {
            let seq = &item.values[t * item.f * item.units..(t + 1) * item.f * item.units];
            let mut tokens =
                Tensor::from_vec(vec![1, item.f, item.units], seq.to_vec(), false).unwrap();
            for layer in &ft.layers {
                let mut dead_rng = rng(0);
                tokens = layer
                    .forward(&tokens, Mode::Eval, &mut dead_rng, false)
                    .unwrap()
                    .0;
            }
            let tv = tokens.to_vec();
            for f in 0..item.f {
                for u in 0..item.units {
                    let batched = yv[((bi * 4 + u) * 3 + t) * 5 + f];
                    let looped = tv[f * item.units + u];
                    assert_eq!(batched.to_bits(), looped.to_bits());
                }
            }
        }
    }
}

#[test]
fn gradient_flows_through_adapter() {
    let mut r = rng(8);
    let ft = FreqTransformer::new(cfg(1, 2, 4, 8), &mut r).unwrap();
    let xv: Vec<f64> = (0..1 * 4 * 2 * 5).map(|_| r.gen_range(-1.0..1.0)).collect();
    let err = grad_check(
        |t| {
            let mut dead_rng = rng(0);
            let (y, _) = ft.apply(&t[0], Mode::Eval, &mut dead_rng, false)?;
            Ok(y.tanh().sum())
        },
        &[(vec![1, 4, 2, 5], xv)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn attention_maps_are_row_stochastic() {
    let mut r = rng(9);
    let ft = FreqTransformer::new(cfg(3, 2, 4, 8), &mut r).unwrap();
    let x = rand_tensor(vec![1, 4, 4, 6], &mut r);
    let (_, maps) = ft.apply(&x, Mode::Eval, &mut r, true).unwrap();
    let maps = &maps.unwrap()[0];
    let mean = maps.mean_over(0, 3).unwrap();
    assert!(mean.max_row_sum_error() < 1e-6);
    // training mode never collects
    let (_, none) = ft.apply(&x, Mode::Train, &mut r, true).unwrap();
    assert!(none.is_none());
}

#[test]
fn collect_single_frame_equals_that_frames_weights() {
    let mut r = rng(10);
    let ft = FreqTransformer::new(cfg(2, 2, 4, 8), &mut r).unwrap();
    let x = rand_tensor(vec![1, 4, 3, 5], &mut r);
    let (_, maps) = ft.apply(&x, Mode::Eval, &mut r, true).unwrap();
    let maps = &maps.unwrap()[0];
    let solo = maps.mean_over(1, 1).unwrap();
    for l in 0..2 {
        for h in 0..2 {
            assert_eq!(solo.map(l, h), maps.frame_map(l, h, 1));
        }
    }
    assert!(maps.mean_over(2, 1).is_err());
}

#[test]
fn paper_config_map_shape_and_uniform_case() {
    let mut r = rng(11);
    let ft = FreqTransformer::new(FreqAttentionConfig::default(), &mut r).unwrap();
    // identical tokens on every bin: attention must be uniform at 1/40
    let mut vals = vec![0.0; 16 * 2 * 40];
    for u in 0..16 {
        let v = r.gen_range(-1.0..1.0);
        for t in 0..2 {
            for f in 0..40 {
                vals[(u * 2 + t) * 40 + f] = v;
            }
        }
    }
    let x = Tensor::from_vec(vec![1, 16, 2, 40], vals, false).unwrap();
    let (_, maps) = ft.apply(&x, Mode::Eval, &mut r, true).unwrap();
    let maps = &maps.unwrap()[0];
    let mean = maps.mean_over(0, 1).unwrap();
    assert_eq!((mean.n_layers, mean.n_heads, mean.f), (4, 4, 40));
    for l in 0..4 {
        for h in 0..4 {
            for w in mean.map(l, h) {
                assert!((w - 1.0 / 40.0).abs() < 1e-9, "weight {w}");
            }
        }
    }
}
