use objslot::object_time::{DeltaMode, InteractionConfig, ObjectTime};
use objslot::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn build(seed: u64) -> (ParamStore, ObjectTime) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = InteractionConfig {
        dim: D,
        heads: 2,
        n_classes: 3,
        ..InteractionConfig::default()
    };
    let ot = ObjectTime::new(&mut store, "ot", cfg, &mut rng).unwrap();
    // perturb every tensor so zero-initialised pieces are exercised
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let noise = Tensor::uniform(t.shape(), -0.3, 0.3, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    (store, ot)
}

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn interact(store: &ParamStore, ot: &ObjectTime, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = ot.object_interact(&mut g, &p, xv).unwrap();
    g.value(y).clone()
}

fn states(store: &ParamStore, ot: &ObjectTime, x: &Tensor, mode: DeltaMode) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = ot.state_changes(&mut g, &p, xv, mode).unwrap();
    g.value(y).clone()
}

fn row(t: &Tensor, idx: &[usize]) -> Vec<f64> {
    let d = *t.shape().last().unwrap();
    let mut full = idx.to_vec();
    full.push(0);
    let strides = t.strides();
    let off: usize = full.iter().zip(&strides).map(|(i, s)| i * s).sum();
    t.data()[off..off + d].to_vec()
}

#[test]
fn permuting_tokens_within_a_frame_permutes_outputs() {
    let (store, ot) = build(1);
    let (t, n) = (3, 5);
    let x = rnd(&[t, n, D], 2);
    let base = interact(&store, &ot, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut data = Vec::new();
        for f in 0..t {
            for &src in &perm {
                data.extend(row(&x, &[f, src]));
            }
        }
        let y = interact(&store, &ot, &Tensor::new(vec![t, n, D], data).unwrap());
        for f in 0..t {
            for (k, &src) in perm.iter().enumerate() {
                for (a, b) in row(&y, &[f, k]).iter().zip(row(&base, &[f, src])) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn frames_never_mix() {
    let (store, ot) = build(4);
    let x = rnd(&[4, 3, D], 5);
    let full = interact(&store, &ot, &x);
    for keep in 0..4 {
        let mut masked = Tensor::zeros(x.shape());
        for k in 0..3 {
            for d in 0..D {
                masked.set(&[keep, k, d], x.get(&[keep, k, d]));
            }
        }
        let y = interact(&store, &ot, &masked);
        for k in 0..3 {
            assert_eq!(row(&y, &[keep, k]), row(&full, &[keep, k]));
        }
    }
}

#[test]
fn identical_frames_give_identical_outputs() {
    let (store, ot) = build(6);
    let frame = rnd(&[1, 4, D], 7);
    let x = Tensor::stack(&[frame.index0(0), frame.index0(0), frame.index0(0)]).unwrap();
    let y = interact(&store, &ot, &x);
    assert_eq!(y.index0(0), y.index0(1));
    assert_eq!(y.index0(1), y.index0(2));
}

#[test]
fn single_token_frames_keep_their_shape() {
    let (store, ot) = build(8);
    let a = rnd(&[3, 1, D], 9);
    let y = interact(&store, &ot, &a);
    assert_eq!(y.shape(), a.shape());
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!(y.max_abs_diff(&a) > 1e-6);
}

#[test]
fn static_clip_has_time_constant_state_changes() {
    let (store, ot) = build(10);
    let frame = rnd(&[1, 3, D], 11).index0(0);
    let x = Tensor::stack(&vec![frame; 8]).unwrap();
    let s = states(&store, &ot, &x, DeltaMode::Fixed(2));
    assert_eq!(s.shape(), &[6, 3, D]);
    for t in 1..6 {
        assert_eq!(s.index0(t), s.index0(0));
    }
}

#[test]
fn perturbing_one_frame_touches_only_its_two_rows() {
    let (store, ot) = build(12);
    let (t, n, delta) = (8, 2, 3);
    let x = rnd(&[t, n, D], 13);
    let base = states(&store, &ot, &x, DeltaMode::Fixed(delta));
    for star in 0..t {
        let mut y = x.clone();
        let v = y.get(&[star, 1, 4]);
        y.set(&[star, 1, 4], v + 0.5);
        let s = states(&store, &ot, &y, DeltaMode::Fixed(delta));
        for row_t in 0..t - delta {
            let touched = row_t == star || row_t + delta == star;
            for k in 0..n {
                let same = row(&s, &[row_t, k]) == row(&base, &[row_t, k]);
                assert_eq!(same, !(touched && k == 1), "row {row_t}, slot {k}, frame {star}");
            }
        }
    }
}

#[test]
fn swapping_initial_and_final_states_changes_the_output() {
    let (store, ot) = build(14);
    let x = rnd(&[2, 3, D], 15);
    let reversed = Tensor::stack(&[x.index0(1), x.index0(0)]).unwrap();
    let a = states(&store, &ot, &x, DeltaMode::Fixed(1));
    let b = states(&store, &ot, &reversed, DeltaMode::Fixed(1));
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn all_mode_stacks_every_interval() {
    let (store, ot) = build(16);
    let x = rnd(&[5, 2, D], 17);
    let all = states(&store, &ot, &x, DeltaMode::All);
    assert_eq!(all.shape(), &[10, 2, D]);
    let mut offset = 0;
    for d in 1..5 {
        let fixed = states(&store, &ot, &x, DeltaMode::Fixed(d));
        for r in 0..5 - d {
            assert_eq!(all.index0(offset + r), fixed.index0(r));
        }
        offset += 5 - d;
    }
}

#[test]
fn pooling_order_does_not_matter() {
    let s = rnd(&[6, 4, D], 18);
    let mut g = Graph::new();
    let sv = g.constant(s.clone());
    let v = objslot::object_time::pool_video(&mut g, sv).unwrap();
    let pooled = g.value(v).clone();
    for d in 0..D {
        let mut objects_first = 0.0;
        for t in 0..6 {
            let m: f64 = (0..4).map(|n| s.get(&[t, n, d])).sum::<f64>() / 4.0;
            objects_first += m;
        }
        objects_first /= 6.0;
        assert!((pooled.data()[d] - objects_first).abs() < 1e-12);
    }
}
