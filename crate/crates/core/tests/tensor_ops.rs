mod common;

use cas_core::{Error, ParamStore, Shape, Tape, Tensor};
use proptest::prelude::*;

use common::{naive_broadcast, naive_channel_stats, naive_concat, naive_conv2d, naive_gap, naive_linear, random_tensor, rng};

fn t(shape: Shape, data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn tape_value(f: impl FnOnce(&mut Tape) -> cas_core::Var) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn gap_examples() {
    let out = tape_value(|tp| {
        let x = tp.input(t(Shape::new(1, 2, 2, 1), &[1.0, 2.0, 3.0, 4.0]));
        tp.gap(x).unwrap()
    });
    assert_eq!(out.data(), &[2.5]);

    let out = tape_value(|tp| {
        let x = tp.input(Tensor::full(Shape::new(2, 3, 2, 4), -1.75));
        tp.gap(x).unwrap()
    });
    assert!(out.data().iter().all(|&v| v == -1.75));

    let x = random_tensor(&mut rng(1), Shape::new(2, 3, 3, 4), -1.0, 1.0);
    let out = tape_value(|tp| {
        let v = tp.input(x.clone());
        tp.gap(v).unwrap()
    });
    assert!(out.max_abs_diff(&naive_gap(&x)) < 1e-15);
}

#[test]
fn gap_of_zero_area_fails() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 0, 3, 2)));
    assert!(matches!(tape.gap(x), Err(Error::InvalidShape(_))));
}

#[test]
fn linear_examples() {
    let x = random_tensor(&mut rng(2), Shape::new(2, 1, 1, 3), -1.0, 1.0);
    let eye = Tensor::from_fn(Shape::matrix(3, 3), |[_, _, i, j]| (i == j) as u8 as f64);
    let out = tape_value(|tp| {
        let (xv, w, b) = (tp.input(x.clone()), tp.input(eye), tp.input(Tensor::zeros(Shape::vector(3))));
        tp.linear(xv, w, b).unwrap()
    });
    assert_eq!(out, x);

    let out = tape_value(|tp| {
        let (xv, w, b) = (
            tp.input(x.clone()),
            tp.input(Tensor::zeros(Shape::matrix(2, 3))),
            tp.input(Tensor::zeros(Shape::vector(2))),
        );
        tp.linear(xv, w, b).unwrap()
    });
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut r = rng(3);
    let w = random_tensor(&mut r, Shape::matrix(2, 3), -1.0, 1.0);
    let b = random_tensor(&mut r, Shape::vector(2), -1.0, 1.0);
    let out = tape_value(|tp| {
        let (xv, wv, bv) = (tp.input(x.clone()), tp.input(w.clone()), tp.input(b.clone()));
        tp.linear(xv, wv, bv).unwrap()
    });
    assert!(out.max_abs_diff(&naive_linear(&x, &w, &b)) < 1e-15);
}

#[test]
fn linear_channel_mismatch_fails() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 1, 1, 3)));
    let w = tape.input(Tensor::zeros(Shape::matrix(2, 4)));
    let b = tape.input(Tensor::zeros(Shape::vector(2)));
    assert!(matches!(tape.linear(x, w, b), Err(Error::InvalidShape(_))));
}

#[test]
fn activation_examples() {
    let out = tape_value(|tp| {
        let x = tp.input(t(Shape::vector(2), &[-1.0, 2.0]));
        tp.relu(x).unwrap()
    });
    assert_eq!(out.data(), &[0.0, 2.0]);

    let out = tape_value(|tp| {
        let x = tp.input(t(Shape::vector(3), &[0.0, 20.0, -20.0]));
        tp.sigmoid(x).unwrap()
    });
    assert_eq!(out.data()[0], 0.5);
    // 1 / (1 + e^20) = 2.0611536181902e-9
    assert!((1.0 - out.data()[1]).abs() < 1e-8);
    assert!(out.data()[2].abs() < 1e-8);
    assert!((out.data()[2] - 2.061_153_618_190_2e-9).abs() < 1e-20);
}

#[test]
fn conv_examples() {
    let x = random_tensor(&mut rng(4), Shape::new(1, 5, 5, 1), -1.0, 1.0);
    let out = tape_value(|tp| {
        let (xv, k, b) = (
            tp.input(x.clone()),
            tp.input(Tensor::full(Shape::new(1, 1, 1, 1), 1.0)),
            tp.input(Tensor::zeros(Shape::vector(1))),
        );
        tp.conv2d(xv, k, b, 1, 0).unwrap()
    });
    assert_eq!(out, x);

    let out = tape_value(|tp| {
        let (xv, k, b) = (
            tp.input(x.clone()),
            tp.input(Tensor::zeros(Shape::new(3, 3, 1, 2))),
            tp.input(Tensor::zeros(Shape::vector(2))),
        );
        tp.conv2d(xv, k, b, 1, 1).unwrap()
    });
    assert_eq!(out.shape(), Shape::new(1, 5, 5, 2));
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut r = rng(5);
    let x = random_tensor(&mut r, Shape::new(1, 5, 5, 2), -1.0, 1.0);
    let k = random_tensor(&mut r, Shape::new(3, 3, 2, 3), -1.0, 1.0);
    let b = random_tensor(&mut r, Shape::vector(3), -1.0, 1.0);
    let out = tape_value(|tp| {
        let (xv, kv, bv) = (tp.input(x.clone()), tp.input(k.clone()), tp.input(b.clone()));
        tp.conv2d(xv, kv, bv, 1, 1).unwrap()
    });
    assert!(out.max_abs_diff(&naive_conv2d(&x, &k, &b, 1, 1)) < 1e-14);
}

#[test]
fn conv_kernel_larger_than_padded_input_fails() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 2, 2, 1)));
    let k = tape.input(Tensor::zeros(Shape::new(7, 7, 1, 1)));
    let b = tape.input(Tensor::zeros(Shape::vector(1)));
    assert!(matches!(tape.conv2d(x, k, b, 1, 1), Err(Error::InvalidShape(_))));
}

#[test]
fn concat_examples() {
    let out = tape_value(|tp| {
        let a = tp.input(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let b = tp.input(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        tp.concat_channels(a, b).unwrap()
    });
    assert_eq!(out.data(), &[1.0, 2.0]);

    let x = random_tensor(&mut rng(6), Shape::new(2, 3, 2, 3), -1.0, 1.0);
    let out = tape_value(|tp| {
        let a = tp.input(x.clone());
        let z = tp.input(Tensor::zeros(Shape::new(2, 3, 2, 4)));
        let c = tp.concat_channels(a, z).unwrap();
        tp.slice_channels(c, 0, 3).unwrap()
    });
    assert_eq!(out, x);
}

#[test]
fn concat_gradient_is_ones() {
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut rng(7), Shape::new(1, 2, 2, 3), -1.0, 1.0));
    let b = store.add("b", Tensor::zeros(Shape::new(1, 2, 2, 2)));
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
    let c = tape.concat_channels(av, bv).unwrap();
    let s = tape.sum(c).unwrap();
    tape.backward(s, &mut store).unwrap();
    assert!(store.grad(a).data().iter().all(|&g| g == 1.0));
    assert!(store.grad(b).data().iter().all(|&g| g == 1.0));
}

#[test]
fn concat_mismatch_fails() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(Shape::new(1, 2, 2, 1)));
    let b = tape.input(Tensor::zeros(Shape::new(1, 2, 3, 1)));
    assert!(matches!(tape.concat_channels(a, b), Err(Error::InvalidShape(_))));
}

#[test]
fn channel_stats_examples() {
    let (avg, max) = {
        let mut tape = Tape::new();
        let x = tape.input(t(Shape::new(1, 1, 1, 2), &[1.0, 3.0]));
        let (a, m) = tape.channel_stats(x).unwrap();
        (tape.value(a).clone(), tape.value(m).clone())
    };
    assert_eq!((avg.data()[0], max.data()[0]), (2.0, 3.0));

    let x = random_tensor(&mut rng(8), Shape::new(1, 2, 2, 1), -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let (a, m) = tape.channel_stats(xv).unwrap();
    assert_eq!(tape.value(a), &x);
    assert_eq!(tape.value(m), &x);

    let x = random_tensor(&mut rng(9), Shape::new(1, 2, 2, 5), -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let (a, m) = tape.channel_stats(xv).unwrap();
    let (na, nm) = naive_channel_stats(&x);
    assert!(tape.value(a).max_abs_diff(&na) < 1e-15);
    assert_eq!(tape.value(m), &nm);
}

#[test]
fn channel_max_gradient_goes_to_first_maximum() {
    let mut store = ParamStore::new();
    let id = store.add("x", t(Shape::new(1, 1, 1, 4), &[0.5, 2.0, 2.0, -1.0]));
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let m = tape.channel_max(x).unwrap();
    let s = tape.sum(m).unwrap();
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(id).data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn broadcast_examples() {
    let x = random_tensor(&mut rng(10), Shape::new(1, 2, 2, 3), -1.0, 1.0);
    let out = tape_value(|tp| {
        let xv = tp.input(x.clone());
        let y = tp.input(t(Shape::vector(3), &[1.0, 0.0, 2.0]));
        tp.mul(xv, y).unwrap()
    });
    for i in 0..4 {
        let row = &out.data()[i * 3..i * 3 + 3];
        let src = &x.data()[i * 3..i * 3 + 3];
        assert_eq!(row, &[src[0], 0.0, 2.0 * src[2]]);
    }

    let out = tape_value(|tp| {
        let xv = tp.input(x.clone());
        let y = tp.input(Tensor::full(x.shape(), 1.0));
        tp.mul(xv, y).unwrap()
    });
    assert_eq!(out, x);

    let map = random_tensor(&mut rng(11), Shape::new(1, 2, 2, 1), 0.0, 1.0);
    let out = tape_value(|tp| {
        let xv = tp.input(x.clone());
        let y = tp.input(map.clone());
        tp.mul(xv, y).unwrap()
    });
    assert_eq!(out, naive_broadcast(&x, &map, |a, b| a * b));
}

#[test]
fn broadcast_mismatch_fails() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 2, 2, 3)));
    let y = tape.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
    assert!(matches!(tape.mul(x, y), Err(Error::InvalidShape(_))));
    assert!(matches!(tape.add(x, y), Err(Error::InvalidShape(_))));
}

#[test]
fn broadcast_gradient_sums_over_copies() {
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng(12), Shape::new(2, 3, 3, 2), -1.0, 1.0));
    let g = store.add("g", t(Shape::vector(2), &[0.5, -1.0]));
    let mut tape = Tape::new();
    let (xv, gv) = (tape.param(&store, x), tape.param(&store, g));
    let y = tape.mul(xv, gv).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s, &mut store).unwrap();
    let xs = store.value(x).clone();
    for c in 0..2 {
        let want: f64 = (0..xs.len() / 2).map(|i| xs.data()[i * 2 + c]).sum();
        assert!((store.grad(g).data()[c] - want).abs() < 1e-13);
    }
}

#[test]
fn bce_examples() {
    let val = |z: f64, target: f64| {
        tape_value(|tp| {
            let zv = tp.input(Tensor::full(Shape::new(1, 1, 1, 1), z));
            tp.bce_loss(zv, &Tensor::full(Shape::new(1, 1, 1, 1), target)).unwrap()
        })
        .data()[0]
    };
    assert!((val(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(val(50.0, 1.0) < 1e-20);
    assert!(val(-800.0, 0.0) == 0.0);
    assert!((val(-800.0, 1.0) - 800.0).abs() < 1e-9);

    let mut r = rng(13);
    let z = random_tensor(&mut r, Shape::new(2, 1, 1, 3), -5.0, 5.0);
    let targets = t(Shape::new(2, 1, 1, 3), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let got = tape_value(|tp| {
        let zv = tp.input(z.clone());
        tp.bce_loss(zv, &targets).unwrap()
    })
    .data()[0];
    let direct: f64 = z
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &t)| {
            let s = 1.0 / (1.0 + (-z).exp());
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 6.0;
    assert!((got - direct).abs() < 1e-12);
}

#[test]
fn bce_rejects_non_binary_targets() {
    let mut tape = Tape::new();
    let z = tape.input(Tensor::zeros(Shape::new(1, 1, 1, 2)));
    assert!(tape.bce_loss(z, &t(Shape::new(1, 1, 1, 2), &[0.0, 0.5])).is_err());
}

#[test]
fn backward_accumulates_into_existing_gradients() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::full(Shape::vector(3), 2.0));
    for round in 1..=3 {
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.scale(x, 1.5).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert!(store.grad(id).data().iter().all(|&g| g == 1.5 * round as f64));
    }
}

#[test]
fn backward_visits_nodes_in_reverse_order() {
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(Shape::vector(2), 1.0));
    let y = tape.sigmoid(x).unwrap();
    let z = tape.scale(y, 2.0).unwrap();
    let s = tape.sum(z).unwrap();
    let grads = tape.backward(s, &mut store.clone()).unwrap();
    let order: Vec<usize> = grads.visited().iter().map(|v| v.index()).collect();
    assert!(order.windows(2).all(|w| w[0] > w[1]), "{order:?}");
    assert_eq!(order.first(), Some(&s.index()));
    assert!(grads.get(x).is_some());
}

fn shape_strategy() -> impl Strategy<Value = Shape> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..5).prop_map(|(n, h, w, c)| Shape::new(n, h, w, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn op_shapes_follow_rules(s in shape_strategy(), cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let x = tape.input(random_tensor(&mut r, s, -1.0, 1.0));
        let [n, h, w, c] = s.0;
        let g = tape.gap(x).unwrap();
        prop_assert_eq!(tape.shape(g), Shape::new(n, 1, 1, c));
        let (a, m) = tape.channel_stats(x).unwrap();
        prop_assert_eq!(tape.shape(a), Shape::new(n, h, w, 1));
        prop_assert_eq!(tape.shape(m), Shape::new(n, h, w, 1));
        let cc = tape.concat_channels(x, a).unwrap();
        prop_assert_eq!(tape.shape(cc), Shape::new(n, h, w, c + 1));
        let pad = k / 2;
        let kv = tape.input(Tensor::zeros(Shape::new(k, k, c, cout)));
        let bv = tape.input(Tensor::zeros(Shape::vector(cout)));
        let y = tape.conv2d(x, kv, bv, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), Shape::new(n, h.div_ceil(stride), w.div_ceil(stride), cout));
        let wv = tape.input(Tensor::zeros(Shape::matrix(cout, c)));
        let l = tape.linear(g, wv, bv).unwrap();
        prop_assert_eq!(tape.shape(l), Shape::new(n, 1, 1, cout));
        let mb = tape.mul(x, m).unwrap();
        prop_assert_eq!(tape.shape(mb), s);
        let gb = tape.add(g, x).unwrap();
        prop_assert_eq!(tape.shape(gb), s);
    }

    #[test]
    fn conv_matches_naive_loops(s in shape_strategy(), cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 7]), stride in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, s, -1.0, 1.0);
        let kt = random_tensor(&mut r, Shape::new(k, k, s.c(), cout), -1.0, 1.0);
        let b = random_tensor(&mut r, Shape::vector(cout), -1.0, 1.0);
        let out = tape_value(|tp| {
            let (xv, kv, bv) = (tp.input(x.clone()), tp.input(kt.clone()), tp.input(b.clone()));
            tp.conv2d(xv, kv, bv, stride, k / 2).unwrap()
        });
        prop_assert!(out.max_abs_diff(&naive_conv2d(&x, &kt, &b, stride, k / 2)) < 1e-12);
    }

    #[test]
    fn add_and_concat_are_linear(s in shape_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a1, a2, b1, b2) = (
            random_tensor(&mut r, s, -1.0, 1.0),
            random_tensor(&mut r, s, -1.0, 1.0),
            random_tensor(&mut r, s, -1.0, 1.0),
            random_tensor(&mut r, s, -1.0, 1.0),
        );
        let sum = |x: &Tensor, y: &Tensor| naive_broadcast(x, y, |p, q| p + q);
        let concat = |x: &Tensor, y: &Tensor| tape_value(|tp| {
            let (xv, yv) = (tp.input(x.clone()), tp.input(y.clone()));
            tp.concat_channels(xv, yv).unwrap()
        });
        let add = |x: &Tensor, y: &Tensor| tape_value(|tp| {
            let (xv, yv) = (tp.input(x.clone()), tp.input(y.clone()));
            tp.add(xv, yv).unwrap()
        });
        let lhs = concat(&sum(&a1, &a2), &sum(&b1, &b2));
        let rhs = sum(&concat(&a1, &b1), &concat(&a2, &b2));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert_eq!(concat(&a1, &b1), naive_concat(&a1, &b1));
        let lhs = add(&sum(&a1, &a2), &b1);
        let rhs = sum(&add(&a1, &b1), &a2);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn activation_ranges(s in shape_strategy(), seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = random_tensor(&mut rng(seed), s, -scale, scale);
        let sig = tape_value(|tp| { let v = tp.input(x.clone()); tp.sigmoid(v).unwrap() });
        let relu = tape_value(|tp| { let v = tp.input(x.clone()); tp.relu(v).unwrap() });
        // Above |x| ~ 36.7 sigmoid rounds to exactly 1 in f64.
        prop_assert!(sig.data().iter().zip(x.data()).all(|(&v, &xi)| v > 0.0 && (v < 1.0 || xi > 36.0)));
        prop_assert!(relu.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gap_of_constant_is_constant(s in shape_strategy(), k in -10.0f64..10.0) {
        let out = tape_value(|tp| { let v = tp.input(Tensor::full(s, k)); tp.gap(v).unwrap() });
        prop_assert!(out.data().iter().all(|&v| (v - k).abs() < 1e-13));
    }

    #[test]
    fn ops_are_deterministic(s in shape_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, s, -1.0, 1.0);
        let k = random_tensor(&mut r, Shape::new(3, 3, s.c(), 2), -1.0, 1.0);
        let run = || tape_value(|tp| {
            let xv = tp.input(x.clone());
            let kv = tp.input(k.clone());
            let bv = tp.input(Tensor::zeros(Shape::vector(2)));
            let y = tp.conv2d(xv, kv, bv, 1, 1).unwrap();
            let (a, m) = tp.channel_stats(y).unwrap();
            let z = tp.mul(a, m).unwrap();
            tp.sigmoid(z).unwrap()
        });
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn linear_matches_naive(n in 1usize..4, cin in 1usize..6, cout in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, Shape::new(n, 1, 1, cin), -1.0, 1.0);
        let w = random_tensor(&mut r, Shape::matrix(cout, cin), -1.0, 1.0);
        let b = random_tensor(&mut r, Shape::vector(cout), -1.0, 1.0);
        let out = tape_value(|tp| {
            let (xv, wv, bv) = (tp.input(x.clone()), tp.input(w.clone()), tp.input(b.clone()));
            tp.linear(xv, wv, bv).unwrap()
        });
        prop_assert!(out.max_abs_diff(&naive_linear(&x, &w, &b)) < 1e-14);
    }
}
