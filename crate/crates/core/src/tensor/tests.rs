use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_check, primitive_suite, FdOptions};
use super::kernels as k;
use super::*;
use crate::error::TensorError;
use crate::shift::ShiftSpec;

fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent GELU oracle through `erf` rather than `erfc`.
fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

#[test]
fn conv1x1_hand_example() {
    let x = t([1, 2, 1, 1], &[1., 2.]);
    let w = t([2, 2, 1, 1], &[1., 1., 0., 1.]);
    let b = t([1, 2, 1, 1], &[0., 0.]);
    assert_eq!(k::conv1x1(&x, &w, Some(&b), 1).unwrap().data(), &[3., 2.]);
}

#[test]
fn conv1x1_identity_weights() {
    let x = Tensor::<f64>::uniform([2, 5, 3, 7], -1.0, 1.0, &mut rng(1));
    let mut w = Tensor::zeros([5, 5, 1, 1]);
    for i in 0..5 {
        w.set(i, i, 0, 0, 1.0);
    }
    assert_eq!(k::conv1x1(&x, &w, None, 1).unwrap(), x);
}

#[test]
fn conv1x1_rejects_wrong_width() {
    let x = Tensor::<f64>::zeros([1, 3, 2, 2]);
    let w = Tensor::<f64>::zeros([2, 2, 1, 1]);
    assert!(matches!(k::conv1x1(&x, &w, None, 1), Err(TensorError::Shape { .. })));
}

#[test]
fn conv1x1_matches_naive_loop() {
    let mut r = rng(2);
    let x = Tensor::<f64>::uniform([2, 6, 5, 3], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::uniform([9, 6, 1, 1], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::uniform([1, 9, 1, 1], -1.0, 1.0, &mut r);
    let y = k::conv1x1(&x, &w, Some(&b), 1).unwrap();
    for n in 0..2 {
        for o in 0..9 {
            for i in 0..5 {
                for j in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..6 {
                        acc += w.data()[o * 6 + c] * x.at(n, c, i, j);
                    }
                    assert!((y.at(n, o, i, j) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn depthwise_hand_example() {
    let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
    let w = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
    let y = k::depthwise_conv3x3(&x, &w, None).unwrap();
    assert_eq!(y.at(0, 0, 1, 1), 9.0);
    assert_eq!(y.at(0, 0, 0, 0), 4.0);
    assert_eq!(y.at(0, 0, 2, 2), 4.0);
    assert_eq!(y.at(0, 0, 0, 1), 6.0);
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let x = Tensor::<f64>::uniform([1, 3, 4, 5], -1.0, 1.0, &mut rng(3));
    let mut w = Tensor::zeros([3, 1, 3, 3]);
    for c in 0..3 {
        w.set(c, 0, 1, 1, 1.0);
    }
    assert_eq!(k::depthwise_conv3x3(&x, &w, None).unwrap(), x);
}

#[test]
fn resample_examples() {
    let x = t([1, 1, 2, 2], &[1., 3., 5., 7.]);
    assert_eq!(k::downsample(&x, 2).unwrap().data(), &[4.]);
    let y = k::upsample(&t([1, 1, 1, 1], &[4.]), 2);
    assert_eq!(y.data(), &[4., 4., 4., 4.]);
    let c = Tensor::<f64>::full([1, 2, 8, 8], 0.375);
    assert_eq!(k::upsample(&k::downsample(&c, 4).unwrap(), 4), c);
    assert!(k::downsample(&Tensor::<f64>::zeros([1, 1, 3, 4]), 2).is_err());
}

#[test]
fn pixel_rearrange_examples() {
    let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
    let y = k::space_to_channel(&x, 2).unwrap();
    assert_eq!(y.shape(), [1, 4, 1, 1]);
    assert_eq!(y.data(), &[1., 2., 3., 4.]);
    let z = Tensor::<f64>::uniform([2, 3, 4, 6], -1.0, 1.0, &mut rng(4));
    assert_eq!(k::space_to_channel(&z, 1).unwrap(), z);
    assert!(k::space_to_channel(&z, 3).is_err() || z.width().is_multiple_of(3) && z.height().is_multiple_of(3));
    assert!(k::channel_to_space(&z, 2).is_err());
}

#[test]
fn gelu_values() {
    let x = t([1, 1, 1, 3], &[0., 1., 10.]);
    let y = k::gelu(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 0.841345).abs() < 1e-5);
    assert!((y.data()[1] - gelu_oracle(1.0)).abs() < 1e-12);
    assert!((y.data()[2] - 10.0).abs() < 1e-6);
}

#[test]
fn elementwise_and_channel_examples() {
    let a = t([1, 1, 1, 2], &[2., 3.]);
    let b = t([1, 1, 1, 2], &[4., 5.]);
    assert_eq!(k::ew(&a, &b, k::EwKind::Mul).unwrap().data(), &[8., 15.]);
    assert_eq!(k::ew(&a, &Tensor::zeros(a.shape()), k::EwKind::Add).unwrap(), a);
    assert!(k::ew(&a, &Tensor::zeros([1, 1, 2, 1]), k::EwKind::Add).is_err());
    let tape = Tape::<f64>::no_grad();
    let x = Var::constant(Tensor::uniform([2, 8, 3, 3], -1.0, 1.0, &mut rng(5)));
    let parts = tape.split(&x, 4).unwrap();
    let refs: Vec<_> = parts.iter().collect();
    assert_eq!(tape.concat(&refs).unwrap().value(), x.value());
    assert!(tape.split(&x, 3).is_err());
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x = t([1, 1, 2, 2], &[1., -2., 3., 0.5]);
    let v = tape.leaf(x.clone());
    let loss = tape.sum_all(&tape.square(&v).unwrap()).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&v).unwrap().data(), &[2., -4., 6., 1.]);
}

#[test]
fn unreached_parameters_keep_zero_grad() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full([1, 1, 1, 2], 2.0));
    let b = store.add("b", Tensor::full([1, 1, 1, 2], 3.0));
    let tape = Tape::new();
    let va = tape.param(&store, a);
    let _vb = tape.param(&store, b);
    let loss = tape.sum_all(&tape.mul_scalar(&va, 4.0).unwrap()).unwrap();
    let g = tape.backward(&loss).unwrap();
    g.accumulate_into(&mut store).unwrap();
    assert_eq!(store.get(a).grad.data(), &[4., 4.]);
    assert_eq!(store.get(b).grad.data(), &[0., 0.]);
    store.zero_grads();
    assert_eq!(store.get(a).grad.data(), &[0., 0.]);
}

#[test]
fn parameter_bound_twice_sums_gradients() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::full([1, 1, 1, 2], 2.0));
    let tape = Tape::new();
    let v1 = tape.param(&store, a);
    let v2 = tape.param(&store, a);
    let y = tape.add(&tape.mul_scalar(&v1, 3.0).unwrap(), &tape.mul(&v2, &v2).unwrap()).unwrap();
    let g = tape.backward(&tape.sum_all(&y).unwrap()).unwrap();
    assert_eq!(g.param(a).unwrap().data(), &[7., 7.]);
}

#[test]
fn backward_errors() {
    let tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::full([1, 1, 1, 2], 1.0));
    assert!(matches!(tape.backward(&v), Err(TensorError::NotScalar(_))));
    let c = Var::constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&c), Err(TensorError::NotRecorded)));
    let loss = tape.sum_all(&v).unwrap();
    tape.backward(&loss).unwrap();
    assert!(matches!(tape.backward(&loss), Err(TensorError::Consumed)));
    let other = Tape::<f64>::new();
    assert!(matches!(other.backward(&loss), Err(TensorError::NotRecorded)));
}

#[test]
fn no_grad_tape_records_nothing() {
    let tape = Tape::<f64>::no_grad();
    let v = tape.leaf(Tensor::full([1, 1, 1, 2], 1.0));
    let y = tape.gelu(&v).unwrap();
    assert!(!y.is_tracked());
    assert!(tape.is_empty());
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::<f64>::no_grad();
    let v = Var::constant(t([1, 1, 1, 2], &[1., 0.]));
    assert!(matches!(tape.ln(&v), Err(TensorError::NonFinite { op: "ln" })));
    let z = Var::constant(Tensor::zeros([1, 1, 1, 2]));
    assert!(tape.div(&v, &z).is_err());
}

#[test]
fn conv_macs_are_counted() {
    let tape = Tape::<f32>::no_grad();
    let x = Var::constant(Tensor::zeros([2, 6, 4, 5]));
    let w = Var::constant(Tensor::zeros([8, 3, 1, 1]));
    tape.conv1x1(&x, &w, None, 2).unwrap();
    assert_eq!(tape.stats().conv_macs, 2 * 20 * 8 * 3);
    tape.reset_stats();
    tape.dwconv3x3(&x, &Var::constant(Tensor::zeros([6, 1, 3, 3])), None).unwrap();
    assert_eq!(tape.stats().conv_macs, 9 * 2 * 6 * 20);
}

#[test]
fn every_primitive_passes_gradcheck() {
    for (name, err) in primitive_suite(11).unwrap() {
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn gradcheck_reference_functions() {
    let x = Tensor::<f64>::uniform([1, 4, 5, 5], -2.0, 2.0, &mut rng(6));
    let o = FdOptions::default();
    assert!(finite_diff_check(|t, v| t.gelu(&v[0]), std::slice::from_ref(&x), o).unwrap() < 1e-6);
    assert!(finite_diff_check(|_, v| Ok(v[0].clone()), std::slice::from_ref(&x), o).unwrap() < 1e-9);
    let spec = ShiftSpec::default();
    assert!(finite_diff_check(|t, v| t.spatial_shift(&v[0], &spec), &[x], o).unwrap() < 1e-6);
}

#[test]
fn repeated_forward_is_bit_identical() {
    let mut r = rng(7);
    let x = Tensor::<f32>::uniform([1, 16, 8, 8], -1.0, 1.0, &mut r);
    let w = Tensor::<f32>::uniform([16, 16, 1, 1], -1.0, 1.0, &mut r);
    let dw = Tensor::<f32>::uniform([16, 1, 3, 3], -1.0, 1.0, &mut r);
    let run = || {
        let tape = Tape::no_grad();
        let h = tape.conv1x1(&Var::constant(x.clone()), &Var::constant(w.clone()), None, 1).unwrap();
        let h = tape.gelu(&h).unwrap();
        tape.dwconv3x3(&h, &Var::constant(dw.clone()), None).unwrap().into_tensor()
    };
    assert_eq!(run(), run());
}

#[test]
fn interval_masses() {
    let p = k::gaussian_interval_scalar(0.0, 0.0, 1.0);
    assert!((p - 0.382925).abs() < 1e-6);
    for (mu, sigma) in [(0.3, 0.7), (-4.2, 3.0), (10.49, 0.2)] {
        let total: f64 = (-200..=200).map(|s| k::gaussian_interval_scalar(s as f64, mu, sigma)).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    let mut last = 1.0;
    for s in [0.2, 0.5, 1.0, 4.0, 20.0] {
        let p = k::gaussian_interval_scalar(0.0, 0.0, s);
        assert!(p < last);
        last = p;
    }
    let l = k::logistic_interval_scalar(-0.5, 0.5);
    assert!((l - (1.0 / (1.0 + (-0.5f64).exp()) - 1.0 / (1.0 + 0.5f64.exp()))).abs() < 1e-15);
}

proptest! {
    #[test]
    fn shape_algebra(b in 1usize..3, c in 1usize..5, hh in 1usize..4, ww in 1usize..4, r in 1usize..3) {
        let (h, w) = (hh * r * 2, ww * r * 2);
        let x = Tensor::<f64>::zeros([b, c, h, w]);
        prop_assert_eq!(k::space_to_channel(&x, r).unwrap().shape(), [b, c * r * r, h / r, w / r]);
        prop_assert_eq!(k::downsample(&x, 2).unwrap().shape(), [b, c, h / 2, w / 2]);
        prop_assert_eq!(k::upsample(&x, r).shape(), [b, c, h * r, w * r]);
        prop_assert_eq!(k::gelu(&x).shape(), x.shape());
        let wt = Tensor::<f64>::zeros([c + 1, c, 1, 1]);
        prop_assert_eq!(k::conv1x1(&x, &wt, None, 1).unwrap().shape(), [b, c + 1, h, w]);
        prop_assert_eq!(k::depthwise_conv3x3(&x, &Tensor::zeros([c, 1, 3, 3]), None).unwrap().shape(), x.shape());
        prop_assert_eq!(k::mean_spatial(&x).shape(), [b, c, 1, 1]);
    }

    #[test]
    fn pixel_rearrange_round_trip(seed in 0u64..500, r in 1usize..4, c in 1usize..4) {
        let x = Tensor::<f32>::uniform([2, c, 2 * r, 3 * r], -5.0, 5.0, &mut rng(seed));
        let y = k::space_to_channel(&x, r).unwrap();
        prop_assert_eq!(k::channel_to_space(&y, r).unwrap(), x);
    }

    #[test]
    fn concat_split_round_trip(seed in 0u64..500, n in 1usize..5, per in 1usize..4) {
        let x = Var::constant(Tensor::<f32>::uniform([2, n * per, 3, 2], -1.0, 1.0, &mut rng(seed)));
        let tape = Tape::no_grad();
        let parts = tape.split(&x, n).unwrap();
        let refs: Vec<_> = parts.iter().collect();
        let joined = tape.concat(&refs).unwrap();
        prop_assert_eq!(joined.value(), x.value());
    }
}
