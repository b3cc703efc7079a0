use proptest::prelude::*;
use voxmim::diffcore::cases::{check_op, registered_ops};
use voxmim::diffcore::{gradcheck, DiffError, GradcheckOptions, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn sigmoid_of_zero_is_one_half() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0)).unwrap();
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.5);
}

#[test]
fn bilinear_on_constant_field_returns_the_constant() {
    let mut tape = Tape::new();
    let field = tape.constant(Tensor::full(&[1, 5, 6], 7.0)).unwrap();
    let coords = tape.constant(t(&[3, 2], &[0.0, 0.0, 2.3, 1.7, 4.9, 3.99])).unwrap();
    let out = tape.bilinear_sample_2d(field, coords).unwrap();
    for v in tape.value(out).data() {
        assert!((v - 7.0).abs() < 1e-12);
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(&tape, x).item(), 6.0);
}

#[test]
fn scaled_sigmoid_slope_at_origin() {
    // d/ds σ(a·s) = a·σ(1−σ) = 2 · 0.25 at s = 0, a = 2
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let a = tape.constant(Tensor::scalar(2.0)).unwrap();
    let z = tape.mul(a, s).unwrap();
    let y = tape.sigmoid(z).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(&tape, s).item(), 0.5);
}

#[test]
fn trilinear_grid_gradient_at_cell_corner_matches_finite_differences() {
    let grid = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.37).sin());
    let coords = t(&[2, 3], &[1.0, 1.0, 0.0, 0.4, 1.6, 0.5]);
    let report = gradcheck(
        |tape, v| {
            let c = tape.constant(coords.clone())?;
            tape.trilinear_sample_3d(v[0], c)
        },
        &[grid],
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn matmul_softmax_conv_gradients_are_tight() {
    let ops = registered_ops();
    let find = |name: &str| ops.iter().find(|(n, _)| *n == name).unwrap().1;
    for name in ["matmul", "softmax"] {
        let err = check_op(find(name), 1, 11).unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
    let x = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    let w = Tensor::from_fn(&[1, 1, 3, 3], |i| (i as f64 - 4.0) / 5.0);
    let report = gradcheck(|tape, v| tape.conv2d(v[0], v[1], None, 1, 1), &[x, w], &GradcheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn every_registered_op_passes_gradcheck_on_ten_instances() {
    for (name, builder) in registered_ops() {
        let err = check_op(builder, 10, 2024).unwrap();
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }
}

#[test]
fn two_losses_accumulate_additively() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[0.3, -1.2, 2.0])).unwrap();
    let s = tape.sigmoid(x).unwrap();
    let l1 = tape.sum_all(s).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let l2 = tape.sum_all(sq).unwrap();
    let both = tape.add(l1, l2).unwrap();

    let mut sum = tape.backward(l1).unwrap();
    sum.accumulate(&tape.backward(l2).unwrap());
    let joint = tape.backward(both).unwrap();
    let (a, b) = (sum.wrt(&tape, x), joint.wrt(&tape, x));
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn unused_leaves_get_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
    let unused = tape.leaf(t(&[2], &[4.0, 5.0])).unwrap();
    let y = tape.exp(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(&tape, unused).data(), &[0.0, 0.0]);
}

#[test]
fn errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 3], &[1.0; 6])).unwrap();
    let b = tape.leaf(t(&[2, 2], &[1.0; 4])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
    assert!(matches!(tape.add(a, b), Err(DiffError::ShapeMismatch { .. })));
    assert!(matches!(tape.softmax(a, 2), Err(DiffError::AxisOutOfRange { .. })));
    assert!(matches!(tape.backward(a), Err(DiffError::NotScalar { numel: 6 })));
    let zero = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(tape.div(a, zero), Err(DiffError::NonFinite { op: "div" }));
    assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
    let other = Tape::new();
    let s = tape.sum_all(a).unwrap();
    assert!(matches!(other.backward(s), Err(DiffError::UnknownNode(_))));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(&tape, x).item(), 0.0);
}

#[test]
fn constant_ops_are_not_tracked() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0)).unwrap();
    let d = tape.exp(c).unwrap();
    assert!(!tape.requires_grad(d));
    assert!(tape.backward(d).unwrap().get(c).is_none());
}

proptest! {
    #[test]
    fn reshape_slice_concat_permute_roundtrip_exactly(
        data in prop::collection::vec(-1e6f64..1e6, 24),
        cut in 1usize..4,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap()).unwrap();
        let r = tape.reshape(x, &[6, 4]).unwrap();
        let back = tape.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));

        let lo = tape.slice(x, 2, 0, cut).unwrap();
        let hi = tape.slice(x, 2, cut, 4).unwrap();
        let joined = tape.concat(&[lo, hi], 2).unwrap();
        prop_assert_eq!(tape.value(joined), tape.value(x));

        let p = tape.permute(x, &[1, 2, 0]).unwrap();
        let q = tape.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(tape.value(q), tape.value(x));
    }

    #[test]
    fn reshape_preserves_row_major_order(data in prop::collection::vec(-10f64..10.0, 24)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap()).unwrap();
        let r = tape.reshape(x, &[6, 4]).unwrap();
        prop_assert_eq!(tape.value(r).data(), &data[..]);
    }
}
