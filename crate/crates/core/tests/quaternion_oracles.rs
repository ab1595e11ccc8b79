mod common;

use common::quaternion::{block_oracle, instance, matrix_product, quat, run_qconv, Instance};
use common::{conv_loops, rand_tensor, rng};
use proptest::prelude::*;
use qflow_core::autodiff::Activation;
use qflow_core::quaternion::{hamilton, qsm, split_activation, Quaternion, QuaternionConvWeights, QuaternionFeature};
use qflow_core::{Tape, Tensor};
use rand::Rng;

#[test]
fn hamilton_matches_matrix_form() {
    let got = hamilton(quat([1.0, 2.0, 3.0, 4.0]), quat([5.0, 6.0, 7.0, 8.0])).to_array();
    let want = matrix_product([1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]);
    assert_eq!(want, [-60.0, 12.0, 30.0, 24.0]);
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn basis_products() {
    let (i, j, k) = (Quaternion::I, Quaternion::J, Quaternion::K);
    assert_eq!(hamilton(i, j), k);
    assert_eq!(hamilton(j, i).to_array(), [0.0, 0.0, 0.0, -1.0]);
    assert_eq!(hamilton(k, j).to_array(), [0.0, -1.0, 0.0, 0.0]);
    for b in [i, j, k] {
        assert_eq!(hamilton(b, b).to_array(), [-1.0, 0.0, 0.0, 0.0]);
    }
    assert_eq!(hamilton(Quaternion::ONE, quat([0.3, -1.0, 2.0, 5.0])), quat([0.3, -1.0, 2.0, 5.0]));
}

fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-3.0f64..3.0)
}

proptest! {
    #[test]
    fn norm_is_multiplicative(a in arb_quat(), b in arb_quat()) {
        let (p, q) = (quat(a), quat(b));
        prop_assert!((hamilton(p, q).norm() - p.norm() * q.norm()).abs() <= 1e-12 * (1.0 + p.norm() * q.norm()));
    }

    #[test]
    fn product_is_associative(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
        let (p, q, r) = (quat(a), quat(b), quat(c));
        let lhs = hamilton(hamilton(p, q), r).to_array();
        let rhs = hamilton(p, hamilton(q, r)).to_array();
        for (x, y) in lhs.iter().zip(rhs) {
            prop_assert!((x - y).abs() <= 1e-12 * 100.0);
        }
    }

    #[test]
    fn conjugate_gives_squared_norm(a in arb_quat()) {
        let p = quat(a);
        let got = hamilton(p, p.conjugate()).to_array();
        prop_assert!((got[0] - p.norm().powi(2)).abs() <= 1e-12 * (1.0 + got[0]));
        for v in &got[1..] {
            prop_assert!(v.abs() <= 1e-12);
        }
    }
}

#[test]
fn qconv_equals_block_matrix_expansion() {
    let mut instances = 0;
    for seed in 0..24u64 {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(1..3);
        let cq_in = r.gen_range(1..4);
        let cq_out = r.gen_range(1..4);
        let hw = r.gen_range(3..7);
        let k = [1, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..3);
        let pad = k / 2;
        let with_bias = seed % 2 == 0;
        let inst = instance(seed, n, cq_in, cq_out, hw, k);
        let got = run_qconv(&inst, stride, pad, with_bias);
        let want = block_oracle(&inst, stride, pad, with_bias);
        for p in 0..4 {
            assert!(got[p].max_abs_diff(&want[p]) <= 1e-10, "seed {seed} part {p}");
        }
        instances += 1;
    }
    assert!(instances >= 20);
}

#[test]
fn reference_instance_shape() {
    let inst = instance(7, 1, 2, 2, 4, 3);
    let got = run_qconv(&inst, 1, 1, false);
    let want = block_oracle(&inst, 1, 1, false);
    assert_eq!(got[0].shape(), &[1, 2, 4, 4]);
    for p in 0..4 {
        assert!(got[p].max_abs_diff(&want[p]) <= 1e-10);
    }
}

#[test]
fn real_weights_reduce_to_real_convolution() {
    let mut inst = instance(3, 1, 2, 3, 5, 3);
    for p in 1..4 {
        inst.weights[p] = Tensor::zeros(inst.weights[0].shape());
    }
    let got = run_qconv(&inst, 1, 1, false);
    for p in 0..4 {
        let want = conv_loops(&inst.parts[p], &inst.weights[0], None, 1, (1, 1));
        assert!(got[p].max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn single_tap_is_hamilton_product() {
    let inst = instance(11, 1, 1, 1, 1, 1);
    let got = run_qconv(&inst, 1, 0, false);
    let w = quat(std::array::from_fn(|p| inst.weights[p].data()[0]));
    let g = quat(std::array::from_fn(|p| inst.parts[p].data()[0]));
    let want = hamilton(w, g).to_array();
    for p in 0..4 {
        assert!((got[p].data()[0] - want[p]).abs() <= 1e-12);
    }
}

#[test]
fn split_activation_identity_and_relu() {
    let mut tape = Tape::<f64>::new();
    let vals = [-1.0, 2.0, -3.0, 4.0];
    let p = vals.map(|v| tape.constant(Tensor::full([1, 1, 1, 1], v)));
    let q = QuaternionFeature::new(&tape, p[0], p[1], p[2], p[3]).unwrap();
    let id = split_activation(&mut tape, &q, Activation::Identity);
    let relu = split_activation(&mut tape, &q, Activation::Relu);
    let read = |tape: &Tape<f64>, f: &QuaternionFeature| f.parts().map(|v| tape.data(v)[0]);
    assert_eq!(read(&tape, &id), vals);
    assert_eq!(read(&tape, &relu), [0.0, 2.0, 0.0, 4.0]);
}

fn qsm_weights(tape: &mut Tape<f64>, w: [Tensor<f64>; 4]) -> QuaternionConvWeights {
    let v = w.map(|t| tape.constant(t));
    QuaternionConvWeights::new(v[0], v[1], v[2], v[3])
}

#[test]
fn qsm_preserves_shape() {
    for c in [3, 48, 60] {
        let mut r = rng(c as u64);
        let cq = c / 3;
        let mut tape = Tape::new();
        let f = tape.constant(rand_tensor(&mut r, &[1, c, 5, 4]));
        let w = qsm_weights(&mut tape, std::array::from_fn(|_| rand_tensor(&mut r, &[cq, cq, 3, 3])));
        let y = qsm(&mut tape, f, &w, None).unwrap();
        assert_eq!(tape.shape(y), &[1, c, 5, 4]);
    }
}

#[test]
fn qsm_of_zero_is_zero() {
    let mut r = rng(5);
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::zeros([2, 6, 4, 4]));
    let w = qsm_weights(&mut tape, std::array::from_fn(|_| rand_tensor(&mut r, &[2, 2, 3, 3])));
    let y = qsm(&mut tape, f, &w, None).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn qsm_with_real_identity_center_tap_is_identity() {
    let cq = 3;
    let mut ident = Tensor::zeros([cq, cq, 3, 3]);
    for c in 0..cq {
        let i = ident.idx4(c, c, 1, 1);
        ident.data_mut()[i] = 1.0;
    }
    let zero = Tensor::zeros([cq, cq, 3, 3]);
    let x = rand_tensor(&mut rng(9), &[1, 3 * cq, 4, 5]);

    let mut tape = Tape::new();
    let f = tape.constant(x.clone());
    let w = qsm_weights(&mut tape, [ident.clone(), zero.clone(), zero.clone(), zero.clone()]);
    let y = qsm(&mut tape, f, &w, None).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) <= 1e-12);

    // the same identity expressed through the block-matrix oracle
    let inst = Instance {
        parts: [
            Tensor::zeros([1, cq, 4, 5]),
            Tensor::from_fn([1, cq, 4, 5], |i| x.data()[i]),
            Tensor::from_fn([1, cq, 4, 5], |i| x.data()[cq * 20 + i]),
            Tensor::from_fn([1, cq, 4, 5], |i| x.data()[2 * cq * 20 + i]),
        ],
        weights: [ident, zero.clone(), zero.clone(), zero],
        bias: std::array::from_fn(|_| Tensor::zeros([cq])),
    };
    let o = block_oracle(&inst, 1, 1, false);
    for p in 1..4 {
        assert!(o[p].max_abs_diff(&inst.parts[p]) <= 1e-12);
    }
}
