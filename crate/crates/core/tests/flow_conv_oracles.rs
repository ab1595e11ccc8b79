mod common;

use common::{conv_loops, outward_ordered, rand_tensor, rng};
use proptest::prelude::*;
use qflow_core::flow_conv::{
    bilinear_sample, chain_drift, constrain_chain, dfc, dfc_branch, flow_conv, op_census, tap_positions, ConvVariant,
    DfcBranchWeights, DfcKernelSpec, DfcWeights, FlowConvWeights, FlowPattern, KernelAxis, NdcWeights,
};
use qflow_core::{Tape, Tensor, Var};
use rand::Rng;

#[test]
fn bilinear_reproduces_affine_images() {
    let (a, b, c) = (0.37, -1.2, 0.5);
    let x = Tensor::<f64>::from_fn([1, 1, 6, 7], |i| a * (i % 7) as f64 + b * (i / 7) as f64 + c);
    let mut r = rng(1);
    for _ in 0..200 {
        let px = r.gen_range(0.0..6.0);
        let py = r.gen_range(0.0..5.0);
        let v = bilinear_sample(&x, px, py).unwrap()[0];
        assert!((v - (a * px + b * py + c)).abs() <= 1e-12);
    }
}

#[test]
fn bilinear_tape_op_matches_point_sampler() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[2, 3, 4, 5]);
    let pts = Tensor::from_fn([2, 4, 2], |_| r.gen_range(-1.5..5.5));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(pts.clone());
    let y = tape.bilinear_sample(xv, pv).unwrap();
    for n in 0..2 {
        for p in 0..4 {
            let (px, py) = (pts.data()[(n * 4 + p) * 2], pts.data()[(n * 4 + p) * 2 + 1]);
            let single = Tensor::from_fn([1, 3, 4, 5], |i| x.data()[n * 60 + i]);
            let want = bilinear_sample(&single, px, py).unwrap();
            for ch in 0..3 {
                assert_eq!(tape.data(y)[(n * 3 + ch) * 4 + p], want[ch]);
            }
        }
    }
}

fn deform(x: &Tensor<f64>, w: &Tensor<f64>, off: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (x, w, o) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(off.clone()));
    let y = tape.deformable_conv2d(x, w, o).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_offsets_reduce_to_convolution() {
    let mut r = rng(3);
    for (kh, kw) in [(3, 3), (1, 5), (5, 1), (1, 1)] {
        let x = rand_tensor(&mut r, &[2, 3, 6, 5]);
        let w = rand_tensor(&mut r, &[4, 3, kh, kw]);
        let off = Tensor::zeros([2, 2 * kh * kw, 6, 5]);
        let want = conv_loops(&x, &w, None, 1, (kh / 2, kw / 2));
        assert!(deform(&x, &w, &off).max_abs_diff(&want) <= 1e-10);
    }
}

#[test]
fn unit_offset_equals_shifted_input() {
    let mut r = rng(4);
    // a zero first column makes the left border agree with zero padding
    let x = rand_tensor(&mut r, &[1, 2, 5, 6]);
    let x = Tensor::from_fn([1, 2, 5, 6], |i| if i % 6 == 0 { 0.0 } else { x.data()[i] });
    let w = rand_tensor(&mut r, &[3, 2, 3, 3]);
    // (+1, 0) on every tap: each tap reads one pixel to the right
    let off = Tensor::from_fn([1, 18, 5, 6], |i| if (i / 30) % 2 == 0 { 1.0 } else { 0.0 });
    let shifted = Tensor::from_fn([1, 2, 5, 6], |i| if i % 6 == 5 { 0.0 } else { x.data()[i + 1] });
    let want = conv_loops(&shifted, &w, None, 1, (1, 1));
    assert!(deform(&x, &w, &off).max_abs_diff(&want) <= 1e-12);
}

struct Branch {
    offset_w: Tensor<f64>,
    offset_b: Tensor<f64>,
    h: Tensor<f64>,
    v: Tensor<f64>,
}

fn branch(seed: u64, c: usize, k: usize, zero_predictor: bool) -> Branch {
    let mut r = rng(seed);
    let mut offset_w = rand_tensor(&mut r, &[2 * k, c, 3, 3]).map(|v| 0.3 * v);
    let mut offset_b = rand_tensor(&mut r, &[2 * k]);
    if zero_predictor {
        offset_w = Tensor::zeros(offset_w.shape());
        offset_b = Tensor::zeros(offset_b.shape());
    }
    Branch { offset_w, offset_b, h: rand_tensor(&mut r, &[c, c, 1, k]), v: rand_tensor(&mut r, &[c, c, k, 1]) }
}

fn bind(tape: &mut Tape<f64>, b: &Branch) -> DfcBranchWeights {
    DfcBranchWeights {
        offset_w: tape.constant(b.offset_w.clone()),
        offset_b: Some(tape.constant(b.offset_b.clone())),
        horizontal_w: tape.constant(b.h.clone()),
        vertical_w: tape.constant(b.v.clone()),
    }
}

#[test]
fn zero_predictor_branch_is_sum_of_axis_convolutions() {
    for pattern in [FlowPattern::Left, FlowPattern::Right, FlowPattern::Adaptive] {
        let b = branch(5, 3, 5, true);
        let x = rand_tensor(&mut rng(6), &[2, 3, 6, 7]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = bind(&mut tape, &b);
        let y = dfc_branch(&mut tape, xv, &w, pattern, 2.0).unwrap();
        let h = conv_loops(&x, &b.h, None, 1, (0, 2));
        let v = conv_loops(&x, &b.v, None, 1, (2, 0));
        let want = Tensor::from_fn(h.shape().to_vec(), |i| h.data()[i] + v.data()[i]);
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-10);
    }
}

#[test]
fn branch_preserves_shape_and_tiny_images_work() {
    for (c, hw) in [(1, 1), (2, 2), (5, 6)] {
        let b = branch(7, c, 5, false);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng(8), &[1, c, hw, hw]));
        let w = bind(&mut tape, &b);
        let y = dfc_branch(&mut tape, x, &w, FlowPattern::Left, 2.0).unwrap();
        assert_eq!(tape.shape(y), &[1, c, hw, hw]);
    }
}

#[test]
fn branch_rejects_channel_mismatch() {
    let b = branch(7, 3, 5, false);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = bind(&mut tape, &b);
    assert!(dfc_branch(&mut tape, x, &w, FlowPattern::Left, 2.0).is_err());
}

fn fused(tape: &mut Tape<f64>, x: Var, left: &Branch, right: &Branch, fuse: Tensor<f64>) -> Var {
    let w = DfcWeights { left: bind(tape, left), right: bind(tape, right), fuse_w: tape.constant(fuse) };
    dfc(tape, x, &w, 2.0).unwrap()
}

#[test]
fn half_identity_fusion_is_branch_mean() {
    let c = 2;
    let (l, r) = (branch(9, c, 3, false), branch(10, c, 3, false));
    let fuse = Tensor::from_fn([c, 2 * c, 1, 1], |i| {
        let (o, ic) = (i / (2 * c), i % (2 * c));
        if ic % c == o {
            0.5
        } else {
            0.0
        }
    });
    let x = rand_tensor(&mut rng(11), &[1, c, 5, 5]);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = fused(&mut tape, xv, &l, &r, fuse);
    let wl = bind(&mut tape, &l);
    let wr = bind(&mut tape, &r);
    let yl = dfc_branch(&mut tape, xv, &wl, FlowPattern::Left, 2.0).unwrap();
    let yr = dfc_branch(&mut tape, xv, &wr, FlowPattern::Right, 2.0).unwrap();
    for i in 0..tape.value(y).numel() {
        let mean = 0.5 * (tape.data(yl)[i] + tape.data(yr)[i]);
        assert!((tape.data(y)[i] - mean).abs() <= 1e-12);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let (l, r) = (branch(12, 3, 5, false), branch(13, 3, 5, false));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 3, 4, 4]));
    let fuse = rand_tensor(&mut rng(14), &[3, 6, 1, 1]);
    let y = fused(&mut tape, x, &l, &r, fuse);
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn zero_offset_branch_is_translation_equivariant() {
    let b = branch(15, 2, 5, true);
    let x = rand_tensor(&mut rng(16), &[1, 2, 10, 10]);
    // shift content right by 2 and down by 1
    let shifted = Tensor::from_fn([1, 2, 10, 10], |i| {
        let (xx, yy, c) = (i % 10, (i / 10) % 10, i / 100);
        if xx >= 2 && yy >= 1 {
            x.at4(0, c, yy - 1, xx - 2)
        } else {
            0.0
        }
    });
    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xv = tape.constant(input.clone());
        let w = bind(&mut tape, &b);
        let y = dfc_branch(&mut tape, xv, &w, FlowPattern::Left, 2.0).unwrap();
        tape.value(y).clone()
    };
    let (y0, y1) = (run(&x), run(&shifted));
    // interior away from every border the kernel can reach
    for c in 0..2 {
        for yy in 3..8 {
            for xx in 4..8 {
                assert!((y1.at4(0, c, yy, xx) - y0.at4(0, c, yy - 1, xx - 2)).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn straight_stencil_for_zero_offsets() {
    for axis in [KernelAxis::Horizontal, KernelAxis::Vertical] {
        let spec = DfcKernelSpec::new(7, axis, None).unwrap();
        let pos = tap_positions(&spec, &[0.0; 7], 3.0, 4.0);
        for (t, (x, y)) in pos.into_iter().enumerate() {
            let step = t as f64 - 3.0;
            let want = match axis {
                KernelAxis::Horizontal => (3.0 + step, 4.0),
                KernelAxis::Vertical => (3.0, 4.0 + step),
            };
            assert_eq!((x, y), want);
        }
    }
}

#[test]
fn chain_positions_op_matches_prefix_sums() {
    let mut r = rng(17);
    let perp = rand_tensor(&mut r, &[1, 5, 2, 2]);
    let mut tape = Tape::new();
    let p = tape.constant(perp.clone());
    let off = tape.chain_positions(p, KernelAxis::Horizontal).unwrap();
    let o = tape.value(off);
    for px in 0..4 {
        let chain: Vec<f64> = (0..5).map(|s| perp.data()[s * 4 + px]).collect();
        let drift = chain_drift(&chain);
        for t in 0..5 {
            assert_eq!(o.data()[(2 * t) * 4 + px], 0.0, "dx stays zero");
            assert_eq!(o.data()[(2 * t + 1) * 4 + px], drift[t]);
        }
    }
}

fn arb_chain() -> impl Strategy<Value = Vec<f64>> {
    (1usize..5).prop_flat_map(|half| prop::collection::vec(-2.0f64..2.0, 2 * half + 1))
}

proptest! {
    #[test]
    fn non_negative_offsets_give_monotone_taps(chain in arb_chain().prop_map(|c| c.into_iter().map(f64::abs).collect::<Vec<_>>())) {
        let d = chain_drift(&chain);
        let c = (chain.len() - 1) / 2;
        for t in c..chain.len() - 1 {
            prop_assert!(d[t + 1] >= d[t]);
        }
        for t in (1..=c).rev() {
            prop_assert!(d[t - 1] >= d[t]);
        }
    }

    #[test]
    fn constraint_orders_magnitudes(chain in arb_chain()) {
        let c = (chain.len() - 1) / 2;
        for (pattern, pos_widens) in [(FlowPattern::Left, true), (FlowPattern::Right, false)] {
            let v = constrain_chain(&chain, pattern).values;
            prop_assert_eq!(v[c], chain[c]);
            prop_assert!(outward_ordered(&v, pos_widens));
        }
    }

    #[test]
    fn constraint_is_idempotent(chain in arb_chain()) {
        for pattern in [FlowPattern::Left, FlowPattern::Right] {
            let once = constrain_chain(&chain, pattern).values;
            let twice = constrain_chain(&once, pattern).values;
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn constraint_is_a_signed_selection(chain in arb_chain()) {
        for pattern in [FlowPattern::Left, FlowPattern::Right, FlowPattern::Adaptive] {
            let r = constrain_chain(&chain, pattern);
            for s in 0..chain.len() {
                prop_assert_eq!(r.values[s], r.coeff[s] * chain[r.source[s]]);
            }
        }
    }
}

#[test]
fn adaptive_follows_the_heavier_side() {
    let heavy_pos = [0.1, 0.1, 0.5, 0.9, 1.5];
    let heavy_neg = [1.5, 0.9, 0.5, 0.1, 0.1];
    assert_eq!(
        constrain_chain(&heavy_pos, FlowPattern::Adaptive).values,
        constrain_chain(&heavy_pos, FlowPattern::Left).values
    );
    assert_eq!(
        constrain_chain(&heavy_neg, FlowPattern::Adaptive).values,
        constrain_chain(&heavy_neg, FlowPattern::Right).values
    );
}

#[test]
fn flow_constraint_op_is_per_pixel() {
    let mut r = rng(18);
    let raw = rand_tensor(&mut r, &[2, 5, 3, 2]);
    let mut tape = Tape::new();
    let v = tape.constant(raw.clone());
    let y = tape.flow_constraint(v, FlowPattern::Right).unwrap();
    for n in 0..2 {
        for p in 0..6 {
            let chain: Vec<f64> = (0..5).map(|s| raw.data()[(n * 5 + s) * 6 + p]).collect();
            let want = constrain_chain(&chain, FlowPattern::Right).values;
            for s in 0..5 {
                assert_eq!(tape.data(y)[(n * 5 + s) * 6 + p], want[s]);
            }
        }
    }
}

fn census_for(variant: ConvVariant) -> (bool, std::collections::BTreeMap<&'static str, usize>) {
    let (c, k) = (3, 3);
    let mut tape = Tape::<f64>::new();
    // a trainable input so that every downstream op is recorded
    let x = tape.param(rand_tensor(&mut rng(19), &[1, c, 4, 4]));
    let mk = |tape: &mut Tape<f64>, seed| bind(tape, &branch(seed, c, k, false));
    let weights = match variant {
        ConvVariant::None => FlowConvWeights::None,
        ConvVariant::Ndc => FlowConvWeights::Ndc(NdcWeights {
            offset_w: tape.constant(Tensor::zeros([18, c, 3, 3])),
            offset_b: None,
            w: tape.constant(Tensor::zeros([c, c, 3, 3])),
        }),
        ConvVariant::Dfc => {
            let left = mk(&mut tape, 1);
            let right = mk(&mut tape, 2);
            let fuse_w = tape.constant(Tensor::zeros([c, 2 * c, 1, 1]));
            FlowConvWeights::Dual(DfcWeights { left, right, fuse_w })
        }
        v => {
            let w = mk(&mut tape, 3);
            FlowConvWeights::Single(v.single_pattern().unwrap(), w)
        }
    };
    let out = flow_conv(&mut tape, x, &weights, 2.0).unwrap();
    (out.is_some(), op_census(&tape))
}

#[test]
fn variant_selector_runs_the_expected_path() {
    let count = |m: &std::collections::BTreeMap<&str, usize>, k: &str| m.get(k).copied().unwrap_or(0);
    let (some, m) = census_for(ConvVariant::None);
    assert!(!some && m.is_empty());
    let (_, m) = census_for(ConvVariant::Ndc);
    assert_eq!((count(&m, "deformable_conv2d"), count(&m, "flow_constraint")), (1, 0));
    for v in [ConvVariant::Ldfc, ConvVariant::Rdfc, ConvVariant::Adfc] {
        let (_, m) = census_for(v);
        assert_eq!((count(&m, "deformable_conv2d"), count(&m, "flow_constraint"), count(&m, "concat")), (2, 2, 0));
    }
    let (_, m) = census_for(ConvVariant::Dfc);
    assert_eq!((count(&m, "deformable_conv2d"), count(&m, "flow_constraint"), count(&m, "concat")), (4, 4, 1));
}
