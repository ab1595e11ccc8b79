//! Quaternion convolution through its real block-matrix expansion.

use super::{conv_loops, rand_tensor, rng};
use qflow_core::quaternion::{qconv2d, Quaternion, QuaternionConvWeights, QuaternionFeature};
use qflow_core::{Tape, Tensor};

/// Real 4x4 matrix of left multiplication by `q`.
pub fn left_matrix(q: [f64; 4]) -> [[f64; 4]; 4] {
    let [r, x, y, z] = q;
    [[r, -x, -y, -z], [x, r, -z, y], [y, z, r, -x], [z, -y, x, r]]
}

pub fn matrix_product(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let m = left_matrix(p);
    std::array::from_fn(|i| (0..4).map(|j| m[i][j] * q[j]).sum())
}

pub fn quat(a: [f64; 4]) -> Quaternion {
    Quaternion::new(a[0], a[1], a[2], a[3])
}

pub struct Instance {
    pub parts: [Tensor<f64>; 4],
    pub weights: [Tensor<f64>; 4],
    pub bias: [Tensor<f64>; 4],
}

pub fn instance(seed: u64, n: usize, cq_in: usize, cq_out: usize, hw: usize, k: usize) -> Instance {
    let mut r = rng(seed);
    Instance {
        parts: std::array::from_fn(|_| rand_tensor(&mut r, &[n, cq_in, hw, hw])),
        weights: std::array::from_fn(|_| rand_tensor(&mut r, &[cq_out, cq_in, k, k])),
        bias: std::array::from_fn(|_| rand_tensor(&mut r, &[cq_out])),
    }
}

pub fn run_qconv(inst: &Instance, stride: usize, pad: usize, with_bias: bool) -> [Tensor<f64>; 4] {
    let mut tape = Tape::new();
    let p = inst.parts.clone().map(|t| tape.constant(t));
    let w = inst.weights.clone().map(|t| tape.constant(t));
    let q = QuaternionFeature::new(&tape, p[0], p[1], p[2], p[3]).unwrap();
    let mut qw = QuaternionConvWeights::new(w[0], w[1], w[2], w[3]);
    if with_bias {
        qw.bias = inst.bias.clone().map(|t| Some(tape.constant(t)));
    }
    let out = qconv2d(&mut tape, &q, &qw, stride, pad).unwrap();
    out.parts().map(|v| tape.value(v).clone())
}

/// Real convolution over the part-stacked channels `[r | i | j | k]` with
/// the block weight matrix built from `left_matrix` per channel pair.
pub fn block_oracle(inst: &Instance, stride: usize, pad: usize, with_bias: bool) -> [Tensor<f64>; 4] {
    let [n, cq_in, h, w] = inst.parts[0].dims4().unwrap();
    let [cq_out, _, kh, kw] = inst.weights[0].dims4().unwrap();
    let stacked = Tensor::from_fn([n, 4 * cq_in, h, w], |idx| {
        let x = idx % w;
        let y = (idx / w) % h;
        let c = (idx / (w * h)) % (4 * cq_in);
        let b = idx / (w * h * 4 * cq_in);
        inst.parts[c / cq_in].at4(b, c % cq_in, y, x)
    });
    let big = Tensor::from_fn([4 * cq_out, 4 * cq_in, kh, kw], |idx| {
        let kx = idx % kw;
        let ky = (idx / kw) % kh;
        let ci = (idx / (kw * kh)) % (4 * cq_in);
        let co = idx / (kw * kh * 4 * cq_in);
        let (po, o) = (co / cq_out, co % cq_out);
        let (pi, i) = (ci / cq_in, ci % cq_in);
        let q = std::array::from_fn(|p| inst.weights[p].at4(o, i, ky, kx));
        left_matrix(q)[po][pi]
    });
    let bias: Vec<f64> = (0..4 * cq_out).map(|c| inst.bias[c / cq_out].data()[c % cq_out]).collect();
    let y = conv_loops(&stacked, &big, with_bias.then_some(&bias[..]), stride, (pad, pad));
    let [_, _, oh, ow] = y.dims4().unwrap();
    std::array::from_fn(|p| {
        Tensor::from_fn([n, cq_out, oh, ow], |idx| {
            let x = idx % ow;
            let yy = (idx / ow) % oh;
            let c = (idx / (ow * oh)) % cq_out;
            let b = idx / (ow * oh * cq_out);
            y.at4(b, p * cq_out + c, yy, x)
        })
    })
}
