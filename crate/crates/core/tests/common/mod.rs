#![allow(dead_code)]

pub mod quaternion;

use qflow_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop convolution with zero padding `(ph, pw)`.
pub fn conv_loops(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: usize,
    (ph, pw): (usize, usize),
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, kh, kw] = w.dims4().unwrap();
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (wd + 2 * pw - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - ph as isize;
                                let ix = (ox * stride + kx) as isize - pw as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at4(co, ci, ky, kx) * x.at4(bn, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let i = out.idx4(bn, co, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}

/// Magnitude ordering of a constrained chain, read outward from the centre
/// tap: with `pos_widens`, magnitudes never shrink toward the positive end
/// and never grow toward the negative end; otherwise the reverse. Zeroed
/// taps are skipped.
pub fn outward_ordered(v: &[f64], pos_widens: bool) -> bool {
    let c = (v.len() - 1) / 2;
    let pos = (c..v.len() - 1).all(|s| {
        let (inner, outer) = (v[s].abs(), v[s + 1].abs());
        v[s + 1] == 0.0 || if pos_widens { outer >= inner } else { outer <= inner }
    });
    let neg = (1..=c).rev().all(|s| {
        let (inner, outer) = (v[s].abs(), v[s - 1].abs());
        v[s - 1] == 0.0 || if pos_widens { outer <= inner } else { outer >= inner }
    });
    pos && neg
}
