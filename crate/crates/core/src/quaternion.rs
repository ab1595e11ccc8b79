//! Quaternion algebra, quaternion-valued convolution and quaternion spatial
//! modeling (QSM).
//!
//! A quaternion feature map stores its four components as separate
//! `[N, Cq, H, W]` tensors. Convolution multiplies every kernel tap with the
//! input quaternion through the Hamilton product `w ⊗ γ`, which expands into
//! sixteen real convolutions combined with the signs of the product table.

use std::ops::Mul;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `r + x·i + y·j + z·k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const ONE: Self = Self::new(1.0, 0.0, 0.0, 0.0);
    pub const I: Self = Self::new(0.0, 1.0, 0.0, 0.0);
    pub const J: Self = Self::new(0.0, 0.0, 1.0, 0.0);
    pub const K: Self = Self::new(0.0, 0.0, 0.0, 1.0);

    pub const fn new(r: f64, x: f64, y: f64, z: f64) -> Self {
        Self { r, x, y, z }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.r, -self.x, -self.y, -self.z)
    }

    pub fn norm(self) -> f64 {
        (self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r, self.x, self.y, self.z]
    }
}

/// Hamilton product `q1 ⊗ q2`.
pub fn hamilton(q1: Quaternion, q2: Quaternion) -> Quaternion {
    let Quaternion { r: r1, x: x1, y: y1, z: z1 } = q1;
    let Quaternion { r: r2, x: x2, y: y2, z: z2 } = q2;
    Quaternion {
        r: r1 * r2 - x1 * x2 - y1 * y2 - z1 * z2,
        x: r1 * x2 + x1 * r2 + y1 * z2 - z1 * y2,
        y: r1 * y2 - x1 * z2 + y1 * r2 + z1 * x2,
        z: r1 * z2 + x1 * y2 - y1 * x2 + z1 * r2,
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        hamilton(self, rhs)
    }
}

/// Four-part quaternion view of a feature map.
#[derive(Clone, Copy, Debug)]
pub struct QuaternionFeature {
    pub r: Var,
    pub i: Var,
    pub j: Var,
    pub k: Var,
}

impl QuaternionFeature {
    pub fn new<T: Scalar>(tape: &Tape<T>, r: Var, i: Var, j: Var, k: Var) -> Result<Self> {
        let q = Self { r, i, j, k };
        q.validate(tape)?;
        Ok(q)
    }

    pub fn parts(&self) -> [Var; 4] {
        [self.r, self.i, self.j, self.k]
    }

    fn validate<T: Scalar>(&self, tape: &Tape<T>) -> Result<[usize; 4]> {
        let dims = tape.dims4("quaternion feature", self.r)?;
        if dims[1] == 0 {
            return Err(Error::shape("quaternion feature", "zero quaternion channels"));
        }
        for p in [self.i, self.j, self.k] {
            if tape.shape(p) != tape.shape(self.r) {
                return Err(Error::shape(
                    "quaternion feature",
                    format!("part {:?} differs from {:?}", tape.shape(p), tape.shape(self.r)),
                ));
            }
        }
        Ok(dims)
    }
}

/// Quaternion kernel: four `[Cq_out, Cq_in, K, K]` component tensors plus an
/// optional bias per output component (`[Cq_out]` each).
#[derive(Clone, Copy, Debug)]
pub struct QuaternionConvWeights {
    pub r: Var,
    pub x: Var,
    pub y: Var,
    pub z: Var,
    pub bias: [Option<Var>; 4],
}

impl QuaternionConvWeights {
    pub fn new(r: Var, x: Var, y: Var, z: Var) -> Self {
        Self { r, x, y, z, bias: [None; 4] }
    }

    fn validate<T: Scalar>(&self, tape: &Tape<T>) -> Result<[usize; 4]> {
        let dims = tape.dims4("qconv2d", self.r)?;
        for p in [self.x, self.y, self.z] {
            if tape.shape(p) != tape.shape(self.r) {
                return Err(Error::shape(
                    "qconv2d",
                    format!("weight part {:?} differs from {:?}", tape.shape(p), tape.shape(self.r)),
                ));
            }
        }
        for b in self.bias.iter().flatten() {
            if tape.shape(*b) != [dims[0]] {
                return Err(Error::shape("qconv2d", format!("bias {:?}", tape.shape(*b))));
            }
        }
        Ok(dims)
    }
}

/// Applies a real activation to each component independently.
pub fn split_activation<T: Scalar>(tape: &mut Tape<T>, q: &QuaternionFeature, act: Activation) -> QuaternionFeature {
    let [r, i, j, k] = q.parts().map(|p| tape.activation(p, act));
    QuaternionFeature { r, i, j, k }
}

/// Signed sum of real convolutions, the first term carrying the bias.
fn signed_conv_sum<T: Scalar>(
    tape: &mut Tape<T>,
    terms: [(f64, Var, Var); 4],
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let (s0, x0, w0) = terms[0];
    debug_assert!(s0 > 0.0);
    let mut acc = tape.conv2d(x0, w0, bias, stride, pad)?;
    for &(sign, x, w) in &terms[1..] {
        let y = tape.conv2d(x, w, None, stride, pad)?;
        acc = if sign > 0.0 { tape.add(acc, y)? } else { tape.sub(acc, y)? };
    }
    Ok(acc)
}

/// Quaternion convolution: every tap contributes `w ⊗ γ`.
pub fn qconv2d<T: Scalar>(
    tape: &mut Tape<T>,
    q: &QuaternionFeature,
    w: &QuaternionConvWeights,
    stride: usize,
    pad: usize,
) -> Result<QuaternionFeature> {
    let [_, cq_in, _, _] = q.validate(tape)?;
    let [_, wc_in, kh, kw] = w.validate(tape)?;
    if wc_in != cq_in {
        return Err(Error::shape("qconv2d", format!("input has {cq_in} quaternion channels, weight expects {wc_in}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape("qconv2d", format!("kernel {kh}x{kw} must be square and odd")));
    }
    let QuaternionFeature { r: gr, i: gx, j: gy, k: gz } = *q;
    let QuaternionConvWeights { r: wr, x: wx, y: wy, z: wz, bias } = *w;
    let r =
        signed_conv_sum(tape, [(1.0, gr, wr), (-1.0, gx, wx), (-1.0, gy, wy), (-1.0, gz, wz)], bias[0], stride, pad)?;
    let i = signed_conv_sum(tape, [(1.0, gx, wr), (1.0, gr, wx), (1.0, gz, wy), (-1.0, gy, wz)], bias[1], stride, pad)?;
    let j = signed_conv_sum(tape, [(1.0, gy, wr), (-1.0, gz, wx), (1.0, gr, wy), (1.0, gx, wz)], bias[2], stride, pad)?;
    let k = signed_conv_sum(tape, [(1.0, gz, wr), (1.0, gy, wx), (-1.0, gx, wy), (1.0, gr, wz)], bias[3], stride, pad)?;
    Ok(QuaternionFeature { r, i, j, k })
}

/// Quaternion spatial modeling on a real `[N, C, H, W]` feature map.
///
/// The channels split into thirds assigned to the `i`, `j`, `k` axes over a
/// zero real part, pass through a 3x3 quaternion convolution, and the three
/// imaginary outputs are concatenated back to `C` channels. When
/// `real_projection` (`[C, 4C/3, 1, 1]`) is given, all four output parts are
/// instead fused back to `C` channels with that 1x1 convolution.
pub fn qsm<T: Scalar>(
    tape: &mut Tape<T>,
    f: Var,
    w: &QuaternionConvWeights,
    real_projection: Option<Var>,
) -> Result<Var> {
    let [n, c, h, wd] = tape.dims4("qsm", f)?;
    if c % 3 != 0 {
        return Err(Error::shape("qsm", format!("{c} channels not divisible by 3")));
    }
    let cq = c / 3;
    let f1 = tape.slice_channels(f, 0, cq)?;
    let f2 = tape.slice_channels(f, cq, cq)?;
    let f3 = tape.slice_channels(f, 2 * cq, cq)?;
    let z0 = tape.constant(Tensor::zeros([n, cq, h, wd]));
    let field = QuaternionFeature::new(tape, z0, f1, f2, f3)?;
    let out = qconv2d(tape, &field, w, 1, 1)?;
    match real_projection {
        None => tape.concat_channels(&[out.i, out.j, out.k]),
        Some(proj) => {
            let all = tape.concat_channels(&out.parts())?;
            tape.conv2d(all, proj, None, 1, 0)
        }
    }
}

/// Random quaternion kernel components `[r, x, y, z]`, each
/// `[cq_out, cq_in, k, k]`.
///
/// Each weight is a uniformly random unit quaternion scaled by a magnitude
/// drawn from `U(-s, s)`, with `s` chosen so every component of the expanded
/// real block matrix has the variance of a `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// draw, `fan_in = 4 * cq_in * k * k`.
pub fn init_quaternion_kernel<T: Scalar>(rng: &mut impl Rng, cq_out: usize, cq_in: usize, k: usize) -> [Tensor<T>; 4] {
    let count = cq_out * cq_in * k * k;
    let fan_in = (4 * cq_in * k * k) as f64;
    let bound = 2.0 / fan_in.sqrt();
    let mut parts = [vec![], vec![], vec![], vec![]];
    for _ in 0..count {
        let mut u: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let len = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mag = rng.gen_range(-bound..bound);
        u.iter_mut().for_each(|v| *v *= mag / len);
        for (p, v) in parts.iter_mut().zip(u) {
            p.push(T::of(v));
        }
    }
    parts.map(|data| Tensor::new([cq_out, cq_in, k, k], data).expect("kernel shape"))
}
