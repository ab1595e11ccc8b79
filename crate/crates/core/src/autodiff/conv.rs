//! Dense 2D convolution via im2col + GEMM.

use super::tape::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], x: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    geo: Geometry,
}

impl<T: Scalar> Function<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let geo = &self.geo;
        let (x, w) = (tape.data(self.x), tape.data(self.w));
        let rows = geo.col_rows();
        let plane = geo.out_plane();
        let in_sz = geo.cin * geo.h * geo.w;
        let out_sz = geo.cout * plane;
        let need_x = tape.requires_grad(self.x);
        let need_w = tape.requires_grad(self.w);

        let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut col = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * plane }];
        let mut gcol = vec![T::zero(); if need_x && !geo.is_pointwise() { rows * plane } else { 0 }];

        for n in 0..geo.n {
            let gy = &g[n * out_sz..(n + 1) * out_sz];
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            if let Some(gw) = gw.as_mut() {
                let colv: &[T] = if geo.is_pointwise() {
                    xn
                } else {
                    im2col(geo, xn, &mut col);
                    &col
                };
                gemm(Mat::new(gy, geo.cout, plane), Mat::t(colv, rows, plane), gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                let gxn = &mut gx[n * in_sz..(n + 1) * in_sz];
                if geo.is_pointwise() {
                    gemm(Mat::t(w, geo.cout, rows), Mat::new(gy, geo.cout, plane), gxn, false);
                } else {
                    gemm(Mat::t(w, geo.cout, rows), Mat::new(gy, geo.cout, plane), &mut gcol, false);
                    col2im(geo, &gcol, gxn);
                }
            }
        }

        let mut grads = vec![gx, gw];
        if let Some(b) = self.b {
            grads.push(tape.requires_grad(b).then(|| {
                let mut gb = vec![T::zero(); geo.cout];
                for n in 0..geo.n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let s = (n * geo.cout + co) * plane;
                        *acc = g[s..s + plane].iter().fold(*acc, |a, &v| a + v);
                    }
                }
                gb
            }));
        }
        grads
    }
}

impl<T: Scalar> Tape<T> {
    /// Square-kernel convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, (pad, pad))
    }

    /// Convolution with an arbitrary `kh x kw` kernel and per-axis padding.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        (ph, pw): (usize, usize),
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.dims4("conv2d", x)?;
        let [cout, wcin, kh, kw] = self.dims4("conv2d", w)?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} != [{cout}]", self.shape(b))));
            }
        }
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geo = Geometry {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / stride + 1,
            ow: (wd + 2 * pw - kw) / stride + 1,
        };
        let rows = geo.col_rows();
        let plane = geo.out_plane();
        let in_sz = cin * h * wd;
        let xd = self.data(x);
        let wdat = self.data(w);
        let mut out = vec![T::zero(); n * cout * plane];
        let mut col = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * plane }];
        for b_idx in 0..n {
            let xn = &xd[b_idx * in_sz..(b_idx + 1) * in_sz];
            let on = &mut out[b_idx * cout * plane..(b_idx + 1) * cout * plane];
            if let Some(b) = b {
                for (co, &bv) in self.data(b).iter().enumerate() {
                    on[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = bv);
                }
            }
            let colv: &[T] = if geo.is_pointwise() {
                xn
            } else {
                im2col(&geo, xn, &mut col);
                &col
            };
            gemm(Mat::new(wdat, cout, rows), Mat::new(colv, rows, plane), on, b.is_some());
        }
        let value = Tensor::new([n, cout, geo.oh, geo.ow], out)?;
        Ok(self.record(value, Conv2dOp { x, w, b, geo }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_center_is_nine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).at4(0, 0, 1, 1), 9.0);
        assert_eq!(tape.value(y).at4(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 1, 4, 5], |i| (i as f64 * 0.37).sin()));
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = tape.constant(k);
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn strided_output_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 8, 8]));
        let w = tape.constant(Tensor::zeros([2, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
    }
}
