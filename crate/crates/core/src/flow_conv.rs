//! Bilinear sampling, deformable convolution and dynamic flow convolution.
//!
//! Dynamic flow convolution decouples a `K`-tap kernel into a horizontal
//! `1 x K` and a vertical `K x 1` stencil. Each tap is displaced perpendicular
//! to its axis by the running sum of the per-step offsets between it and the
//! center tap, so a tap can only move as far as the chain leading to it
//! (the viscosity chain). Before accumulation the per-step offsets pass a
//! magnitude constraint that makes one side of the chain widen outward and
//! the other narrow (the surface-tension constraint). A left-pattern and a
//! right-pattern branch run side by side and a 1x1 convolution fuses them.
//!
//! Offset fields use the `[N, 2*T, H, W]` layout with `(dx, dy)` interleaved
//! per tap `t`, taps enumerated row-major over the kernel window.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// bilinear kernel

/// Bilinear footprint of one fractional location on an `h x w` plane.
/// Corners outside the plane carry zero weight.
#[derive(Clone, Copy, Debug, Default)]
struct Footprint {
    index: [usize; 4],
    weight: [f64; 4],
    /// d weight / d px
    dwx: [f64; 4],
    /// d weight / d py
    dwy: [f64; 4],
}

impl Footprint {
    fn at(px: f64, py: f64, h: usize, w: usize) -> Self {
        let mut fp = Footprint::default();
        if !px.is_finite() || !py.is_finite() {
            return fp;
        }
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        let weight = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
        let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
        for (c, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                fp.index[c] = cy as usize * w + cx as usize;
                fp.weight[c] = weight[c];
                fp.dwx[c] = dwx[c];
                fp.dwy[c] = dwy[c];
            }
        }
        fp
    }

    #[inline]
    fn sample<T: Scalar>(&self, plane: &[T]) -> f64 {
        (0..4).map(|c| self.weight[c] * plane[self.index[c]].as_f64()).sum()
    }

    /// `(d value / d px, d value / d py)`.
    #[inline]
    fn slope<T: Scalar>(&self, plane: &[T]) -> (f64, f64) {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for c in 0..4 {
            let v = plane[self.index[c]].as_f64();
            gx += self.dwx[c] * v;
            gy += self.dwy[c] * v;
        }
        (gx, gy)
    }

    #[inline]
    fn scatter<T: Scalar>(&self, plane: &mut [T], g: f64) {
        for c in 0..4 {
            if self.weight[c] != 0.0 {
                let i = self.index[c];
                plane[i] = plane[i] + T::of(self.weight[c] * g);
            }
        }
    }
}

fn frac_margin(v: f64) -> f64 {
    (v - v.round()).abs()
}

/// Samples `x[n, c]` at fractional `(px, py)` (column, row) for every `n, c`,
/// zero outside the image. Returns `N * C` values, `c` fastest.
pub fn bilinear_sample<T: Scalar>(x: &Tensor<T>, px: f64, py: f64) -> Result<Vec<T>> {
    let [n, c, h, w] = x.dims4()?;
    let fp = Footprint::at(px, py, h, w);
    let plane = h * w;
    Ok((0..n * c).map(|nc| T::of(fp.sample(&x.data()[nc * plane..(nc + 1) * plane]))).collect())
}

struct BilinearSampleOp {
    x: Var,
    points: Var,
}

impl<T: Scalar> Function<T> for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.points]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let x = tape.data(self.x);
        let pts = tape.data(self.points);
        let [n, c, h, w] = tape.value(self.x).dims4().expect("rank 4");
        let p = tape.shape(self.points)[1];
        let plane = h * w;
        let mut gx = vec![T::zero(); x.len()];
        let mut gp = vec![T::zero(); pts.len()];
        for b in 0..n {
            for k in 0..p {
                let base = (b * p + k) * 2;
                let fp = Footprint::at(pts[base].as_f64(), pts[base + 1].as_f64(), h, w);
                let (mut sx, mut sy) = (0.0, 0.0);
                for ch in 0..c {
                    let go = g[(b * c + ch) * p + k].as_f64();
                    let off = (b * c + ch) * plane;
                    fp.scatter(&mut gx[off..off + plane], go);
                    let (dx, dy) = fp.slope(&x[off..off + plane]);
                    sx += go * dx;
                    sy += go * dy;
                }
                gp[base] = T::of(sx);
                gp[base + 1] = T::of(sy);
            }
        }
        vec![Some(gx), Some(gp)]
    }

    fn kink_margin(&self, tape: &Tape<T>) -> Option<f64> {
        if !tape.requires_grad(self.points) {
            return None;
        }
        Some(tape.data(self.points).iter().map(|v| frac_margin(v.as_f64())).fold(f64::INFINITY, f64::min))
    }
}

// ---------------------------------------------------------------------------
// deformable convolution

struct DeformGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl DeformGeometry {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    /// Footprints `[tap][pixel]` for sample `b`.
    fn footprints<T: Scalar>(&self, offsets: &[T], b: usize) -> Vec<Footprint> {
        let (t, plane) = (self.taps(), self.h * self.w);
        let (ph, pw) = ((self.kh / 2) as f64, (self.kw / 2) as f64);
        let mut fps = Vec::with_capacity(t * plane);
        for tap in 0..t {
            let (ki, kj) = ((tap / self.kw) as f64, (tap % self.kw) as f64);
            let ox_c = &offsets[((b * 2 * t) + 2 * tap) * plane..][..plane];
            let oy_c = &offsets[((b * 2 * t) + 2 * tap + 1) * plane..][..plane];
            for y in 0..self.h {
                for x in 0..self.w {
                    let p = y * self.w + x;
                    let px = x as f64 - pw + kj + ox_c[p].as_f64();
                    let py = y as f64 - ph + ki + oy_c[p].as_f64();
                    fps.push(Footprint::at(px, py, self.h, self.w));
                }
            }
        }
        fps
    }

    fn columns<T: Scalar>(&self, xn: &[T], fps: &[Footprint], col: &mut [T]) {
        let plane = self.h * self.w;
        let t = self.taps();
        for ci in 0..self.cin {
            let xc = &xn[ci * plane..(ci + 1) * plane];
            for tap in 0..t {
                let row = &mut col[(ci * t + tap) * plane..][..plane];
                let fpr = &fps[tap * plane..(tap + 1) * plane];
                for (v, fp) in row.iter_mut().zip(fpr) {
                    *v = T::of(fp.sample(xc));
                }
            }
        }
    }
}

struct DeformConvOp {
    x: Var,
    w: Var,
    offsets: Var,
    geo: DeformGeometry,
}

impl<T: Scalar> Function<T> for DeformConvOp {
    fn name(&self) -> &'static str {
        "deformable_conv2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w, self.offsets]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let geo = &self.geo;
        let (x, w, off) = (tape.data(self.x), tape.data(self.w), tape.data(self.offsets));
        let plane = geo.h * geo.w;
        let t = geo.taps();
        let rows = geo.cin * t;
        let need_x = tape.requires_grad(self.x);
        let need_w = tape.requires_grad(self.w);
        let need_off = tape.requires_grad(self.offsets);
        let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
        let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut goff = need_off.then(|| vec![T::zero(); off.len()]);
        let mut col = vec![T::zero(); rows * plane];
        let mut gcol = vec![T::zero(); rows * plane];
        let in_sz = geo.cin * plane;
        for b in 0..geo.n {
            let fps = geo.footprints(off, b);
            let xn = &x[b * in_sz..(b + 1) * in_sz];
            let gy = &g[b * geo.cout * plane..(b + 1) * geo.cout * plane];
            if let Some(gw) = gw.as_mut() {
                geo.columns(xn, &fps, &mut col);
                gemm(Mat::new(gy, geo.cout, plane), Mat::t(&col, rows, plane), gw, true);
            }
            if !(need_x || need_off) {
                continue;
            }
            gemm(Mat::t(w, geo.cout, rows), Mat::new(gy, geo.cout, plane), &mut gcol, false);
            for ci in 0..geo.cin {
                let xc = &xn[ci * plane..(ci + 1) * plane];
                for tap in 0..t {
                    let grow = &gcol[(ci * t + tap) * plane..][..plane];
                    let fpr = &fps[tap * plane..(tap + 1) * plane];
                    if let Some(gx) = gx.as_mut() {
                        let gxc = &mut gx[b * in_sz + ci * plane..][..plane];
                        for (fp, gv) in fpr.iter().zip(grow) {
                            fp.scatter(gxc, gv.as_f64());
                        }
                    }
                    if let Some(goff) = goff.as_mut() {
                        let base = (b * 2 * t + 2 * tap) * plane;
                        for (p, (fp, gv)) in fpr.iter().zip(grow).enumerate() {
                            let (sx, sy) = fp.slope(xc);
                            let gv = gv.as_f64();
                            goff[base + p] = goff[base + p] + T::of(gv * sx);
                            goff[base + plane + p] = goff[base + plane + p] + T::of(gv * sy);
                        }
                    }
                }
            }
        }
        vec![gx, gw, goff]
    }

    fn kink_margin(&self, tape: &Tape<T>) -> Option<f64> {
        if !tape.requires_grad(self.offsets) {
            return None;
        }
        // Structurally zero components keep their tap on the integer grid and
        // never move, so only non-zero displacements can cross a kink.
        Some(
            tape.data(self.offsets)
                .iter()
                .map(|v| v.as_f64())
                .filter(|&v| v != 0.0)
                .map(frac_margin)
                .fold(f64::INFINITY, f64::min),
        )
    }
}

// ---------------------------------------------------------------------------
// flow constraint and chain accumulation

/// Which side of the chain widens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowPattern {
    /// Magnitudes non-decreasing toward the positive side, non-increasing
    /// toward the negative side.
    Left,
    /// Mirror image of [`FlowPattern::Left`].
    Right,
    /// Per chain, widens toward whichever side carries the larger summed
    /// raw offset magnitude.
    Adaptive,
}

/// Kernel axis of a dynamic flow stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelAxis {
    /// `1 x K`, taps step along x and drift along y.
    Horizontal,
    /// `K x 1`, taps step along y and drift along x.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DfcKernelSpec {
    pub length: usize,
    pub axis: KernelAxis,
    pub pattern: Option<FlowPattern>,
}

impl DfcKernelSpec {
    pub fn new(length: usize, axis: KernelAxis, pattern: Option<FlowPattern>) -> Result<Self> {
        if length == 0 || length % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel length {length} must be odd")));
        }
        Ok(Self { length, axis, pattern })
    }

    pub fn center(&self) -> usize {
        (self.length - 1) / 2
    }
}

/// Result of constraining one chain: `out[s] = coeff[s] * raw[source[s]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedChain {
    pub values: Vec<f64>,
    pub source: Vec<usize>,
    pub coeff: Vec<f64>,
    /// Smallest distance to a max/min tie, a sign flip, or (adaptive) a side flip.
    pub margin: f64,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Applies the surface-tension constraint to one chain of per-step offsets.
///
/// The center step is kept. Walking outward, each step keeps its own sign
/// and takes either the larger (widening side) or the smaller (narrowing
/// side) of its own magnitude and the already-constrained inner neighbor's.
pub fn constrain_chain(raw: &[f64], pattern: FlowPattern) -> ConstrainedChain {
    let k = raw.len();
    let c = (k - 1) / 2;
    let mut values = raw.to_vec();
    let mut source: Vec<usize> = (0..k).collect();
    let mut coeff = vec![1.0f64; k];
    let mut margin = f64::INFINITY;

    let pos_sum: f64 = raw[c + 1..].iter().map(|v| v.abs()).sum();
    let neg_sum: f64 = raw[..c].iter().map(|v| v.abs()).sum();
    let pattern = match pattern {
        FlowPattern::Adaptive => {
            margin = margin.min((pos_sum - neg_sum).abs());
            if pos_sum >= neg_sum {
                FlowPattern::Left
            } else {
                FlowPattern::Right
            }
        }
        p => p,
    };
    let widen_positive = pattern == FlowPattern::Left;

    let mut step = |s: usize, inner: usize, widen: bool, values: &mut Vec<f64>| {
        let own = raw[s].abs();
        let prev = values[inner].abs();
        margin = margin.min(raw[s].abs()).min((own - prev).abs());
        let take_own = if widen { own >= prev } else { own <= prev };
        if take_own {
            values[s] = raw[s];
            source[s] = s;
            coeff[s] = 1.0;
        } else {
            let si = source[inner];
            values[s] = sgn(raw[s]) * prev;
            source[s] = si;
            coeff[s] = sgn(raw[s]) * coeff[inner].abs() * sgn(raw[si]);
        }
    };
    for s in c + 1..k {
        step(s, s - 1, widen_positive, &mut values);
    }
    for s in (0..c).rev() {
        step(s, s + 1, !widen_positive, &mut values);
    }
    ConstrainedChain { values, source, coeff, margin }
}

struct FlowConstraintOp {
    raw: Var,
    source: Vec<usize>,
    coeff: Vec<f64>,
    margin: f64,
}

impl<T: Scalar> Function<T> for FlowConstraintOp {
    fn name(&self) -> &'static str {
        "flow_constraint"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.raw]
    }

    fn backward(&self, _tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gr = vec![T::zero(); g.len()];
        for (i, (&src, &c)) in self.source.iter().zip(&self.coeff).enumerate() {
            gr[src] = gr[src] + g[i] * T::of(c);
        }
        vec![Some(gr)]
    }

    fn kink_margin(&self, _tape: &Tape<T>) -> Option<f64> {
        Some(self.margin)
    }
}

struct ChainPositionsOp {
    perp: Var,
    axis: KernelAxis,
    dims: [usize; 4],
}

impl<T: Scalar> Function<T> for ChainPositionsOp {
    fn name(&self) -> &'static str {
        "chain_positions"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.perp]
    }

    fn backward(&self, _tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, k, h, w] = self.dims;
        let plane = h * w;
        let c = (k - 1) / 2;
        let comp = match self.axis {
            KernelAxis::Horizontal => 1,
            KernelAxis::Vertical => 0,
        };
        let mut gp = vec![T::zero(); n * k * plane];
        for b in 0..n {
            for p in 0..plane {
                let gtap = |t: usize| g[(b * 2 * k + 2 * t + comp) * plane + p];
                // step s receives the gradient of every tap at or beyond it
                let mut acc = T::zero();
                for s in (c + 1..k).rev() {
                    acc = acc + gtap(s);
                    gp[(b * k + s) * plane + p] = acc;
                }
                acc = T::zero();
                for s in 0..c {
                    acc = acc + gtap(s);
                    gp[(b * k + s) * plane + p] = acc;
                }
            }
        }
        vec![Some(gp)]
    }
}

/// Absolute tap positions `(x, y)` of one stencil anchored at `(cx, cy)` for
/// a chain of constrained per-step perpendicular offsets.
pub fn tap_positions(spec: &DfcKernelSpec, perp: &[f64], cx: f64, cy: f64) -> Vec<(f64, f64)> {
    let drift = chain_drift(perp);
    let c = spec.center() as f64;
    drift
        .iter()
        .enumerate()
        .map(|(t, &d)| {
            let step = t as f64 - c;
            match spec.axis {
                KernelAxis::Horizontal => (cx + step, cy + d),
                KernelAxis::Vertical => (cx + d, cy + step),
            }
        })
        .collect()
}

/// Perpendicular displacement of every tap: the sum of the per-step offsets
/// strictly between the center and the tap, the tap's own step included.
pub fn chain_drift(perp: &[f64]) -> Vec<f64> {
    let k = perp.len();
    let c = (k - 1) / 2;
    let mut drift = vec![0.0; k];
    for s in c + 1..k {
        drift[s] = drift[s - 1] + perp[s];
    }
    for s in (0..c).rev() {
        drift[s] = drift[s + 1] + perp[s];
    }
    drift
}

impl<T: Scalar> Tape<T> {
    /// Samples `x [N, C, H, W]` at `points [N, P, 2]` (`(px, py)` pairs),
    /// giving `[N, C, P]`.
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("bilinear_sample", x)?;
        let p = match *self.shape(points) {
            [pn, p, 2] if pn == n => p,
            ref s => return Err(Error::shape("bilinear_sample", format!("points {s:?} != [{n}, P, 2]"))),
        };
        let (xd, pts) = (self.data(x), self.data(points));
        let plane = h * w;
        let mut out = vec![T::zero(); n * c * p];
        for b in 0..n {
            for k in 0..p {
                let base = (b * p + k) * 2;
                let fp = Footprint::at(pts[base].as_f64(), pts[base + 1].as_f64(), h, w);
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    out[(b * c + ch) * p + k] = T::of(fp.sample(&xd[off..off + plane]));
                }
            }
        }
        let value = Tensor::new([n, c, p], out)?;
        Ok(self.record(value, BilinearSampleOp { x, points }))
    }

    /// Deformable convolution (v1): each tap of a `kh x kw` kernel samples
    /// `x` bilinearly at its regular position plus a learned displacement.
    /// Stride 1, "same" padding, no bias.
    pub fn deformable_conv2d(&mut self, x: Var, w: Var, offsets: Var) -> Result<Var> {
        let [n, cin, h, wd] = self.dims4("deformable_conv2d", x)?;
        let [cout, wcin, kh, kw] = self.dims4("deformable_conv2d", w)?;
        if wcin != cin {
            return Err(Error::shape("deformable_conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("deformable_conv2d", "kernel extents must be odd"));
        }
        let want = [n, 2 * kh * kw, h, wd];
        if self.shape(offsets) != want {
            return Err(Error::shape("deformable_conv2d", format!("offsets {:?} != {want:?}", self.shape(offsets))));
        }
        let geo = DeformGeometry { n, cin, h, w: wd, cout, kh, kw };
        let plane = h * wd;
        let rows = cin * geo.taps();
        let (xd, wdat, off) = (self.data(x), self.data(w), self.data(offsets));
        let mut out = vec![T::zero(); n * cout * plane];
        let mut col = vec![T::zero(); rows * plane];
        for b in 0..n {
            let fps = geo.footprints(off, b);
            geo.columns(&xd[b * cin * plane..(b + 1) * cin * plane], &fps, &mut col);
            gemm(
                Mat::new(wdat, cout, rows),
                Mat::new(&col, rows, plane),
                &mut out[b * cout * plane..(b + 1) * cout * plane],
                false,
            );
        }
        let value = Tensor::new([n, cout, h, wd], out)?;
        Ok(self.record(value, DeformConvOp { x, w, offsets, geo }))
    }

    /// Applies [`constrain_chain`] to every `(n, h, w)` chain of a
    /// `[N, K, H, W]` per-step offset tensor.
    pub fn flow_constraint(&mut self, raw: Var, pattern: FlowPattern) -> Result<Var> {
        let [n, k, h, w] = self.dims4("flow_constraint", raw)?;
        if k % 2 == 0 {
            return Err(Error::shape("flow_constraint", format!("chain length {k} must be odd")));
        }
        let plane = h * w;
        let data = self.data(raw);
        let mut out = vec![T::zero(); data.len()];
        let mut source = vec![0usize; data.len()];
        let mut coeff = vec![0.0; data.len()];
        let mut margin = f64::INFINITY;
        let mut chain = vec![0.0; k];
        for b in 0..n {
            for p in 0..plane {
                let at = |s: usize| (b * k + s) * plane + p;
                for (s, v) in chain.iter_mut().enumerate() {
                    *v = data[at(s)].as_f64();
                }
                let res = constrain_chain(&chain, pattern);
                margin = margin.min(res.margin);
                for s in 0..k {
                    out[at(s)] = T::of(res.values[s]);
                    source[at(s)] = at(res.source[s]);
                    coeff[at(s)] = res.coeff[s];
                }
            }
        }
        let value = Tensor::new([n, k, h, w], out)?;
        Ok(self.record(value, FlowConstraintOp { raw, source, coeff, margin }))
    }

    /// Turns `[N, K, H, W]` constrained per-step offsets into the deformable
    /// offset field `[N, 2K, H, W]` of a `1 x K` (horizontal) or `K x 1`
    /// (vertical) stencil via outward running sums.
    pub fn chain_positions(&mut self, perp: Var, axis: KernelAxis) -> Result<Var> {
        let [n, k, h, w] = self.dims4("chain_positions", perp)?;
        if k % 2 == 0 {
            return Err(Error::shape("chain_positions", format!("chain length {k} must be odd")));
        }
        let plane = h * w;
        let data = self.data(perp);
        let comp = match axis {
            KernelAxis::Horizontal => 1,
            KernelAxis::Vertical => 0,
        };
        let mut out = vec![T::zero(); n * 2 * k * plane];
        let mut chain = vec![0.0; k];
        for b in 0..n {
            for p in 0..plane {
                for (s, v) in chain.iter_mut().enumerate() {
                    *v = data[(b * k + s) * plane + p].as_f64();
                }
                for (t, d) in chain_drift(&chain).into_iter().enumerate() {
                    out[(b * 2 * k + 2 * t + comp) * plane + p] = T::of(d);
                }
            }
        }
        let value = Tensor::new([n, 2 * k, h, w], out)?;
        Ok(self.record(value, ChainPositionsOp { perp, axis, dims: [n, k, h, w] }))
    }
}

// ---------------------------------------------------------------------------
// dynamic flow convolution

/// Weights of one constraint-pattern branch.
#[derive(Clone, Copy, Debug)]
pub struct DfcBranchWeights {
    /// `[2K, C, 3, 3]`: first `K` outputs drive the horizontal stencil's
    /// vertical drift, the next `K` the vertical stencil's horizontal drift.
    pub offset_w: Var,
    pub offset_b: Option<Var>,
    /// `[C, C, 1, K]`
    pub horizontal_w: Var,
    /// `[C, C, K, 1]`
    pub vertical_w: Var,
}

/// Left and right branches plus the `[C, 2C, 1, 1]` fusion convolution.
#[derive(Clone, Copy, Debug)]
pub struct DfcWeights {
    pub left: DfcBranchWeights,
    pub right: DfcBranchWeights,
    pub fuse_w: Var,
}

/// Standard 3x3 deformable convolution with a predicted offset field.
#[derive(Clone, Copy, Debug)]
pub struct NdcWeights {
    /// `[18, C, 3, 3]`
    pub offset_w: Var,
    pub offset_b: Option<Var>,
    /// `[C, C, 3, 3]`
    pub w: Var,
}

/// Local branch of a feature extraction unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConvVariant {
    /// No local branch.
    None,
    /// Plain deformable convolution.
    Ndc,
    /// Left-pattern branch only.
    Ldfc,
    /// Right-pattern branch only.
    Rdfc,
    /// Single branch choosing left/right per pixel.
    Adfc,
    /// Left and right branches fused by a 1x1 convolution.
    Dfc,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 6] = [
        ConvVariant::None,
        ConvVariant::Ndc,
        ConvVariant::Ldfc,
        ConvVariant::Rdfc,
        ConvVariant::Adfc,
        ConvVariant::Dfc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConvVariant::None => "none",
            ConvVariant::Ndc => "ndc",
            ConvVariant::Ldfc => "ldfc",
            ConvVariant::Rdfc => "rdfc",
            ConvVariant::Adfc => "adfc",
            ConvVariant::Dfc => "dfc",
        }
    }

    /// Constraint pattern of the single-branch variants.
    pub fn single_pattern(self) -> Option<FlowPattern> {
        match self {
            ConvVariant::Ldfc => Some(FlowPattern::Left),
            ConvVariant::Rdfc => Some(FlowPattern::Right),
            ConvVariant::Adfc => Some(FlowPattern::Adaptive),
            _ => None,
        }
    }
}

impl fmt::Display for ConvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConvVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown conv variant {s:?}")))
    }
}

/// Resolved local-branch weights.
#[derive(Clone, Copy, Debug)]
pub enum FlowConvWeights {
    None,
    Ndc(NdcWeights),
    Single(FlowPattern, DfcBranchWeights),
    Dual(DfcWeights),
}

fn bounded_offsets<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>, max_offset: f64) -> Result<Var> {
    let raw = tape.conv2d(x, w, b, 1, 1)?;
    let squashed = tape.tanh(raw);
    Ok(tape.scale(squashed, max_offset))
}

/// One dynamic flow convolution branch with a fixed constraint pattern.
pub fn dfc_branch<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weights: &DfcBranchWeights,
    pattern: FlowPattern,
    max_offset: f64,
) -> Result<Var> {
    let [_, c, _, _] = tape.dims4("dfc_branch", x)?;
    let [two_k, oc, _, _] = tape.dims4("dfc_branch", weights.offset_w)?;
    if oc != c || two_k % 2 != 0 {
        return Err(Error::shape(
            "dfc_branch",
            format!("offset predictor {:?} for {c} channels", tape.shape(weights.offset_w)),
        ));
    }
    let k = two_k / 2;
    let hw = tape.shape(weights.horizontal_w).to_vec();
    let vw = tape.shape(weights.vertical_w).to_vec();
    if hw != [c, c, 1, k] || vw != [c, c, k, 1] {
        return Err(Error::shape(
            "dfc_branch",
            format!("axis kernels {hw:?} / {vw:?} must be [{c}, {c}, 1, {k}] / [{c}, {c}, {k}, 1]"),
        ));
    }
    let raw = bounded_offsets(tape, x, weights.offset_w, weights.offset_b, max_offset)?;
    let h_raw = tape.slice_channels(raw, 0, k)?;
    let v_raw = tape.slice_channels(raw, k, k)?;
    let h_con = tape.flow_constraint(h_raw, pattern)?;
    let v_con = tape.flow_constraint(v_raw, pattern)?;
    let h_off = tape.chain_positions(h_con, KernelAxis::Horizontal)?;
    let v_off = tape.chain_positions(v_con, KernelAxis::Vertical)?;
    let yh = tape.deformable_conv2d(x, weights.horizontal_w, h_off)?;
    let yv = tape.deformable_conv2d(x, weights.vertical_w, v_off)?;
    tape.add(yh, yv)
}

/// Left and right branches concatenated and fused back to `C` channels.
pub fn dfc<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: &DfcWeights, max_offset: f64) -> Result<Var> {
    let left = dfc_branch(tape, x, &weights.left, FlowPattern::Left, max_offset)?;
    let right = dfc_branch(tape, x, &weights.right, FlowPattern::Right, max_offset)?;
    let both = tape.concat_channels(&[left, right])?;
    tape.conv2d(both, weights.fuse_w, None, 1, 0)
}

/// Plain deformable convolution with a bounded predicted offset field.
pub fn ndc<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: &NdcWeights, max_offset: f64) -> Result<Var> {
    let off = bounded_offsets(tape, x, weights.offset_w, weights.offset_b, max_offset)?;
    tape.deformable_conv2d(x, weights.w, off)
}

/// Runs the configured local branch; `None` when the variant has none.
pub fn flow_conv<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weights: &FlowConvWeights,
    max_offset: f64,
) -> Result<Option<Var>> {
    Ok(match weights {
        FlowConvWeights::None => None,
        FlowConvWeights::Ndc(w) => Some(ndc(tape, x, w, max_offset)?),
        FlowConvWeights::Single(p, w) => Some(dfc_branch(tape, x, w, *p, max_offset)?),
        FlowConvWeights::Dual(w) => Some(dfc(tape, x, w, max_offset)?),
    })
}

/// Number of recorded ops per op name, for checking which path executed.
pub fn op_census<T: Scalar>(tape: &Tape<T>) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for i in 0..tape.len() {
        if let Some(name) = tape.op_name(Var(i)) {
            *m.entry(name).or_insert(0) += 1;
        }
    }
    m
}
