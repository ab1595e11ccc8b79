//! Layout ops: reshape, index gathers, channel concat/slice, sub-pixel shuffles.

use super::tape::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct ReshapeOp {
    x: Var,
}

impl<T: Scalar> Function<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// `out[i] = x[index[i]]`; the backward pass scatter-adds.
struct GatherOp {
    x: Var,
    index: Vec<usize>,
    in_len: usize,
}

impl<T: Scalar> Function<T> for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.in_len];
        for (&src, &gv) in self.index.iter().zip(g) {
            gx[src] = gx[src] + gv;
        }
        vec![Some(gx)]
    }
}

struct ConcatOp {
    parts: Vec<Var>,
    channels: Vec<usize>,
    n: usize,
    plane: usize,
}

impl<T: Scalar> Function<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn inputs(&self) -> Vec<Var> {
        self.parts.clone()
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.parts.len());
        for (&part, &c) in self.parts.iter().zip(&self.channels) {
            if tape.requires_grad(part) {
                let mut gp = Vec::with_capacity(self.n * c * self.plane);
                for n in 0..self.n {
                    let start = (n * total + offset) * self.plane;
                    gp.extend_from_slice(&g[start..start + c * self.plane]);
                }
                grads.push(Some(gp));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }
}

struct SliceOp {
    x: Var,
    start: usize,
    len: usize,
    channels: usize,
    n: usize,
    plane: usize,
}

impl<T: Scalar> Function<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.n * self.channels * self.plane];
        let chunk = self.len * self.plane;
        for n in 0..self.n {
            let dst = (n * self.channels + self.start) * self.plane;
            gx[dst..dst + chunk].copy_from_slice(&g[n * chunk..(n + 1) * chunk]);
        }
        vec![Some(gx)]
    }
}

/// Source index of every output element of `pixel_shuffle` on `[n, c*r*r, h, w]`.
pub fn pixel_shuffle_indices(shape: [usize; 4], r: usize) -> Vec<usize> {
    let [n, cin, h, w] = shape;
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * cin * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let src_c = ch * r * r + (y % r) * r + (x % r);
                    idx.push(((b * cin + src_c) * h + y / r) * w + x / r);
                }
            }
        }
    }
    idx
}

/// Source index of every output element of `pixel_unshuffle` on `[n, c, h, w]`.
pub fn pixel_unshuffle_indices(shape: [usize; 4], r: usize) -> Vec<usize> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (h / r, w / r);
    let cout = c * r * r;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for oc in 0..cout {
            let (ch, sub) = (oc / (r * r), oc % (r * r));
            let (dy, dx) = (sub / r, sub % r);
            for y in 0..oh {
                for x in 0..ow {
                    idx.push(((b * c + ch) * h + y * r + dy) * w + x * r + dx);
                }
            }
        }
    }
    idx
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, ReshapeOp { x }))
    }

    /// Builds a tensor of `shape` whose element `i` is `x.flat[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("gather", "index length does not match output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let in_len = src.len();
        Ok(self.record(value, GatherOp { x, index, in_len }))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let [n, _, h, w] = self.dims4("concat", first)?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.dims4("concat", p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not match {:?}", self.shape(p), self.shape(first)),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.data(p);
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new([n, total, h, w], data)?;
        Ok(self.record(value, ConcatOp { parts: parts.to_vec(), channels, n, plane }))
    }

    /// Channels `start..start+len` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4("slice", x)?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice", format!("channels {start}..{} of {c}", start + len)));
        }
        let plane = h * w;
        let src = self.data(x);
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let s = (b * c + start) * plane;
            data.extend_from_slice(&src[s..s + len * plane]);
        }
        let value = Tensor::new([n, len, h, w], data)?;
        Ok(self.record(value, SliceOp { x, start, len, channels: c, n, plane }))
    }

    /// Sub-pixel rearrangement `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4("pixel_shuffle", x)?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", format!("{c} channels not divisible by r^2 = {}", r * r)));
        }
        let idx = pixel_shuffle_indices([n, c, h, w], r);
        self.gather(x, idx, &[n, c / (r * r), h * r, w * r])
    }

    /// Inverse of [`Tape::pixel_shuffle`]: `[N, C, H*r, W*r] -> [N, C*r*r, H, W]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4("pixel_unshuffle", x)?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("spatial {h}x{w} not divisible by {r}")));
        }
        let idx = pixel_unshuffle_indices([n, c, h, w], r);
        self.gather(x, idx, &[n, c * r * r, h / r, w / r])
    }
}
