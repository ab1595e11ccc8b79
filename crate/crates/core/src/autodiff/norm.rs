//! Per-pixel channel LayerNorm and last-axis softmax.

use super::tape::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct LayerNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    /// Normalized activations `x_hat`, same layout as `x`.
    xhat: Vec<f64>,
    /// `1 / sqrt(var + eps)` per `(n, h, w)`.
    inv_std: Vec<f64>,
    dims: [usize; 4],
}

impl<T: Scalar> Function<T> for LayerNormOp {
    fn name(&self) -> &'static str {
        "layernorm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.dims;
        let plane = h * w;
        let gamma = tape.data(self.gamma);
        let mut gx = vec![T::zero(); g.len()];
        let mut gg = vec![0.0f64; c];
        let mut gb = vec![0.0f64; c];
        let inv_c = 1.0 / c as f64;
        for b in 0..n {
            for p in 0..plane {
                let at = |ch: usize| (b * c + ch) * plane + p;
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ch in 0..c {
                    let i = at(ch);
                    let gy = g[i].as_f64();
                    gg[ch] += gy * self.xhat[i];
                    gb[ch] += gy;
                    let dxhat = gy * gamma[ch].as_f64();
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * self.xhat[i];
                }
                let inv_std = self.inv_std[b * plane + p];
                for ch in 0..c {
                    let i = at(ch);
                    let dxhat = g[i].as_f64() * gamma[ch].as_f64();
                    let v = inv_std * (dxhat - inv_c * sum_dxhat - self.xhat[i] * inv_c * sum_dxhat_xhat);
                    gx[i] = T::of(v);
                }
            }
        }
        vec![Some(gx), Some(gg.into_iter().map(T::of).collect()), Some(gb.into_iter().map(T::of).collect())]
    }
}

struct SoftmaxOp {
    x: Var,
    last: usize,
}

impl<T: Scalar> Function<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, tape: &Tape<T>, out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let y = tape.data(out);
        let mut gx = vec![T::zero(); y.len()];
        for ((yr, gr), dst) in
            y.chunks_exact(self.last).zip(g.chunks_exact(self.last)).zip(gx.chunks_exact_mut(self.last))
        {
            let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
            for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - dot);
            }
        }
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    /// Normalizes each `(n, h, w)` location across its `C` channel values,
    /// then applies the per-channel affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.dims4("layernorm", x)?;
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layernorm eps must be > 0, got {eps}")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layernorm",
                format!("gamma {:?} / beta {:?} must both be [{c}]", self.shape(gamma), self.shape(beta)),
            ));
        }
        let plane = h * w;
        let xd = self.data(x);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0f64; xd.len()];
        let mut inv_std = vec![0.0f64; n * plane];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for p in 0..plane {
                let at = |ch: usize| (b * c + ch) * plane + p;
                let mean = (0..c).map(|ch| xd[at(ch)].as_f64()).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)].as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * plane + p] = is;
                for ch in 0..c {
                    let i = at(ch);
                    let xh = (xd[i].as_f64() - mean) * is;
                    xhat[i] = xh;
                    out[i] = T::of(xh * gm[ch].as_f64() + bt[ch].as_f64());
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.record(value, LayerNormOp { x, gamma, beta, xhat, inv_std, dims: [n, c, h, w] }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let last = *self.shape(x).last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        if last == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(last) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            let inv = T::one() / total;
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.record(value, SoftmaxOp { x, last }))
    }
}
