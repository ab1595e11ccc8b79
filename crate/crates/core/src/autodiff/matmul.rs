//! Matrix products: plain 2D, batched, and the token-wise linear layer.

use super::tape::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::{Scalar, Tensor};

struct MatmulOp {
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<T: Scalar> Function<T> for MatmulOp {
    fn name(&self) -> &'static str {
        if self.batch == 0 {
            "matmul"
        } else {
            "bmm"
        }
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let batches = self.batch.max(1);
        let (a, b) = (tape.data(self.a), tape.data(self.b));
        let ga = tape.requires_grad(self.a).then(|| {
            let mut ga = vec![T::zero(); a.len()];
            for i in 0..batches {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &b[i * k * n..(i + 1) * k * n];
                // dA = dC * B^T  (B logical k x n)
                let bt = if self.trans_b { Mat::new(bi, n, k) } else { Mat::t(bi, k, n) };
                gemm(Mat::new(gi, m, n), bt, &mut ga[i * m * k..(i + 1) * m * k], false);
            }
            ga
        });
        let gb = tape.requires_grad(self.b).then(|| {
            let mut gb = vec![T::zero(); b.len()];
            for i in 0..batches {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &a[i * m * k..(i + 1) * m * k];
                let out = &mut gb[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    // B stored n x k: dB = dC^T * A
                    gemm(Mat::t(gi, m, n), Mat::new(ai, m, k), out, false);
                } else {
                    gemm(Mat::t(ai, m, k), Mat::new(gi, m, n), out, false);
                }
            }
            gb
        });
        vec![ga, gb]
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    cin: usize,
    cout: usize,
}

impl<T: Scalar> Function<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, tape: &Tape<T>, _out: Var, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (m, cin, cout) = (self.rows, self.cin, self.cout);
        let x = tape.data(self.x);
        let w = tape.data(self.w);
        let gx = tape.requires_grad(self.x).then(|| {
            let mut gx = vec![T::zero(); m * cin];
            gemm(Mat::new(g, m, cout), Mat::t(w, cin, cout), &mut gx, false);
            gx
        });
        let gw = tape.requires_grad(self.w).then(|| {
            let mut gw = vec![T::zero(); cin * cout];
            gemm(Mat::t(x, m, cin), Mat::new(g, m, cout), &mut gw, false);
            gw
        });
        let mut out = vec![gx, gw];
        if let Some(b) = self.b {
            out.push(tape.requires_grad(b).then(|| {
                let mut gb = vec![T::zero(); cout];
                for row in g.chunks_exact(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                gb
            }));
        }
        out
    }
}

impl<T: Scalar> Tape<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match *self.shape(a) {
            [m, k] => (m, k),
            ref s => return Err(Error::shape("matmul", format!("lhs must be 2D, got {s:?}"))),
        };
        let (k2, n) = match *self.shape(b) {
            [k2, n] => (k2, n),
            ref s => return Err(Error::shape("matmul", format!("rhs must be 2D, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(Mat::new(self.data(a), m, k), Mat::new(self.data(b), k, n), &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.record(value, MatmulOp { a, b, batch: 0, m, k, n, trans_b: false }))
    }

    /// Batched product `[B, M, K] x [B, K, N]`, or `[B, M, K] x [B, N, K]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k) = match *self.shape(a) {
            [bt, m, k] => (bt, m, k),
            ref s => return Err(Error::shape("bmm", format!("lhs must be 3D, got {s:?}"))),
        };
        let (batch2, k2, n) = match *self.shape(b) {
            [bt, r, c] if !trans_b => (bt, r, c),
            [bt, r, c] => (bt, c, r),
            ref s => return Err(Error::shape("bmm", format!("rhs must be 3D, got {s:?}"))),
        };
        if batch != batch2 || k != k2 {
            return Err(Error::shape("bmm", format!("{:?} incompatible with {:?}", self.shape(a), self.shape(b))));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ai = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bs = &bd[i * k * n..(i + 1) * k * n];
            let bi = if trans_b { Mat::t(bs, n, k) } else { Mat::new(bs, k, n) };
            gemm(ai, bi, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let value = Tensor::new([batch, m, n], out)?;
        Ok(self.record(value, MatmulOp { a, b, batch, m, k, n, trans_b }))
    }

    /// Token-wise affine map `x [M, Cin] * w [Cin, Cout] + b [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, cin) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("linear", format!("input must be 2D, got {s:?}"))),
        };
        let cout = match *self.shape(w) {
            [ci, co] if ci == cin => co,
            ref s => return Err(Error::shape("linear", format!("weight {s:?} does not accept {cin} input features"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("linear", format!("bias {:?} != [{cout}]", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bias = self.data(b);
            out.chunks_exact_mut(cout).for_each(|row| row.copy_from_slice(bias));
        }
        gemm(Mat::new(self.data(x), rows, cin), Mat::new(self.data(w), cin, cout), &mut out, b.is_some());
        let value = Tensor::new([rows, cout], out)?;
        Ok(self.record(value, LinearOp { x, w, b, rows, cin, cout }))
    }
}
