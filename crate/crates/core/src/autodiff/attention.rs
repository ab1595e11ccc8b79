//! Shifted-window multi-head self-attention over `[N, C, H, W]` features.
//!
//! Composed entirely from tape primitives (gather, linear, bmm, softmax), so
//! its gradient falls out of theirs.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::tensor::Tensor;

/// Additive score for token pairs that straddle a shifted-window seam.
const MASK_FILL: f64 = -100.0;

/// Parameters of one attention layer, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    /// `[C, 3C]`, columns ordered query | key | value.
    pub qkv_w: Var,
    pub qkv_b: Option<Var>,
    /// `[C, C]`
    pub proj_w: Var,
    pub proj_b: Option<Var>,
    /// `[(2*window - 1)^2, heads]` relative position bias table.
    pub rel_bias: Option<Var>,
}

/// Relative-position lookup for a `window x window` token grid, row-major
/// `[T, T]` with `T = window^2`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        let (ay, ax) = (a / window, a % window);
        for b in 0..t {
            let (by, bx) = (b / window, b % window);
            let dy = ay + window - 1 - by;
            let dx = ax + window - 1 - bx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

fn region(coord: usize, extent: usize, window: usize, shift: usize) -> usize {
    if coord < extent - window {
        0
    } else if coord < extent - shift {
        1
    } else {
        2
    }
}

struct Layout {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    heads: usize,
}

impl Layout {
    fn windows_x(&self) -> usize {
        self.w / self.window
    }

    fn windows(&self) -> usize {
        (self.h / self.window) * self.windows_x()
    }

    fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    /// Shifted-frame coordinate of token `t` in window `win`.
    fn coords(&self, win: usize, t: usize) -> (usize, usize) {
        let (wy, wx) = (win / self.windows_x(), win % self.windows_x());
        (wy * self.window + t / self.window, wx * self.window + t % self.window)
    }

    /// `[N*nW*T, C]` token rows from the cyclically shifted image.
    fn partition_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.n * self.c * self.h * self.w);
        for n in 0..self.n {
            for win in 0..self.windows() {
                for t in 0..self.tokens() {
                    let (sy, sx) = self.coords(win, t);
                    let y = (sy + self.shift) % self.h;
                    let x = (sx + self.shift) % self.w;
                    for ch in 0..self.c {
                        idx.push(((n * self.c + ch) * self.h + y) * self.w + x);
                    }
                }
            }
        }
        idx
    }

    /// Inverse of [`Layout::partition_index`].
    fn merge_index(&self) -> Vec<usize> {
        let mut idx = vec![0; self.n * self.c * self.h * self.w];
        let mut row = 0;
        for n in 0..self.n {
            for win in 0..self.windows() {
                for t in 0..self.tokens() {
                    let (sy, sx) = self.coords(win, t);
                    let y = (sy + self.shift) % self.h;
                    let x = (sx + self.shift) % self.w;
                    for ch in 0..self.c {
                        idx[((n * self.c + ch) * self.h + y) * self.w + x] = row * self.c + ch;
                    }
                    row += 1;
                }
            }
        }
        idx
    }

    /// Picks one of query/key/value (`part` 0/1/2) as `[B*heads, T, d]`.
    fn head_split_index(&self, part: usize) -> Vec<usize> {
        let (t, d) = (self.tokens(), self.head_dim());
        let batches = self.n * self.windows();
        let mut idx = Vec::with_capacity(batches * self.c * t);
        for b in 0..batches {
            for hd in 0..self.heads {
                for tok in 0..t {
                    let base = (b * t + tok) * 3 * self.c + part * self.c + hd * d;
                    idx.extend(base..base + d);
                }
            }
        }
        idx
    }

    /// `[B*heads, T, d]` back to token rows `[B*T, C]`.
    fn head_merge_index(&self) -> Vec<usize> {
        let (t, d) = (self.tokens(), self.head_dim());
        let batches = self.n * self.windows();
        let mut idx = Vec::with_capacity(batches * t * self.c);
        for b in 0..batches {
            for tok in 0..t {
                for hd in 0..self.heads {
                    let base = ((b * self.heads + hd) * t + tok) * d;
                    idx.extend(base..base + d);
                }
            }
        }
        idx
    }

    fn bias_index(&self) -> Vec<usize> {
        let rel = relative_position_index(self.window);
        let batches = self.n * self.windows();
        let mut idx = Vec::with_capacity(batches * self.heads * rel.len());
        for _ in 0..batches {
            for hd in 0..self.heads {
                idx.extend(rel.iter().map(|&r| r * self.heads + hd));
            }
        }
        idx
    }

    fn shift_mask<T: Scalar>(&self) -> Tensor<T> {
        let t = self.tokens();
        let batches = self.n * self.windows();
        let mut data = Vec::with_capacity(batches * self.heads * t * t);
        for b in 0..batches {
            let win = b % self.windows();
            let label = |tok: usize| {
                let (sy, sx) = self.coords(win, tok);
                region(sy, self.h, self.window, self.shift) * 3 + region(sx, self.w, self.window, self.shift)
            };
            let labels: Vec<usize> = (0..t).map(label).collect();
            for _ in 0..self.heads {
                for a in 0..t {
                    for bb in 0..t {
                        let v = if labels[a] == labels[bb] { 0.0 } else { MASK_FILL };
                        data.push(T::of(v));
                    }
                }
            }
        }
        Tensor::from_fn([batches * self.heads, t, t], |i| data[i])
    }
}

impl<T: Scalar> Tape<T> {
    /// Multi-head self-attention within non-overlapping `window x window`
    /// patches, cyclically shifted by `shift` (with cross-seam masking).
    pub fn window_attention(
        &mut self,
        x: Var,
        weights: &AttentionWeights,
        window: usize,
        shift: usize,
        heads: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4("window_attention", x)?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape("window_attention", format!("spatial {h}x{w} not divisible by window {window}")));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("window_attention", format!("{c} channels not divisible by {heads} heads")));
        }
        if shift >= window {
            return Err(Error::InvalidArgument(format!("shift {shift} must be smaller than window {window}")));
        }
        let lay = Layout { n, c, h, w, window, shift, heads };
        let t = lay.tokens();
        let d = lay.head_dim();
        let rows = n * lay.windows() * t;
        let bh = n * lay.windows() * heads;

        let tokens = self.gather(x, lay.partition_index(), &[rows, c])?;
        let qkv = self.linear(tokens, weights.qkv_w, weights.qkv_b)?;
        let q = self.gather(qkv, lay.head_split_index(0), &[bh, t, d])?;
        let k = self.gather(qkv, lay.head_split_index(1), &[bh, t, d])?;
        let v = self.gather(qkv, lay.head_split_index(2), &[bh, t, d])?;

        let scores = self.bmm(q, k, true)?;
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(table) = weights.rel_bias {
            let want = [(2 * window - 1) * (2 * window - 1), heads];
            if self.shape(table) != want {
                return Err(Error::shape(
                    "window_attention",
                    format!("relative bias {:?} != {want:?}", self.shape(table)),
                ));
            }
            let bias = self.gather(table, lay.bias_index(), &[bh, t, t])?;
            scores = self.add(scores, bias)?;
        }
        if shift > 0 {
            let mask = self.constant(lay.shift_mask());
            scores = self.add(scores, mask)?;
        }
        let attn = self.softmax(scores)?;
        let ctx = self.bmm(attn, v, false)?;
        let merged = self.gather(ctx, lay.head_merge_index(), &[rows, c])?;
        let projected = self.linear(merged, weights.proj_w, weights.proj_b)?;
        self.gather(projected, lay.merge_index(), &[n, c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_and_merge_are_inverse() {
        let lay = Layout { n: 2, c: 3, h: 4, w: 8, window: 2, shift: 1, heads: 1 };
        let part = lay.partition_index();
        let merge = lay.merge_index();
        for (i, &m) in merge.iter().enumerate() {
            assert_eq!(part[m], i);
        }
    }

    #[test]
    fn relative_index_center_is_diagonal() {
        let idx = relative_position_index(2);
        // (0,0)-(0,0) maps to the center of the 3x3 table
        assert_eq!(idx[0], 4);
        assert_eq!(idx.iter().max(), Some(&8));
    }

    #[test]
    fn unshifted_mask_regions_collapse() {
        let lay = Layout { n: 1, c: 2, h: 4, w: 4, window: 2, shift: 1, heads: 1 };
        let mask: Tensor<f64> = lay.shift_mask();
        // first window is fully inside region 0: no masking
        assert!(mask.data()[..16].iter().all(|&v| v == 0.0));
        // last window straddles both seams
        assert!(mask.data()[48..].iter().any(|&v| v == MASK_FILL));
    }
}
