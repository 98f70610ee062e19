// Raw loop kernels over row-major slices. Every reduction runs in a fixed
// order so results are bit-stable across runs.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one CHW sample into a `[c_in*k*k, oh*ow]` column matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto one CHW sample (accumulating).
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (kk, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); kk * p];
    for n in 0..g.n {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for o in 0..g.c_out {
            let row = &mut y[o * p..(o + 1) * p];
            row.fill(bias[o]);
            let wrow = &weight[o * kk..(o + 1) * kk];
            for (r, &wv) in wrow.iter().enumerate() {
                let col = &cols[r * p..(r + 1) * p];
                for (acc, &cv) in row.iter_mut().zip(col) {
                    *acc = *acc + wv * cv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Scalar>(g: &ConvGeom, x: &[T], weight: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (kk, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut dx = vec![T::zero(); g.n * in_len];
    let mut dw = vec![T::zero(); g.c_out * kk];
    let mut db = vec![T::zero(); g.c_out];
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    for n in 0..g.n {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        dcols.fill(T::zero());
        for o in 0..g.c_out {
            let drow = &dyn_[o * p..(o + 1) * p];
            db[o] = db[o] + drow.iter().copied().fold(T::zero(), |a, b| a + b);
            let wrow = &weight[o * kk..(o + 1) * kk];
            let dwrow = &mut dw[o * kk..(o + 1) * kk];
            for r in 0..kk {
                let col = &cols[r * p..(r + 1) * p];
                let mut acc = T::zero();
                for (&d, &c) in drow.iter().zip(col) {
                    acc = acc + d * c;
                }
                dwrow[r] = dwrow[r] + acc;
                let wv = wrow[r];
                let dcol = &mut dcols[r * p..(r + 1) * p];
                for (dc, &d) in dcol.iter_mut().zip(drow) {
                    *dc = *dc + wv * d;
                }
            }
        }
        col2im(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Window maxima plus the flat index of the first (row-major) maximum.
pub(crate) fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for pl in 0..g.planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best_idx = base + oy * g.stride * g.w + ox * g.stride;
                let mut best = x[best_idx];
                for wy in 0..g.window {
                    for wx in 0..g.window {
                        let idx = base + (oy * g.stride + wy) * g.w + ox * g.stride + wx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn gap_forward<T: Scalar>(planes: usize, hw: usize, x: &[T]) -> Vec<T> {
    let denom = T::from_usize(hw).expect("spatial size fits scalar");
    (0..planes)
        .map(|p| {
            let sum = x[p * hw..(p + 1) * hw].iter().copied().fold(T::zero(), |a, b| a + b);
            sum / denom
        })
        .collect()
}

/// `x[n, cin] · w[cout, cin]ᵀ + b[cout]`.
pub(crate) fn affine_forward<T: Scalar>(n: usize, c_in: usize, c_out: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c_out);
    for i in 0..n {
        let row = &x[i * c_in..(i + 1) * c_in];
        for o in 0..c_out {
            let wrow = &w[o * c_in..(o + 1) * c_in];
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(wrow) {
                acc = acc + a * b;
            }
            out.push(acc + b[o]);
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}
