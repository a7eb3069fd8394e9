//! Slice-level forward/backward kernels behind the graph ops.
//!
//! Everything here works on row-major `[B, C, H, W]` buffers and knows
//! nothing about the graph; shape validation happens in the caller.

use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` for row-major operands, where `a` is logically
/// `[m, k]` and `b` is logically `[k, n]`. A transposed operand is stored
/// in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || weight.len() != 4 {
            return Err(Error::mismatch("conv2d", x, weight));
        }
        let (batch, in_c, h, w) = (x[0], x[1], x[2], x[3]);
        let (out_c, w_in, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if w_in != in_c {
            return Err(Error::mismatch("conv2d", x, weight));
        }
        if kh != kw {
            return Err(Error::geometry("conv2d", "kernel must be square"));
        }
        if stride == 0 {
            return Err(Error::geometry("conv2d", "stride must be positive"));
        }
        let k = kh;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < k || pw < k {
            return Err(Error::geometry("conv2d", format!("padded input {ph}x{pw} smaller than kernel {k}")));
        }
        Ok(ConvGeom { batch, in_c, h, w, out_c, k, stride, pad, oh: (ph - k) / stride + 1, ow: (pw - k) / stride + 1 })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// One input and one output channel, no padding, unit stride: the
    /// fixed-window filtering case, where direct loops beat im2col.
    fn is_single_plane(&self) -> bool {
        self.in_c == 1 && self.out_c == 1 && self.stride == 1 && self.pad == 0
    }
}

fn plane_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let b0 = bias.map_or(0.0, |b| b[0]);
    let mut out = vec![b0; g.batch * ohw];
    for b in 0..g.batch {
        let xs = &x[b * hw..(b + 1) * hw];
        let ys = &mut out[b * ohw..(b + 1) * ohw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let wt = weight[ki * g.k + kj];
                for oy in 0..g.oh {
                    let src = &xs[(oy + ki) * g.w + kj..(oy + ki) * g.w + kj + g.ow];
                    let dst = &mut ys[oy * g.ow..(oy + 1) * g.ow];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
                }
            }
        }
    }
    out
}

fn plane_backward(x: &[f64], weight: &[f64], dout: &[f64], g: &ConvGeom, need: [bool; 3]) -> ConvGrads {
    let [need_dx, need_dw, need_db] = need;
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut dx = need_dx.then(|| vec![0.0; g.batch * hw]);
    let mut dw = need_dw.then(|| vec![0.0; weight.len()]);
    let db = need_db.then(|| vec![dout.iter().sum::<f64>()]);
    for b in 0..g.batch {
        let xs = &x[b * hw..(b + 1) * hw];
        let dys = &dout[b * ohw..(b + 1) * ohw];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let idx = ki * g.k + kj;
                for oy in 0..g.oh {
                    let off = (oy + ki) * g.w + kj;
                    let dy = &dys[oy * g.ow..(oy + 1) * g.ow];
                    if let Some(dw) = dw.as_mut() {
                        dw[idx] += dy.iter().zip(&xs[off..off + g.ow]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wt = weight[idx];
                        let dst = &mut dx[b * hw + off..b * hw + off + g.ow];
                        dst.iter_mut().zip(dy).for_each(|(d, s)| *d += wt * s);
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.oh * g.ow;
    for c in 0..g.in_c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.oh * g.ow;
    for c in 0..g.in_c {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    if g.is_single_plane() {
        return plane_forward(x, weight, bias, g);
    }
    let in_sz = g.in_c * g.h * g.w;
    let out_sz = g.out_c * g.oh * g.ow;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
    for b in 0..g.batch {
        let xs = &x[b * in_sz..(b + 1) * in_sz];
        let ys = &mut out[b * out_sz..(b + 1) * out_sz];
        let src = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(g.out_c, rows, ncols, weight, false, src, false, ys, false);
        if let Some(bias) = bias {
            for (o, chunk) in ys.chunks_mut(ncols).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(x: &[f64], weight: &[f64], dout: &[f64], g: &ConvGeom, need: [bool; 3]) -> ConvGrads {
    if g.is_single_plane() {
        return plane_backward(x, weight, dout, g, need);
    }
    let [need_dx, need_dw, need_db] = need;
    let in_sz = g.in_c * g.h * g.w;
    let out_sz = g.out_c * g.oh * g.ow;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dx = need_dx.then(|| vec![0.0; g.batch * in_sz]);
    let mut dw = need_dw.then(|| vec![0.0; weight.len()]);
    let mut db = need_db.then(|| vec![0.0; g.out_c]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut dcols = vec![0.0; if need_dx && !g.is_pointwise() { rows * ncols } else { 0 }];
    for b in 0..g.batch {
        let xs = &x[b * in_sz..(b + 1) * in_sz];
        let dys = &dout[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let src = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW[o, r] += Σ_j dY[o, j] · cols[r, j]
            gemm(g.out_c, ncols, rows, dys, false, src, true, dw, true);
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dys.chunks(ncols).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.out_c, ncols, weight, true, dys, false, dxs, true);
            } else {
                gemm(rows, g.out_c, ncols, weight, true, dys, false, &mut dcols, false);
                col2im(&dcols, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping max pooling. Returns the pooled values and, per output
/// cell, the flat input index that produced it (first maximum in row-major
/// window order).
pub(crate) fn maxpool_forward(x: &[f64], shape: &[usize], f: usize) -> (Vec<f64>, Vec<usize>) {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / f, w / f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * f * w + ox * f;
                for dy in 0..f {
                    for dx in 0..f {
                        let idx = base + (oy * f + dy) * w + ox * f + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avgpool_forward(x: &[f64], shape: &[usize], f: usize) -> Vec<f64> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                // Shifted by the first cell so constant windows average exactly.
                let pivot = x[base + oy * f * w + ox * f];
                let mut s = 0.0;
                for dy in 0..f {
                    let row = base + (oy * f + dy) * w + ox * f;
                    s += x[row..row + f].iter().map(|v| v - pivot).sum::<f64>();
                }
                out.push(pivot + s * norm);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(dout: &[f64], shape: &[usize], f: usize) -> Vec<f64> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(p * oh + oy) * ow + ox] * norm;
                for dy in 0..f {
                    let row = p * h * w + (oy * f + dy) * w + ox * f;
                    dx[row..row + f].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// Per-axis interpolation taps for half-pixel-centre bilinear resampling:
/// output index `d` reads source `s = (d + 0.5)/f - 0.5`, clamped to
/// `[0, n - 1]`, blended between `floor(s)` and its right neighbour.
pub(crate) fn bilinear_taps(n: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..n * f)
        .map(|d| {
            let s = ((d as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], shape: &[usize], f: usize) -> Vec<f64> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * f, w * f);
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, wx) in &tx {
                let top = r0[x0] + wx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + wx * (r1[x1] - r1[x0]);
                out.push(top + wy * (bot - top));
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dout: &[f64], shape: &[usize], f: usize) -> Vec<f64> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * f, w * f);
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dst[y0 * w + x1] += (1.0 - wy) * wx * g;
                dst[y1 * w + x0] += wy * (1.0 - wx) * g;
                dst[y1 * w + x1] += wy * wx * g;
            }
        }
    }
    dx
}

/// Batch statistics of a `[B, C, H, W]` buffer: per-channel mean and biased
/// variance over `B·H·W`.
pub(crate) fn channel_stats(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (b, c, hw) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            s += x[off..off + hw].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            v += x[off..off + hw].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

/// Applies `f(channel, value)` over every element, channel-aware.
pub(crate) fn map_channels(x: &[f64], shape: &[usize], mut f: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    let (c, hw) = (shape[1], shape[2..].iter().product::<usize>());
    x.iter().enumerate().map(|(i, &v)| f((i / hw) % c, v)).collect()
}

/// Per-channel sums of `a` (and of `a·b` when `b` is given).
pub(crate) fn channel_sums(a: &[f64], b: Option<&[f64]>, shape: &[usize]) -> Vec<f64> {
    let (c, hw) = (shape[1], shape[2..].iter().product::<usize>());
    let mut out = vec![0.0; c];
    for (i, &v) in a.iter().enumerate() {
        let ch = (i / hw) % c;
        out[ch] += match b {
            Some(b) => v * b[i],
            None => v,
        };
    }
    out
}
