//! Batched channels-last kernels. Every function works on raw row-major
//! slices; shapes are passed explicitly.

use crate::graph::{same_padding, Padding};

/// Sliding-window geometry over an `(N, H, W, C)` input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(input: &[usize], kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Window {
        let [n, h, w, c] = input[..] else {
            panic!("window input must be rank 4, got {input:?}")
        };
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (pad_top, pad_left, oh, ow) = match padding {
            Padding::Valid => (0, 0, (h - kh) / sh + 1, (w - kw) / sw + 1),
            Padding::Same => (
                same_padding(h, kh, sh).0,
                same_padding(w, kw, sw).0,
                h.div_ceil(sh),
                w.div_ceil(sw),
            ),
        };
        Window {
            n,
            h,
            w,
            c,
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            oh,
            ow,
        }
    }

    /// Input row/column for output position `o` and kernel offset `k`, if
    /// it falls inside the unpadded input.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < len)
    }

    #[inline]
    pub fn iy(&self, oy: usize, ky: usize) -> Option<usize> {
        Self::src(oy, ky, self.sh, self.pad_top, self.h)
    }

    #[inline]
    pub fn ix(&self, ox: usize, kx: usize) -> Option<usize> {
        Self::src(ox, kx, self.sw, self.pad_left, self.w)
    }

    #[inline]
    pub fn in_offset(&self, b: usize, iy: usize, ix: usize) -> usize {
        ((b * self.h + iy) * self.w + ix) * self.c
    }

    pub fn out_len(&self, channels: usize) -> usize {
        self.n * self.oh * self.ow * channels
    }
}

/// Kernel layout is `(kh, kw, c_in, c_out)`.
pub(crate) fn conv2d_forward(x: &[f64], g: &Window, kernel: &[f64], bias: Option<&[f64]>, co: usize) -> Vec<f64> {
    let ci = g.c;
    let mut out = vec![0.0; g.out_len(co)];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * co;
                let o = &mut out[o_off..o_off + co];
                if let Some(bias) = bias {
                    o.copy_from_slice(bias);
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.iy(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.ix(ox, kx) else { continue };
                        let xrow = &x[g.in_offset(b, iy, ix)..][..ci];
                        let wbase = (ky * g.kw + kx) * ci * co;
                        for (c, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &kernel[wbase + c * co..][..co];
                            for (acc, &wv) in o.iter_mut().zip(wrow) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel and bias gradients; returns the input gradient when
/// `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    g: &Window,
    kernel: &[f64],
    co: usize,
    dout: &[f64],
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let ci = g.c;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = dkernel;
    if let Some(db) = dbias {
        for row in dout.chunks_exact(co) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if dk.is_none() && dx.is_none() {
        return None;
    }
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * co;
                let go = &dout[o_off..o_off + co];
                for ky in 0..g.kh {
                    let Some(iy) = g.iy(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.ix(ox, kx) else { continue };
                        let x_off = g.in_offset(b, iy, ix);
                        let wbase = (ky * g.kw + kx) * ci * co;
                        for c in 0..ci {
                            let xv = x[x_off + c];
                            let woff = wbase + c * co;
                            if let Some(dk) = dk.as_deref_mut() {
                                if xv != 0.0 {
                                    for (d, &gv) in dk[woff..woff + co].iter_mut().zip(go) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wrow = &kernel[woff..woff + co];
                                let mut acc = 0.0;
                                for (&wv, &gv) in wrow.iter().zip(go) {
                                    acc += wv * gv;
                                }
                                dx[x_off + c] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling; padded positions never win. Returns outputs and, for every
/// output element, the flat input index of its first maximal entry in
/// row-major window order.
pub(crate) fn max_pool_forward(x: &[f64], g: &Window) -> (Vec<f64>, Vec<usize>) {
    let c = g.c;
    let mut out = vec![f64::NEG_INFINITY; g.out_len(c)];
    let mut arg = vec![usize::MAX; out.len()];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * c;
                for ky in 0..g.kh {
                    let Some(iy) = g.iy(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.ix(ox, kx) else { continue };
                        let x_off = g.in_offset(b, iy, ix);
                        for ch in 0..c {
                            let v = x[x_off + ch];
                            if arg[o_off + ch] == usize::MAX || v > out[o_off + ch] {
                                out[o_off + ch] = v;
                                arg[o_off + ch] = x_off + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(in_len: usize, arg: &[usize], dout: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&i, &g) in arg.iter().zip(dout) {
        dx[i] += g;
    }
    dx
}

/// Average pooling; the divisor counts only in-bounds positions.
pub(crate) fn avg_pool_forward(x: &[f64], g: &Window) -> Vec<f64> {
    let c = g.c;
    let mut out = vec![0.0; g.out_len(c)];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * c;
                let mut count = 0usize;
                for ky in 0..g.kh {
                    let Some(iy) = g.iy(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.ix(ox, kx) else { continue };
                        count += 1;
                        let x_off = g.in_offset(b, iy, ix);
                        for ch in 0..c {
                            out[o_off + ch] += x[x_off + ch];
                        }
                    }
                }
                let inv = 1.0 / count as f64;
                for v in &mut out[o_off..o_off + c] {
                    *v *= inv;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(in_len: usize, g: &Window, dout: &[f64]) -> Vec<f64> {
    let c = g.c;
    let mut dx = vec![0.0; in_len];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o_off = ((b * g.oh + oy) * g.ow + ox) * c;
                let taps: Vec<usize> = (0..g.kh)
                    .filter_map(|ky| g.iy(oy, ky))
                    .flat_map(|iy| (0..g.kw).filter_map(move |kx| g.ix(ox, kx).map(|ix| (iy, ix))))
                    .map(|(iy, ix)| g.in_offset(b, iy, ix))
                    .collect();
                let inv = 1.0 / taps.len() as f64;
                for x_off in taps {
                    for ch in 0..c {
                        dx[x_off + ch] += dout[o_off + ch] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// `(top, bottom, left, right)` zero padding of an `(N, H, W, C)` tensor.
pub(crate) fn zero_pad_forward(x: &[f64], dims: &[usize], pad: (usize, usize, usize, usize)) -> Vec<f64> {
    let [n, h, w, c] = dims[..] else {
        panic!("rank-4 input expected")
    };
    let (t, bo, l, r) = pad;
    let (oh, ow) = (h + t + bo, w + l + r);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            let src = ((b * h + y) * w) * c;
            let dst = ((b * oh + y + t) * ow + l) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

pub(crate) fn zero_pad_backward(dout: &[f64], dims: &[usize], pad: (usize, usize, usize, usize)) -> Vec<f64> {
    let [n, h, w, c] = dims[..] else {
        panic!("rank-4 input expected")
    };
    let (t, bo, l, r) = pad;
    let (oh, ow) = (h + t + bo, w + l + r);
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            let dst = ((b * h + y) * w) * c;
            let src = ((b * oh + y + t) * ow + l) * c;
            dx[dst..dst + w * c].copy_from_slice(&dout[src..src + w * c]);
        }
    }
    dx
}

/// `(N, in) x (in, units) + bias`.
pub(crate) fn dense_forward(x: &[f64], n: usize, kernel: &[f64], bias: Option<&[f64]>, units: usize) -> Vec<f64> {
    let fan_in = x.len() / n;
    let mut out = vec![0.0; n * units];
    for b in 0..n {
        let o = &mut out[b * units..(b + 1) * units];
        if let Some(bias) = bias {
            o.copy_from_slice(bias);
        }
        for (i, &xv) in x[b * fan_in..(b + 1) * fan_in].iter().enumerate() {
            let krow = &kernel[i * units..(i + 1) * units];
            for (acc, &kv) in o.iter_mut().zip(krow) {
                *acc += xv * kv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward(
    x: &[f64],
    n: usize,
    kernel: &[f64],
    units: usize,
    dout: &[f64],
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let fan_in = x.len() / n;
    if let Some(db) = dbias {
        for row in dout.chunks_exact(units) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if let Some(dk) = dkernel {
        for b in 0..n {
            let go = &dout[b * units..(b + 1) * units];
            for i in 0..fan_in {
                let xv = x[b * fan_in + i];
                for (d, &gv) in dk[i * units..(i + 1) * units].iter_mut().zip(go) {
                    *d += xv * gv;
                }
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; x.len()];
        for b in 0..n {
            let go = &dout[b * units..(b + 1) * units];
            for i in 0..fan_in {
                let krow = &kernel[i * units..(i + 1) * units];
                dx[b * fan_in + i] = krow.iter().zip(go).map(|(k, g)| k * g).sum();
            }
        }
        dx
    })
}

/// Mean over the spatial axes of `(N, H, W, C)`.
pub(crate) fn gap_forward(x: &[f64], dims: &[usize]) -> Vec<f64> {
    let [n, h, w, c] = dims[..] else {
        panic!("rank-4 input expected")
    };
    let hw = h * w;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        let o = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            let row = &x[(b * hw + p) * c..][..c];
            for (acc, &v) in o.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in o.iter_mut() {
            *v /= hw as f64;
        }
    }
    out
}

pub(crate) fn gap_backward(dout: &[f64], dims: &[usize]) -> Vec<f64> {
    let [n, h, w, c] = dims[..] else {
        panic!("rank-4 input expected")
    };
    let hw = h * w;
    let mut dx = vec![0.0; n * hw * c];
    for b in 0..n {
        let g = &dout[b * c..(b + 1) * c];
        for p in 0..hw {
            for (d, &gv) in dx[(b * hw + p) * c..][..c].iter_mut().zip(g) {
                *d = gv / hw as f64;
            }
        }
    }
    dx
}

/// Per-channel statistics of a channels-last tensor: `(mean, biased var)`.
pub(crate) fn channel_stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

/// Training-mode batch-norm input gradient given `dxhat = dy * gamma`.
pub(crate) fn batch_norm_backward_batch(dxhat: &[f64], xhat: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let c = inv_std.len();
    let m = (dxhat.len() / c) as f64;
    let mut sum_d = vec![0.0; c];
    let mut sum_dx = vec![0.0; c];
    for (drow, xrow) in dxhat.chunks_exact(c).zip(xhat.chunks_exact(c)) {
        for ch in 0..c {
            sum_d[ch] += drow[ch];
            sum_dx[ch] += drow[ch] * xrow[ch];
        }
    }
    let mut dx = vec![0.0; dxhat.len()];
    for ((out, drow), xrow) in dx
        .chunks_exact_mut(c)
        .zip(dxhat.chunks_exact(c))
        .zip(xhat.chunks_exact(c))
    {
        for ch in 0..c {
            out[ch] = inv_std[ch] / m * (m * drow[ch] - sum_d[ch] - xrow[ch] * sum_dx[ch]);
        }
    }
    dx
}
