//! Raw compute kernels on contiguous `C×H×W` slices.
//!
//! These are shared by the pure forward functions and the recorded
//! autograd operations, so both paths produce bit-identical values.

use super::tensor::Real;

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        groups: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
        (in_h, in_w): (usize, usize),
    ) -> Option<Self> {
        if groups == 0 || stride == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return None;
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            in_ch,
            out_ch,
            groups,
            kh,
            kw,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_per_group() * self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.kh * self.kw * self.in_per_group() * self.out_ch * self.out_h * self.out_w) as u64
    }

    /// Output column range `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.in_w + self.pad > kx {
            ((self.in_w - 1 + self.pad - kx) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }

    /// Visits every (out channel, in channel, weight index) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        for oc in 0..self.out_ch {
            let g = oc / opg;
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let widx = ((oc * ipg + icg) * self.kh + ky) * self.kw + kx;
                        f(oc, ic, widx, ky, kx);
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// Pointwise convolutions map whole planes to whole planes.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (o, &i) in y.iter_mut().zip(x) {
        *o = *o + a * i;
    }
}

/// Dot product with eight independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    acc.iter().copied().fold(tail, |s, v| s + v)
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(w.len(), g.weight_len());
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let mut out = vec![T::zero(); g.out_len()];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(plane_out).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[oc]);
        }
    }
    if g.is_pointwise() {
        g.for_each_tap(|oc, ic, widx, _, _| {
            axpy(&mut out[oc * plane_out..(oc + 1) * plane_out], w[widx], &x[ic * plane_in..(ic + 1) * plane_in]);
        });
        return out;
    }
    g.for_each_tap(|oc, ic, widx, ky, kx| {
        let wv = w[widx];
        let (lo, hi) = g.col_range(kx);
        if lo >= hi {
            return;
        }
        let xin = &x[ic * plane_in..(ic + 1) * plane_in];
        let yout = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for oy in 0..g.out_h {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let row_out = &mut yout[oy * g.out_w + lo..oy * g.out_w + hi];
            let base = iy * g.in_w + lo * g.stride + kx - g.pad;
            if g.stride == 1 {
                let row_in = &xin[base..base + (hi - lo)];
                for (o, &i) in row_out.iter_mut().zip(row_in) {
                    *o = *o + wv * i;
                }
            } else {
                for (j, o) in row_out.iter_mut().enumerate() {
                    *o = *o + wv * xin[base + j * g.stride];
                }
            }
        }
    });
    out
}

/// Gradient of the convolution output with respect to its input.
pub fn conv2d_backward_input<T: Real>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let mut gx = vec![T::zero(); g.in_len()];
    if g.is_pointwise() {
        g.for_each_tap(|oc, ic, widx, _, _| {
            axpy(&mut gx[ic * plane_in..(ic + 1) * plane_in], w[widx], &gy[oc * plane_out..(oc + 1) * plane_out]);
        });
        return gx;
    }
    g.for_each_tap(|oc, ic, widx, ky, kx| {
        let wv = w[widx];
        let (lo, hi) = g.col_range(kx);
        if lo >= hi {
            return;
        }
        let gyo = &gy[oc * plane_out..(oc + 1) * plane_out];
        let gxi = &mut gx[ic * plane_in..(ic + 1) * plane_in];
        for oy in 0..g.out_h {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let row_gy = &gyo[oy * g.out_w + lo..oy * g.out_w + hi];
            let base = iy * g.in_w + lo * g.stride + kx - g.pad;
            if g.stride == 1 {
                let row_gx = &mut gxi[base..base + (hi - lo)];
                for (o, &d) in row_gx.iter_mut().zip(row_gy) {
                    *o = *o + wv * d;
                }
            } else {
                for (j, &d) in row_gy.iter().enumerate() {
                    let o = &mut gxi[base + j * g.stride];
                    *o = *o + wv * d;
                }
            }
        }
    });
    gx
}

/// Gradient of the convolution output with respect to its weights.
pub fn conv2d_backward_weight<T: Real>(gy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let mut gw = vec![T::zero(); g.weight_len()];
    if g.is_pointwise() {
        g.for_each_tap(|oc, ic, widx, _, _| {
            gw[widx] = dot(&gy[oc * plane_out..(oc + 1) * plane_out], &x[ic * plane_in..(ic + 1) * plane_in]);
        });
        return gw;
    }
    g.for_each_tap(|oc, ic, widx, ky, kx| {
        let (lo, hi) = g.col_range(kx);
        if lo >= hi {
            return;
        }
        let gyo = &gy[oc * plane_out..(oc + 1) * plane_out];
        let xin = &x[ic * plane_in..(ic + 1) * plane_in];
        let mut acc = T::zero();
        for oy in 0..g.out_h {
            let Some(iy) = g.in_row(oy, ky) else { continue };
            let row_gy = &gyo[oy * g.out_w + lo..oy * g.out_w + hi];
            let base = iy * g.in_w + lo * g.stride + kx - g.pad;
            if g.stride == 1 {
                let row_in = &xin[base..base + (hi - lo)];
                acc = acc + dot(row_gy, row_in);
            } else {
                for (j, &d) in row_gy.iter().enumerate() {
                    acc = acc + d * xin[base + j * g.stride];
                }
            }
        }
        gw[widx] = gw[widx] + acc;
    });
    gw
}

/// Per-channel `(x - mean) / sqrt(var + eps)` factors as `(a, b)` with `xhat = a*x + b`.
pub fn norm_factors<T: Real>(mean: &[T], var: &[T], eps: T) -> Vec<(T, T)> {
    mean.iter()
        .zip(var)
        .map(|(&m, &v)| {
            let a = T::one() / (v + eps).sqrt();
            (a, -m * a)
        })
        .collect()
}

pub fn relu6<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::of(6.0))
}

/// Half-pixel-center source coordinate and blend weight for one output index.
///
/// `src = (dst + 0.5) * in / out - 0.5`, clamped below at 0; the upper
/// neighbour is clamped to `in - 1`.
pub fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize of one `in_h×in_w` plane into `out_h×out_w`.
pub fn resize_plane(src: &[f32], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if in_h == out_h && in_w == out_w {
        return src.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_source(x, in_w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = bilinear_source(y, in_h, out_h);
        for &(x0, x1, fx) in &cols {
            let a = src[y0 * in_w + x0] as f64;
            let b = src[y0 * in_w + x1] as f64;
            let c = src[y1 * in_w + x0] as f64;
            let d = src[y1 * in_w + x1] as f64;
            let top = a + (b - a) * fx;
            let bot = c + (d - c) * fx;
            out.push((top + (bot - top) * fy) as f32);
        }
    }
    out
}
