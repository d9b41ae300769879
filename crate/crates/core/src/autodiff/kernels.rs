//! Forward and backward kernels for the spatial operators.
//!
//! Convolution goes through im2col followed by one GEMM per batch item. The
//! GEMM is single threaded so every output element is summed in a fixed order.

use crate::error::{contract, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, c_in, h, w) = input.dims4()?;
        let (c_out, wc_in, kh, kw) = weight.dims4()?;
        contract!(
            wc_in == c_in,
            "conv2d: weight expects {} input channels, input has {}",
            wc_in,
            c_in
        );
        contract!(
            kh % 2 == 1 && kw % 2 == 1,
            "conv2d: kernel {}x{} must have odd sides",
            kh,
            kw
        );
        contract!(stride >= 1, "conv2d: stride must be positive");
        contract!(
            bias.shape() == [c_out],
            "conv2d: bias shape {:?} does not match {} output channels",
            bias.shape(),
            c_out
        );
        contract!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        );
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Element>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let hw_out = g.out_len();
    for ci in 0..g.c_in {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let hw_out = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let hw_out = g.out_len();
    let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * hw_out]
    };
    for b in 0..g.n {
        let image = &input[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * g.c_out * hw_out..(b + 1) * g.c_out * hw_out];
        let src = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        T::gemm(g.c_out, g.patch_len(), hw_out, weight, false, src, false, dst, false);
        for (co, plane) in dst.chunks_exact_mut(hw_out).enumerate() {
            let bv = bias[co];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

#[derive(Default)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let in_len = g.c_in * g.h * g.w;
    let hw_out = g.out_len();
    let out_len = g.c_out * hw_out;

    let mut grads = ConvGrads {
        input: need_input.then(|| vec![T::zero(); g.n * in_len]),
        weight: need_weight.then(|| vec![T::zero(); g.c_out * g.patch_len()]),
        bias: need_bias.then(|| vec![T::zero(); g.c_out]),
    };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * hw_out]
    };

    for b in 0..g.n {
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(db) = grads.bias.as_mut() {
            for (co, plane) in dy.chunks_exact(hw_out).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = grads.weight.as_mut() {
            let image = &input[b * in_len..(b + 1) * in_len];
            let src = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            T::gemm(g.c_out, hw_out, g.patch_len(), dy, false, src, true, dw, true);
        }
        if let Some(dx) = grads.input.as_mut() {
            let dst = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(g.c_in, g.c_out, hw_out, weight, true, dy, false, dst, true);
            } else {
                T::gemm(g.patch_len(), g.c_out, hw_out, weight, true, dy, false, &mut cols, false);
                col2im(g, &cols, dst);
            }
        }
    }
    grads
}

/// Interpolation table for one axis: `(lo, hi, weight_of_hi)` per output index.
///
/// Half-pixel centers (`align_corners = false`): output `o` samples source
/// coordinate `(o + 0.5) / factor - 0.5`, clamped at the borders.
fn axis_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    factor: usize,
    input: &[T],
) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = axis_taps(h, factor);
    let tx = axis_taps(w, factor);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (src, dst) in input.chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = r0[x0] + lx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + lx * (r1[x1] - r1[x0]);
                dst[oy * wo + ox] = top + ly * (bottom - top);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Element>(
    (n, c, h, w): (usize, usize, usize, usize),
    factor: usize,
    grad_out: &[T],
) -> Vec<T> {
    let (ho, wo) = (h * factor, w * factor);
    let ty = axis_taps(h, factor);
    let tx = axis_taps(w, factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (dy, dst) in grad_out.chunks_exact(ho * wo).zip(dx.chunks_exact_mut(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(1.0 - lx), T::of(lx));
                let g = dy[oy * wo + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Softmax over the channel axis of an NCHW buffer.
pub fn softmax_channel<T: Element>((n, c, h, w): (usize, usize, usize, usize), x: &[T]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(x[base + k * hw + p]);
            }
            let mut total = T::zero();
            for k in 0..c {
                let e = (x[base + k * hw + p] - max).exp();
                out[base + k * hw + p] = e;
                total += e;
            }
            for k in 0..c {
                out[base + k * hw + p] = out[base + k * hw + p] / total;
            }
        }
    }
    out
}
