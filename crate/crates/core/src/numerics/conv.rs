//! Raw kernels for HWC convolution and 2x2 max pooling.

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn resolve(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {is:?} must be [H, W, C], kernel {ks:?} must be [k, k, C_in, C_out]"),
            ));
        }
        let (h, w, c_in) = (is[0], is[1], is[2]);
        let (k, c_out) = (ks[0], ks[3]);
        if ks[1] != k || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square and odd, got {ks:?}"),
            ));
        }
        if ks[2] != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("channel mismatch: input has {c_in}, kernel expects {}", ks[2]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (h_out, w_out, pad_top, pad_left) = match padding {
            Padding::Same => {
                let h_out = h.div_ceil(stride);
                let w_out = w.div_ceil(stride);
                let ph = ((h_out - 1) * stride + k).saturating_sub(h);
                let pw = ((w_out - 1) * stride + k).saturating_sub(w);
                (h_out, w_out, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::shape("conv2d", format!("input {h}x{w} smaller than kernel {k}")));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            h,
            w,
            c_in,
            k,
            c_out,
            stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
        })
    }

    /// Input coordinate for an output coordinate and kernel tap, if inside.
    #[inline]
    fn src(&self, o: usize, tap: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + tap) as isize - pad as isize;
        if p >= 0 && (p as usize) < limit {
            Some(p as usize)
        } else {
            None
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.h_out * g.w_out * g.c_out];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let obase = (oy * g.w_out + ox) * g.c_out;
            let acc = &mut out[obase..obase + g.c_out];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else {
                        continue;
                    };
                    let ibase = (iy * g.w + ix) * g.c_in;
                    let kbase = (ky * g.k + kx) * g.c_in * g.c_out;
                    for ci in 0..g.c_in {
                        let x = input[ibase + ci];
                        if x == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * g.c_out..kbase + (ci + 1) * g.c_out];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += x * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients for upstream gradient `grad_out`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
) {
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let obase = (oy * g.w_out + ox) * g.c_out;
            let go = &grad_out[obase..obase + g.c_out];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else {
                        continue;
                    };
                    let ibase = (iy * g.w + ix) * g.c_in;
                    let kbase = (ky * g.k + kx) * g.c_in * g.c_out;
                    for ci in 0..g.c_in {
                        let krange = kbase + ci * g.c_out..kbase + (ci + 1) * g.c_out;
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let krow = &kernel[krange.clone()];
                            let mut s = 0.0;
                            for (&a, &b) in go.iter().zip(krow) {
                                s += a * b;
                            }
                            gi[ibase + ci] += s;
                        }
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            let x = input[ibase + ci];
                            if x != 0.0 {
                                for (a, &b) in gk[krange].iter_mut().zip(go) {
                                    *a += x * b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `[H, W, C]`; returns output values and
/// the flat source index of every output element (first maximum wins).
pub(crate) fn max_pool2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 3 || !s[0].is_multiple_of(2) || !s[1].is_multiple_of(2) {
        return Err(Error::shape(
            "max_pool2",
            format!("need [H, W, C] with even H, W, got {s:?}"),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut arg = Vec::with_capacity(ho * wo * c);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best_i = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = src[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if src[i] > best {
                        best = src[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![ho, wo, c], out)?, arg))
}
