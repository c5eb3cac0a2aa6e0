//! Direct convolution kernels on `(N, C, H, W)` tensors.
//!
//! `conv2d_backward_input` is the exact adjoint of `conv2d_forward` with
//! respect to the input, which is also what a transposed convolution
//! computes in its forward pass.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Geometry of one convolution, shared by the forward and both adjoints.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    /// Geometry for a convolution of `input_shape` with weights of shape
    /// `(c_out, c_in, k, k)`.
    pub fn new(
        op: &'static str,
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input_shape[..] else {
            return Err(Error::shape(op, input_shape, weight_shape, "input must be (N,C,H,W)"));
        };
        let [c_out, c_in, kh, kw] = weight_shape[..] else {
            return Err(Error::shape(op, input_shape, weight_shape, "weight must be (O,C,k,k)"));
        };
        if kh != kw {
            return Err(Error::shape(op, input_shape, weight_shape, "kernel must be square"));
        }
        if c != c_in {
            return Err(Error::shape(
                op,
                input_shape,
                weight_shape,
                format!("input has {c} channels, weight expects {c_in}"),
            ));
        }
        let (Some(ho), Some(wo)) = (
            output_extent(h, kh, stride, pad),
            output_extent(w, kw, stride, pad),
        ) else {
            return Err(Error::shape(
                op,
                input_shape,
                weight_shape,
                format!("spatial extent {h}x{w} with padding {pad} is smaller than kernel {kh}"),
            ));
        };
        Ok(Self {
            n,
            c_in,
            c_out,
            h,
            w,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Output positions `o` for which `o * stride + kidx - pad` lands in `[0, extent)`.
    fn valid_range(&self, kidx: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kidx as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off <= extent-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_incl = (extent as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_extent as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeom,
) -> Tensor {
    let mut out = Tensor::zeros(&g.output_shape());
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for o in 0..g.c_out {
            let ob = (n * g.c_out + o) * out_plane;
            let oplane = &mut od[ob..ob + out_plane];
            if let Some(b) = bias {
                oplane.iter_mut().for_each(|v| *v = b.data()[o]);
            }
            for c in 0..g.c_in {
                let ib = (n * g.c_in + c) * in_plane;
                let iplane = &xd[ib..ib + in_plane];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = wd[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut oplane[oy * g.wo..(oy + 1) * g.wo];
                            let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d_forward` with respect to its input.
pub(crate) fn conv2d_backward_input(grad_out: &Tensor, weight: &Tensor, g: &ConvGeom) -> Tensor {
    let mut gin = Tensor::zeros(&[g.n, g.c_in, g.h, g.w]);
    let gd = grad_out.data();
    let wd = weight.data();
    let id = gin.data_mut();
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for o in 0..g.c_out {
            let ob = (n * g.c_out + o) * out_plane;
            let gplane = &gd[ob..ob + out_plane];
            for c in 0..g.c_in {
                let ib = (n * g.c_in + c) * in_plane;
                let iplane = &mut id[ib..ib + in_plane];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = wd[((o * g.c_in + c) * g.k + ky) * g.k + kx];
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                            let irow = &mut iplane[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Accumulates the weight gradient of `conv2d_forward` into `grad_w`.
pub(crate) fn conv2d_backward_weight(
    x: &Tensor,
    grad_out: &Tensor,
    grad_w: &mut Tensor,
    g: &ConvGeom,
) {
    let xd = x.data();
    let gd = grad_out.data();
    let wd = grad_w.data_mut();
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for o in 0..g.c_out {
            let ob = (n * g.c_out + o) * out_plane;
            let gplane = &gd[ob..ob + out_plane];
            for c in 0..g.c_in {
                let ib = (n * g.c_in + c) * in_plane;
                let iplane = &xd[ib..ib + in_plane];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                            let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                        wd[((o * g.c_in + c) * g.k + ky) * g.k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Accumulates per-output-channel sums of `grad_out` into `grad_b`.
pub(crate) fn channel_sums(grad_out: &Tensor, grad_b: &mut Tensor) {
    let [n, c, h, w] = grad_out.shape()[..] else {
        unreachable!("channel_sums on non-4d tensor")
    };
    let plane = h * w;
    let gd = grad_out.data();
    let bd = grad_b.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            bd[ch] += gd[base..base + plane].iter().sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for &(extent, k, stride, pad) in &[(5, 3, 1, 1), (6, 3, 2, 1), (4, 2, 2, 0), (7, 1, 1, 0)] {
            let out = output_extent(extent, k, stride, pad).unwrap();
            let g = ConvGeom::new("t", &[1, 1, extent, extent], &[1, 1, k, k], stride, pad).unwrap();
            for kidx in 0..k {
                let brute: Vec<usize> = (0..out)
                    .filter(|&o| {
                        let p = (o * stride + kidx) as isize - pad as isize;
                        p >= 0 && (p as usize) < extent
                    })
                    .collect();
                let (lo, hi) = g.valid_range(kidx, extent, out);
                assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "{extent} {k} {stride} {pad} {kidx}");
            }
        }
    }
}
