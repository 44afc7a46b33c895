//! Patch gather/scatter used by strided 2-D convolutions and their transposes.
//!
//! Images are NHWC. A "grid" is the set of kernel anchor positions; for a
//! convolution it is the output, for a transposed convolution the input.
//! Grid position `(gy, gx)` with kernel offset `(ky, kx)` touches image pixel
//! `(gy * stride + ky - pad, gx * stride + kx - pad)` when that pixel exists.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PatchGeom {
    pub batch: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeom {
    pub fn rows(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    #[inline]
    fn pixel(&self, g: usize, k: usize) -> Option<usize> {
        let p = (g * self.stride + k) as isize - self.pad as isize;
        (p >= 0).then_some(p as usize)
    }
}

/// Output extent of a padded strided convolution.
pub(crate) fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Gathers patches into a `rows x cols` matrix with column order `(ky, kx, c)`.
pub(crate) fn im2col<T: Scalar>(img: &[T], geom: &PatchGeom) -> Vec<T> {
    let g = geom;
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    let img_stride_n = g.img_h * g.img_w * g.channels;
    for n in 0..g.batch {
        let img_n = &img[n * img_stride_n..(n + 1) * img_stride_n];
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let row = (n * g.grid_h + gy) * g.grid_w + gx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for ky in 0..g.kernel {
                    let Some(py) = g.pixel(gy, ky).filter(|&p| p < g.img_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(px) = g.pixel(gx, kx).filter(|&p| p < g.img_w) else {
                            continue;
                        };
                        let src = (py * g.img_w + px) * g.channels;
                        let off = (ky * g.kernel + kx) * g.channels;
                        dst[off..off + g.channels]
                            .copy_from_slice(&img_n[src..src + g.channels]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols_mat: &[T], geom: &PatchGeom) -> Vec<T> {
    let g = geom;
    let cols = g.cols();
    let img_stride_n = g.img_h * g.img_w * g.channels;
    let mut img = vec![T::zero(); g.batch * img_stride_n];
    for n in 0..g.batch {
        let img_n = &mut img[n * img_stride_n..(n + 1) * img_stride_n];
        for gy in 0..g.grid_h {
            for gx in 0..g.grid_w {
                let row = (n * g.grid_h + gy) * g.grid_w + gx;
                let src = &cols_mat[row * cols..(row + 1) * cols];
                for ky in 0..g.kernel {
                    let Some(py) = g.pixel(gy, ky).filter(|&p| p < g.img_h) else {
                        continue;
                    };
                    for kx in 0..g.kernel {
                        let Some(px) = g.pixel(gx, kx).filter(|&p| p < g.img_w) else {
                            continue;
                        };
                        let dst = (py * g.img_w + px) * g.channels;
                        let off = (ky * g.kernel + kx) * g.channels;
                        for c in 0..g.channels {
                            img_n[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    }
    img
}
