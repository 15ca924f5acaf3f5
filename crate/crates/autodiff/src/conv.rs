//! im2col / col2im kernels for NHWC convolution with zero "same" padding.

use crate::tensor::Element;

/// Output geometry of a square-kernel "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_padding(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(size);
    (out, needed / 2)
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        kernel: usize,
        out_c: usize,
        stride: usize,
    ) -> Self {
        let (out_h, pad_top) = same_padding(in_h, kernel, stride);
        let (out_w, pad_left) = same_padding(in_w, kernel, stride);
        Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel,
            stride,
            pad_top,
            pad_left,
        }
    }

    /// Rows of the patch matrix (one per output pixel).
    pub fn patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns of the patch matrix (one per kernel tap and input channel).
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    /// Maps output pixel and tap to a source pixel, `None` inside the padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

pub(crate) fn im2col<T: Element>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let c = g.in_c;
    let mut cols = vec![T::zero(); g.patches() * g.patch_len()];
    let mut row = 0;
    for n in 0..g.batch {
        let img = &input[n * g.in_h * g.in_w * c..(n + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * g.patch_len()..(row + 1) * g.patch_len()];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let off = (ky * g.kernel + kx) * c;
                            let src = (y * g.in_w + x) * c;
                            dst[off..off + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds patch-matrix gradients back onto the input layout.
pub(crate) fn col2im<T: Element>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let c = g.in_c;
    let mut out = vec![T::zero(); g.batch * g.in_h * g.in_w * c];
    let mut row = 0;
    for n in 0..g.batch {
        let img = &mut out[n * g.in_h * g.in_w * c..(n + 1) * g.in_h * g.in_w * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * g.patch_len()..(row + 1) * g.patch_len()];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let off = (ky * g.kernel + kx) * c;
                            let dst = (y * g.in_w + x) * c;
                            for (d, &s) in img[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                *d = *d + s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}
