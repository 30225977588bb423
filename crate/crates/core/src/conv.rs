//! im2col convolution kernels with zero "same" padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Geometry of a 2-D cross-correlation over `[B, C, H, W]` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_pad(input: usize, out: usize, stride: usize, span: usize) -> usize {
    let needed = ((out - 1) * stride + span).saturating_sub(input);
    needed / 2
}

impl ConvGeom {
    /// Output is `ceil(H / s_h) x ceil(W / s_w)`; padding is split with the
    /// extra element (if odd) at the bottom/right.
    pub fn same(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        dilation: usize,
    ) -> Self {
        let out_h = input[2].div_ceil(stride.0);
        let out_w = input[3].div_ceil(stride.1);
        let span_h = dilation * (kernel[2] - 1) + 1;
        let span_w = dilation * (kernel[3] - 1) + 1;
        Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            in_h: input[2],
            in_w: input[3],
            kernel_h: kernel[2],
            kernel_w: kernel[3],
            stride,
            dilation,
            out_h,
            out_w,
            pad_top: same_pad(input[2], out_h, stride.0, span_h),
            pad_left: same_pad(input[3], out_w, stride.1, span_w),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output row/col `o` and tap `i`, or `None` in padding.
    #[inline]
    fn src(o: usize, stride: usize, tap: usize, dilation: usize, pad: usize, size: usize) -> Option<usize> {
        let pos = (o * stride + tap * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }

    /// Unfolds one batch item `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
    pub fn im2col<R: Real>(&self, image: &[R], col: &mut [R]) {
        let area = self.out_area();
        for c in 0..self.in_channels {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = (c * self.kernel_h + i) * self.kernel_w + j;
                    let dst = &mut col[row * area..(row + 1) * area];
                    for oh in 0..self.out_h {
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        match Self::src(oh, self.stride.0, i, self.dilation, self.pad_top, self.in_h) {
                            None => line.iter_mut().for_each(|v| *v = R::zero()),
                            Some(h) => {
                                let src_row = &plane[h * self.in_w..(h + 1) * self.in_w];
                                for (ow, v) in line.iter_mut().enumerate() {
                                    *v = match Self::src(ow, self.stride.1, j, self.dilation, self.pad_left, self.in_w) {
                                        Some(w) => src_row[w],
                                        None => R::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns back into an image.
    pub fn col2im<R: Real>(&self, col: &[R], image: &mut [R]) {
        let area = self.out_area();
        for c in 0..self.in_channels {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = (c * self.kernel_h + i) * self.kernel_w + j;
                    let src = &col[row * area..(row + 1) * area];
                    for oh in 0..self.out_h {
                        let Some(h) = Self::src(oh, self.stride.0, i, self.dilation, self.pad_top, self.in_h) else {
                            continue;
                        };
                        for ow in 0..self.out_w {
                            if let Some(w) = Self::src(ow, self.stride.1, j, self.dilation, self.pad_left, self.in_w) {
                                plane[h * self.in_w + w] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<R: Real>(&self, input: &[R], kernel: &[R]) -> Vec<R> {
        let in_item = self.in_channels * self.in_h * self.in_w;
        let out_item = self.out_channels * self.out_area();
        let mut out = vec![R::zero(); self.batch * out_item];
        let mut col = vec![R::zero(); self.col_rows() * self.out_area()];
        for b in 0..self.batch {
            self.im2col(&input[b * in_item..(b + 1) * in_item], &mut col);
            R::gemm(
                self.out_channels,
                self.col_rows(),
                self.out_area(),
                R::one(),
                kernel,
                false,
                &col,
                false,
                R::zero(),
                &mut out[b * out_item..(b + 1) * out_item],
            );
        }
        out
    }

    /// Accumulates input and kernel gradients. Columns are recomputed rather than stored.
    pub fn backward<R: Real>(
        &self,
        input: &[R],
        kernel: &[R],
        grad_out: &[R],
        mut grad_input: Option<&mut [R]>,
        mut grad_kernel: Option<&mut [R]>,
    ) {
        let in_item = self.in_channels * self.in_h * self.in_w;
        let out_item = self.out_channels * self.out_area();
        let (rows, area) = (self.col_rows(), self.out_area());
        let mut col = vec![R::zero(); rows * area];
        for b in 0..self.batch {
            let g = &grad_out[b * out_item..(b + 1) * out_item];
            if let Some(gk) = grad_kernel.as_deref_mut() {
                self.im2col(&input[b * in_item..(b + 1) * in_item], &mut col);
                R::gemm(self.out_channels, area, rows, R::one(), g, false, &col, true, R::one(), gk);
            }
            if let Some(gi) = grad_input.as_deref_mut() {
                R::gemm(rows, self.out_channels, area, R::one(), kernel, true, g, false, R::zero(), &mut col);
                self.col2im(&col, &mut gi[b * in_item..(b + 1) * in_item]);
            }
        }
    }
}
