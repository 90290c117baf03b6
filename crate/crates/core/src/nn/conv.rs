//! im2col/col2im convolution kernels on single samples.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

/// Geometry of a strided, zero-padded window sweep over a `(channels, h, w)`
/// image producing `out_h × out_w` window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of an ordinary convolution; `None` if the window never fits.
    pub fn conv(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let span_h = in_h + 2 * padding;
        let span_w = in_w + 2 * padding;
        if span_h < kernel || span_w < kernel || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let v = (out * self.stride + k) as isize - self.padding as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }
}

/// Unfolds image patches into a `(channels·k·k, out_h·out_w)` matrix.
pub fn im2col(img: &[f64], g: &ConvGeom) -> Array2<f64> {
    debug_assert_eq!(img.len(), g.channels * g.in_h * g.in_w);
    let positions = g.positions();
    let mut cols = vec![0.0; g.rows() * positions];
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let Some(ii) = g.source(oi, ki, g.in_h) else {
                        continue;
                    };
                    let src_row = &plane[ii * g.in_w..(ii + 1) * g.in_w];
                    let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        if let Some(jj) = g.source(oj, kj, g.in_w) {
                            *d = src_row[jj];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), positions), cols).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub fn col2im(cols: &ArrayView2<f64>, g: &ConvGeom, img: &mut [f64]) {
    debug_assert_eq!(img.len(), g.channels * g.in_h * g.in_w);
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("contiguous");
    let positions = g.positions();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let Some(ii) = g.source(oi, ki, g.in_h) else {
                        continue;
                    };
                    let src_row = &src[oi * g.out_w..(oi + 1) * g.out_w];
                    let dst_row = &mut plane[ii * g.in_w..(ii + 1) * g.in_w];
                    for (oj, s) in src_row.iter().enumerate() {
                        if let Some(jj) = g.source(oj, kj, g.in_w) {
                            dst_row[jj] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `a · b`
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut out);
    out
}
