//! Patch unrolling for batched NCHW convolutions.
//!
//! Columns are laid out as `[channels * k * k, batch * out_h * out_w]` so a
//! whole batch goes through a single GEMM.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            conv_out(self.height, self.kernel, self.stride, self.padding),
            conv_out(self.width, self.kernel, self.stride, self.padding),
        )
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.batch * oh * ow
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let mut cols = vec![0.0; g.rows() * ncols];
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * g.height * g.width..];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.width..];
                        let drow = &mut dst[n * plane + oy * ow..];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                drow[ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an NCHW buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    let k = g.kernel;
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let base = (n * g.channels + c) * g.height * g.width;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let srow = &src[n * plane + oy * ow..];
                        let drow = base + iy as usize * g.width;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                x[drow + ix as usize] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// NCHW `[n, c, p]` to channel-major `[c, n * p]`.
pub(crate) fn to_channel_major(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[(n * channels + c) * plane..][..plane];
            out[c * batch * plane + n * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn from_channel_major(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let src = &x[c * batch * plane + n * plane..][..plane];
            out[(n * channels + c) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 2,
            channels: 3,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let n = g.batch * g.channels * g.height * g.width;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols_len = g.rows() * g.cols();
        let y: Vec<f64> = (0..cols_len).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let cm = to_channel_major(&x, 2, 3, 4);
        assert_eq!(cm[4], 12.0);
        assert_eq!(from_channel_major(&cm, 2, 3, 4), x);
    }
}
