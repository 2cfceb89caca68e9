use ndarray::Array2;

use super::Shape;

/// Geometry of a 2-D convolution from an image of `channels × height × width`
/// to an `oh × ow` grid of patch positions. Transposed convolutions reuse the
/// same geometry with the roles of input and output swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        image: Shape,
        kernel: usize,
        stride: usize,
        padding: usize,
        oh: usize,
        ow: usize,
    ) -> Self {
        Self {
            channels: image.channels,
            height: image.height,
            width: image.width,
            kernel,
            stride,
            padding,
            oh,
            ow,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source pixel for a patch row and output position, if inside the image.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ki).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kj).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }

    /// `(batch, C·H·W)` images to `(C·k·k, batch·oh·ow)` patch columns.
    pub fn im2col_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let batch = x.nrows();
        let p = self.positions();
        let cols_w = batch * p;
        let mut cols = vec![0.0; self.patch_len() * cols_w];
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let k = self.kernel;
        for b in 0..batch {
            let img = &xs[b * self.image_len()..(b + 1) * self.image_len()];
            for c in 0..self.channels {
                let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let dst = &mut cols[row * cols_w + b * p..row * cols_w + (b + 1) * p];
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                if let Some((iy, ix)) = self.source(ki, kj, oy, ox) {
                                    dst[oy * self.ow + ox] = plane[iy * self.width + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((self.patch_len(), cols_w), cols).expect("cols shape")
    }

    /// Adjoint of [`Self::im2col_batch`]: scatters patch columns back onto images.
    pub fn col2im_batch(&self, cols: &Array2<f64>, batch: usize) -> Array2<f64> {
        let p = self.positions();
        let cols_w = batch * p;
        assert_eq!(cols.dim(), (self.patch_len(), cols_w));
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        let mut out = vec![0.0; batch * self.image_len()];
        let k = self.kernel;
        for b in 0..batch {
            let img = &mut out[b * self.image_len()..(b + 1) * self.image_len()];
            for c in 0..self.channels {
                let plane_len = self.height * self.width;
                let plane = &mut img[c * plane_len..(c + 1) * plane_len];
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let src = &cs[row * cols_w + b * p..row * cols_w + (b + 1) * p];
                        for oy in 0..self.oh {
                            for ox in 0..self.ow {
                                if let Some((iy, ix)) = self.source(ki, kj, oy, ox) {
                                    plane[iy * self.width + ix] += src[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((batch, self.image_len()), out).expect("image shape")
    }

    /// `(F, batch·P)` to `(batch, F·P)`.
    pub fn channel_major_to_batch(&self, m: &Array2<f64>, batch: usize) -> Array2<f64> {
        let f = m.nrows();
        let p = m.ncols() / batch;
        let m = m.as_standard_layout();
        let ms = m.as_slice().expect("standard layout");
        let mut out = vec![0.0; batch * f * p];
        for c in 0..f {
            for b in 0..batch {
                out[b * f * p + c * p..b * f * p + (c + 1) * p]
                    .copy_from_slice(&ms[c * batch * p + b * p..c * batch * p + (b + 1) * p]);
            }
        }
        Array2::from_shape_vec((batch, f * p), out).expect("batch shape")
    }

    /// `(batch, F·P)` to `(F, batch·P)`.
    pub fn batch_to_channel_major(&self, x: &Array2<f64>, f: usize) -> Array2<f64> {
        let batch = x.nrows();
        let p = x.ncols() / f;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; batch * f * p];
        for c in 0..f {
            for b in 0..batch {
                out[c * batch * p + b * p..c * batch * p + (b + 1) * p]
                    .copy_from_slice(&xs[b * f * p + c * p..b * f * p + (c + 1) * p]);
            }
        }
        Array2::from_shape_vec((f, batch * p), out).expect("channel-major shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for any x, c.
        let geom = ConvGeom::new(Shape::image(2, 5, 4), 3, 2, 1, 3, 2);
        let x = Array2::from_shape_fn((2, 40), |(i, j)| ((i * 40 + j) as f64 * 0.37).sin());
        let c = Array2::from_shape_fn((18, 12), |(i, j)| ((i * 12 + j) as f64 * 0.11).cos());
        let lhs = (geom.im2col_batch(&x) * &c).sum();
        let rhs = (x * geom.col2im_batch(&c, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn layout_conversions_invert() {
        let geom = ConvGeom::new(Shape::image(1, 1, 1), 1, 1, 0, 1, 1);
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64);
        let cm = geom.batch_to_channel_major(&x, 2);
        assert_eq!(geom.channel_major_to_batch(&cm, 3), x);
    }
}
