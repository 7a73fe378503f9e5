use ndarray::{s, Array2, Array4, ArrayView2, Ix2, Ix4};
use rand::Rng;

use super::{join, Module, Param, Slot};

/// How out-of-bounds taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Repeat the nearest edge pixel; a constant input stays constant.
    Replicate,
}

/// Square-kernel 2-D convolution computed as im2col followed by a single
/// matrix product over the whole batch.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Param,
    /// `[out]`
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: Padding,
}

pub struct ConvCache {
    /// `[in*k*k, n*ho*wo]`
    cols: Array2<f64>,
    input_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            pad_mode: Padding::Replicate,
        }
    }

    pub fn with_padding_mode(mut self, mode: Padding) -> Self {
        self.pad_mode = mode;
        self
    }

    /// Maps an output-grid tap to an input index, or `None` for a zero tap.
    #[inline]
    fn source(&self, i: isize, len: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < len {
            Some(i as usize)
        } else {
            match self.pad_mode {
                Padding::Zeros => None,
                Padding::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
            }
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        (
            (h + 2 * p - k) / self.stride + 1,
            (w + 2 * p - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x, ho, wo);
        let y = self.weight_matrix().dot(&cols);
        let mut out = Array4::<f64>::zeros((n, self.out_channels, ho, wo));
        let plane = ho * wo;
        for b in 0..n {
            let block = y.slice(s![.., b * plane..(b + 1) * plane]);
            let mut dst = out.slice_mut(s![b, .., .., ..]);
            for o in 0..self.out_channels {
                let bias = self.bias.as_ref().map_or(0.0, |p| p.value[[o]]);
                let src = block.row(o);
                for (d, v) in dst.slice_mut(s![o, .., ..]).iter_mut().zip(src.iter()) {
                    *d = v + bias;
                }
            }
        }
        let cache = ConvCache {
            cols,
            input_shape: [n, c, h, w],
            out_hw: (ho, wo),
        };
        (out, cache)
    }

    pub fn backward(&mut self, cache: ConvCache, dy: &Array4<f64>) -> Array4<f64> {
        let [n, c, h, w] = cache.input_shape;
        let (ho, wo) = cache.out_hw;
        let plane = ho * wo;
        let mut dy_mat = Array2::<f64>::zeros((self.out_channels, n * plane));
        for b in 0..n {
            for o in 0..self.out_channels {
                let src = dy.slice(s![b, o, .., ..]);
                for (d, v) in dy_mat
                    .slice_mut(s![o, b * plane..(b + 1) * plane])
                    .iter_mut()
                    .zip(src.iter())
                {
                    *d = *v;
                }
            }
        }

        let dw = dy_mat.dot(&cache.cols.t());
        {
            let mut g = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order(dw.dim())
                .expect("contiguous grad");
            g += &dw;
        }
        if let Some(bias) = self.bias.as_mut() {
            for o in 0..self.out_channels {
                bias.grad[[o]] += dy_mat.row(o).sum();
            }
        }

        let dcols = self.weight_matrix().t().dot(&dy_mat);
        self.col2im(&dcols, [n, c, h, w], ho, wo)
    }

    fn im2col(&self, x: &Array4<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let plane = ho * wo;
        let total = n * plane;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = vec![0.0; c * k * k * total];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_base = row * total;
                    for b in 0..n {
                        let img = (b * c + ci) * h * w;
                        for oy in 0..ho {
                            let Some(iy) = self.source((oy * s + ki) as isize - p as isize, h) else {
                                continue;
                            };
                            let src_row = img + iy * w;
                            let dst_row = row_base + b * plane + oy * wo;
                            for ox in 0..wo {
                                if let Some(ix) = self.source((ox * s + kj) as isize - p as isize, w) {
                                    cols[dst_row + ox] = xs[src_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, total), cols).expect("im2col shape")
    }

    fn col2im(&self, dcols: &Array2<f64>, shape: [usize; 4], ho: usize, wo: usize) -> Array4<f64> {
        let [n, c, h, w] = shape;
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let plane = ho * wo;
        let total = n * plane;
        let dcols = dcols.as_standard_layout();
        let ds = dcols.as_slice().expect("standard layout");
        let mut dx = vec![0.0; n * c * h * w];
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let row_base = row * total;
                    for b in 0..n {
                        let img = (b * c + ci) * h * w;
                        for oy in 0..ho {
                            let Some(iy) = self.source((oy * s + ki) as isize - p as isize, h) else {
                                continue;
                            };
                            let dst_row = img + iy * w;
                            let src_row = row_base + b * plane + oy * wo;
                            for ox in 0..wo {
                                if let Some(ix) = self.source((ox * s + kj) as isize - p as isize, w) {
                                    dx[dst_row + ix] += ds[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((n, c, h, w), dx).expect("col2im shape")
    }

    /// Weight as a 4-d view, mostly for tests.
    pub fn weight4(&self) -> ndarray::ArrayView4<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix4>().expect("4-d weight")
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution.
    fn naive(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.output_hw(h, w);
        let k = conv.kernel;
        let wt = conv.weight4();
        let mut out = Array4::zeros((n, conv.out_channels, ho, wo));
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value[[o]]);
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                                    if inside || conv.pad_mode == Padding::Replicate {
                                        let iy = iy.clamp(0, h as isize - 1) as usize;
                                        let ix = ix.clamp(0, w as isize - 1) as usize;
                                        acc += wt[[o, ci, ki, kj]] * x[[b, ci, iy, ix]];
                                    }
                                }
                            }
                        }
                        out[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [(3, 1, 1), (3, 2, 1), (1, 1, 0)];
        for (&(k, s, p), mode) in cases
            .iter()
            .flat_map(|c| [(c, Padding::Zeros), (c, Padding::Replicate)])
        {
            let mut conv = Conv2d::new(3, 4, k, s, p, true, &mut rng).with_padding_mode(mode);
            if let Some(b) = conv.bias.as_mut() {
                b.value.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
            }
            let x = Array4::from_shape_fn((2, 3, 6, 6), |(a, b, c, d)| {
                ((a * 7 + b * 5 + c * 3 + d) as f64 * 0.37).sin()
            });
            let (y, _) = conv.forward(&x);
            let expect = naive(&conv, &x);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replicate_padding_keeps_constants_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(2, 3, 3, 2, 1, false, &mut rng);
        let (y, _) = conv.forward(&Array4::from_elem((1, 2, 8, 8), 0.7));
        for o in 0..3 {
            let first = y[[0, o, 0, 0]];
            assert!(y.slice(s![0, o, .., ..]).iter().all(|v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn stride_two_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(1, 1, 3, 2, 1, false, &mut rng);
        assert_eq!(conv.output_hw(64, 64), (32, 32));
        assert_eq!(conv.output_hw(8, 6), (4, 3));
    }
}
