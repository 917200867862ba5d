//! Convolutions on channel-last row matrices.
//!
//! Images are stored as `(n * h * w, channels)` matrices in NHWC order;
//! sequences as packed `(sum(lens), channels)` matrices.

use ndarray::{Array2, ArrayView2, Axis, Ix2};
use rand::Rng;

use super::{join, randn, uniform, Module, Param, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// 3x3 convolution, stride 1, zero padding 1, no bias.
#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct Conv2dCache<S> {
    cols: Array2<S>,
    shape: ImageShape,
}

impl<S: Real> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        // He initialization for rectifier networks
        let std = (2.0 / (9.0 * c_in as f64)).sqrt();
        Conv2d {
            weight: Param::new(randn(rng, &[9 * c_in, c_out], std)),
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &ArrayView2<S>, shape: ImageShape) -> Array2<S> {
        let ImageShape { n, h, w } = shape;
        let c = self.c_in;
        let mut cols = Array2::<S>::zeros((shape.rows(), 9 * c));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        for img in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = (img * h + y) * w + xx;
                    let out = &mut dst[row * 9 * c..(row + 1) * 9 * c];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let srow = (img * h + sy as usize) * w + sx as usize;
                            let k = ky * 3 + kx;
                            out[k * c..(k + 1) * c].copy_from_slice(&src[srow * c..(srow + 1) * c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<S>, shape: ImageShape) -> Array2<S> {
        let ImageShape { n, h, w } = shape;
        let c = self.c_in;
        let mut dx = Array2::<S>::zeros((shape.rows(), c));
        let src = dcols.as_slice().unwrap();
        let dst = dx.as_slice_mut().unwrap();
        for img in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = (img * h + y) * w + xx;
                    let cin = &src[row * 9 * c..(row + 1) * 9 * c];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let srow = (img * h + sy as usize) * w + sx as usize;
                            let k = ky * 3 + kx;
                            for (d, &g) in dst[srow * c..(srow + 1) * c].iter_mut().zip(&cin[k * c..(k + 1) * c]) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &ArrayView2<S>, shape: ImageShape) -> (Array2<S>, Conv2dCache<S>) {
        debug_assert_eq!(x.nrows(), shape.rows());
        debug_assert_eq!(x.ncols(), self.c_in);
        let cols = self.im2col(x, shape);
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let y = cols.dot(&wv);
        (y, Conv2dCache { cols, shape })
    }

    pub fn backward(&mut self, cache: Conv2dCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        if self.weight.trainable() {
            let dw = cache.cols.t().dot(dy);
            self.weight.accumulate(dw.view());
        }
        if !need_dx {
            return None;
        }
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dcols = dy.dot(&wv.t());
        Some(self.col2im(&dcols, cache.shape))
    }
}

impl<S: Real> Module<S> for Conv2d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
pub struct MaxPool2;

pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_rows: usize,
}

impl MaxPool2 {
    pub fn out_shape(shape: ImageShape) -> ImageShape {
        ImageShape {
            n: shape.n,
            h: shape.h / 2,
            w: shape.w / 2,
        }
    }

    pub fn forward<S: Real>(x: &ArrayView2<S>, shape: ImageShape) -> (Array2<S>, MaxPoolCache) {
        let c = x.ncols();
        let out = Self::out_shape(shape);
        let mut y = Array2::<S>::zeros((out.rows(), c));
        let mut argmax = vec![0usize; out.rows() * c];
        let xs = x.as_standard_layout();
        let src = xs.as_slice().unwrap();
        let dst = y.as_slice_mut().unwrap();
        for img in 0..out.n {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let orow = (img * out.h + oy) * out.w + ox;
                    for ch in 0..c {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let irow = (img * shape.h + 2 * oy + dy) * shape.w + 2 * ox + dx;
                                let v = src[irow * c + ch];
                                if v > best {
                                    best = v;
                                    best_idx = irow * c + ch;
                                }
                            }
                        }
                        dst[orow * c + ch] = best;
                        argmax[orow * c + ch] = best_idx;
                    }
                }
            }
        }
        (
            y,
            MaxPoolCache {
                argmax,
                in_rows: shape.rows(),
            },
        )
    }

    pub fn backward<S: Real>(cache: &MaxPoolCache, dy: &ArrayView2<S>) -> Array2<S> {
        let c = dy.ncols();
        let mut dx = Array2::<S>::zeros((cache.in_rows, c));
        let dst = dx.as_slice_mut().unwrap();
        for (g, &idx) in dy.iter().zip(&cache.argmax) {
            dst[idx] += *g;
        }
        dx
    }
}

/// Mean over the spatial positions of each image: `(n*h*w, c) -> (n, c)`.
pub fn global_avg_pool<S: Real>(x: &ArrayView2<S>, shape: ImageShape) -> Array2<S> {
    let hw = shape.h * shape.w;
    let mut y = Array2::<S>::zeros((shape.n, x.ncols()));
    let inv = S::lit(1.0 / hw as f64);
    for img in 0..shape.n {
        let block = x.slice(ndarray::s![img * hw..(img + 1) * hw, ..]);
        let mut row = y.row_mut(img);
        row.assign(&(block.sum_axis(Axis(0)) * inv));
    }
    y
}

pub fn global_avg_pool_backward<S: Real>(dy: &ArrayView2<S>, shape: ImageShape) -> Array2<S> {
    let hw = shape.h * shape.w;
    let inv = S::lit(1.0 / hw as f64);
    let mut dx = Array2::<S>::zeros((shape.rows(), dy.ncols()));
    for img in 0..shape.n {
        let g = dy.row(img).mapv(|v| v * inv);
        for r in 0..hw {
            dx.row_mut(img * hw + r).assign(&g);
        }
    }
    dx
}

/// 1-D convolution over time with an odd kernel, stride 1 and
/// length-preserving zero padding, applied independently to each packed
/// sequence.
#[derive(Clone, Debug)]
pub struct TemporalConv1d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct TemporalConvCache<S> {
    cols: Array2<S>,
    lens: Vec<usize>,
}

impl<S: Real> TemporalConv1d<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "temporal kernel must be odd");
        let bound = 1.0 / ((kernel * c_in) as f64).sqrt();
        TemporalConv1d {
            weight: Param::new(uniform(rng, &[kernel * c_in, c_out], bound)),
            bias: Param::new(uniform(rng, &[c_out], bound)),
            kernel,
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &ArrayView2<S>, lens: &[usize]) -> Array2<S> {
        let c = self.c_in;
        let k = self.kernel;
        let half = (k / 2) as isize;
        let mut cols = Array2::<S>::zeros((x.nrows(), k * c));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        let mut offset = 0;
        for &l in lens {
            for t in 0..l {
                let row = offset + t;
                for j in 0..k {
                    let st = t as isize + j as isize - half;
                    if st < 0 || st >= l as isize {
                        continue;
                    }
                    let srow = offset + st as usize;
                    dst[row * k * c + j * c..row * k * c + (j + 1) * c].copy_from_slice(&src[srow * c..(srow + 1) * c]);
                }
            }
            offset += l;
        }
        cols
    }

    pub fn forward(&self, x: &ArrayView2<S>, lens: &[usize]) -> (Array2<S>, TemporalConvCache<S>) {
        debug_assert_eq!(x.nrows(), lens.iter().sum::<usize>());
        let cols = self.im2col(x, lens);
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = cols.dot(&wv);
        y += &bv;
        (
            y,
            TemporalConvCache {
                cols,
                lens: lens.to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: TemporalConvCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        if self.weight.trainable() {
            self.weight.accumulate(cache.cols.t().dot(dy).view());
        }
        if self.bias.trainable() {
            self.bias.accumulate(dy.sum_axis(Axis(0)).view());
        }
        if !need_dx {
            return None;
        }
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dcols = dy.dot(&wv.t());
        let c = self.c_in;
        let k = self.kernel;
        let half = (k / 2) as isize;
        let mut dx = Array2::<S>::zeros((dy.nrows(), c));
        let src = dcols.as_slice().unwrap();
        let dst = dx.as_slice_mut().unwrap();
        let mut offset = 0;
        for &l in &cache.lens {
            for t in 0..l {
                let row = offset + t;
                for j in 0..k {
                    let st = t as isize + j as isize - half;
                    if st < 0 || st >= l as isize {
                        continue;
                    }
                    let srow = offset + st as usize;
                    for (d, &g) in dst[srow * c..(srow + 1) * c]
                        .iter_mut()
                        .zip(&src[row * k * c + j * c..row * k * c + (j + 1) * c])
                    {
                        *d += g;
                    }
                }
            }
            offset += l;
        }
        Some(dx)
    }
}

impl<S: Real> Module<S> for TemporalConv1d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_module_grads};
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        randn::<f64, _>(rng, &[r, c], 1.0).into_dimensionality::<Ix2>().unwrap()
    }

    /// Direct (non-im2col) convolution used as an independent oracle.
    fn direct_conv(x: &Array2<f64>, w: &Array2<f64>, shape: ImageShape, cin: usize, cout: usize) -> Array2<f64> {
        let mut y = Array2::zeros((shape.rows(), cout));
        for n in 0..shape.n {
            for yy in 0..shape.h {
                for xx in 0..shape.w {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let sy = yy as i64 + ky - 1;
                                let sx = xx as i64 + kx - 1;
                                if sy < 0 || sx < 0 || sy >= shape.h as i64 || sx >= shape.w as i64 {
                                    continue;
                                }
                                let r = (n * shape.h + sy as usize) * shape.w + sx as usize;
                                for ci in 0..cin {
                                    acc += x[[r, ci]] * w[[((ky * 3 + kx) as usize) * cin + ci, co]];
                                }
                            }
                        }
                        y[[(n * shape.h + yy) * shape.w + xx, co]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::<f64>::new(&mut rng, 2, 3);
        let shape = ImageShape { n: 2, h: 4, w: 5 };
        let x = mat(&mut rng, shape.rows(), 2);
        let (y, _) = conv.forward(&x.view(), shape);
        let w = conv.weight.value.clone().into_dimensionality::<Ix2>().unwrap();
        let oracle = direct_conv(&x, &w, shape, 2, 3);
        assert!((&y - &oracle).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut conv = Conv2d::<f64>::new(&mut rng, 2, 3);
        let shape = ImageShape { n: 1, h: 4, w: 4 };
        let x = mat(&mut rng, shape.rows(), 2);
        let probe = mat(&mut rng, shape.rows(), 3);
        let err = check_module_grads(&mut conv, 1e-6, |m, bw| {
            let (y, c) = m.forward(&x.view(), shape);
            if bw {
                m.backward(c, &probe.view(), false);
            }
            (&y * &probe).sum()
        });
        assert!(err < 1e-7, "{err}");
        let err = check_input_grad(
            &x,
            1e-6,
            |xi| (&conv.forward(&xi.view(), shape).0 * &probe).sum(),
            |xi| {
                let mut m = conv.clone();
                let (_, c) = m.forward(&xi.view(), shape);
                m.backward(c, &probe.view(), true).unwrap()
            },
        );
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let shape = ImageShape { n: 1, h: 2, w: 2 };
        let x = Array2::from_shape_vec((4, 1), vec![0.1f64, 0.9, -1.0, 0.3]).unwrap();
        let (y, cache) = MaxPool2::forward(&x.view(), shape);
        assert_eq!(y[[0, 0]], 0.9);
        let dx = MaxPool2::backward(&cache, &Array2::from_elem((1, 1), 2.0).view());
        assert_eq!(dx.column(0).to_vec(), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn temporal_conv_keeps_sequences_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let conv = TemporalConv1d::<f64>::new(&mut rng, 2, 2, 5);
        let a = mat(&mut rng, 3, 2);
        let b = mat(&mut rng, 2, 2);
        let mut packed = Array2::zeros((5, 2));
        packed.slice_mut(ndarray::s![0..3, ..]).assign(&a);
        packed.slice_mut(ndarray::s![3..5, ..]).assign(&b);
        let (y, _) = conv.forward(&packed.view(), &[3, 2]);
        let (ya, _) = conv.forward(&a.view(), &[3]);
        let (yb, _) = conv.forward(&b.view(), &[2]);
        assert_eq!(y.slice(ndarray::s![0..3, ..]), ya);
        assert_eq!(y.slice(ndarray::s![3..5, ..]), yb);
    }

    #[test]
    fn temporal_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut conv = TemporalConv1d::<f64>::new(&mut rng, 3, 2, 5);
        let lens = [4, 2];
        let x = mat(&mut rng, 6, 3);
        let probe = mat(&mut rng, 6, 2);
        let err = check_module_grads(&mut conv, 1e-6, |m, bw| {
            let (y, c) = m.forward(&x.view(), &lens);
            if bw {
                m.backward(c, &probe.view(), false);
            }
            (&y * &probe).sum()
        });
        assert!(err < 1e-7, "{err}");
        let err = check_input_grad(
            &x,
            1e-6,
            |xi| (&conv.forward(&xi.view(), &lens).0 * &probe).sum(),
            |xi| {
                let mut m = conv.clone();
                let (_, c) = m.forward(&xi.view(), &lens);
                m.backward(c, &probe.view(), true).unwrap()
            },
        );
        assert!(err < 1e-7, "{err}");
    }
}
