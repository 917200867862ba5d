use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{global_avg_pool, global_avg_pool_backward, Conv2dCache, ImageShape, MaxPoolCache};
use crate::nn::norm::BatchNormCache;
use crate::nn::{join, BatchNorm, Conv2d, MaxPool2, Module, Param, Real};

/// conv3x3 -> batch norm -> ReLU -> 2x2 max pool.
#[derive(Clone, Debug)]
pub struct ConvBlock<S> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm<S>,
}

pub struct ConvBlockCache<S> {
    conv: Conv2dCache<S>,
    bn: BatchNormCache<S>,
    pre_relu: Array2<S>,
    pool: MaxPoolCache,
}

impl<S: Real> ConvBlock<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            conv: Conv2d::new(rng, c_in, c_out),
            bn: BatchNorm::new(c_out),
        }
    }

    pub fn forward(&mut self, x: &ArrayView2<S>, shape: ImageShape, train: bool) -> (Array2<S>, ImageShape, ConvBlockCache<S>) {
        let (c, conv) = self.conv.forward(x, shape);
        let (pre_relu, bn) = self.bn.forward(&c.view(), train);
        let act = pre_relu.mapv(|v| v.max(S::zero()));
        let (y, pool) = MaxPool2::forward(&act.view(), shape);
        (y, MaxPool2::out_shape(shape), ConvBlockCache { conv, bn, pre_relu, pool })
    }

    pub fn backward(&mut self, cache: ConvBlockCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        let mut dact = MaxPool2::backward(&cache.pool, dy);
        dact.zip_mut_with(&cache.pre_relu, |d, &p| {
            if p <= S::zero() {
                *d = S::zero()
            }
        });
        let dc = self.bn.backward(cache.bn, &dact.view(), true).unwrap();
        self.conv.backward(cache.conv, &dc.view(), need_dx)
    }
}

impl<S: Real> Module<S> for ConvBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Small convolutional frame encoder: stacked [`ConvBlock`]s followed by
/// global average pooling, one feature row per frame.
#[derive(Clone, Debug)]
pub struct Backbone<S> {
    pub blocks: Vec<ConvBlock<S>>,
}

pub struct BackboneCache<S> {
    blocks: Vec<ConvBlockCache<S>>,
    pooled_shape: ImageShape,
}

impl<S: Real> Backbone<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: &[usize]) -> Self {
        let mut c_in = 3;
        let blocks = channels
            .iter()
            .map(|&c| {
                let b = ConvBlock::new(rng, c_in, c);
                c_in = c;
                b
            })
            .collect();
        Backbone { blocks }
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.conv.c_out)
    }

    /// Smallest frame side the block stack accepts.
    pub fn min_side(&self) -> usize {
        1 << self.blocks.len()
    }

    /// `x` holds `n` frames as `(n * h * w, 3)` rows.
    pub fn forward(&mut self, x: &ArrayView2<S>, shape: ImageShape, train: bool) -> Result<(Array2<S>, BackboneCache<S>)> {
        if x.ncols() != 3 || x.nrows() != shape.rows() {
            return Err(Error::shape("backbone input", format!("{}x3", shape.rows()), format!("{}x{}", x.nrows(), x.ncols())));
        }
        if shape.h < self.min_side() || shape.w < self.min_side() {
            return Err(Error::InvalidInput(format!(
                "frames of {}x{} are too small for {} pooling blocks",
                shape.h,
                shape.w,
                self.blocks.len()
            )));
        }
        let mut h = x.to_owned();
        let mut s = shape;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (y, s2, c) = b.forward(&h.view(), s, train);
            caches.push(c);
            h = y;
            s = s2;
        }
        Ok((global_avg_pool(&h.view(), s), BackboneCache { blocks: caches, pooled_shape: s }))
    }

    pub fn backward(&mut self, cache: BackboneCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        let mut d = global_avg_pool_backward(dy, cache.pooled_shape);
        for (i, (b, c)) in self.blocks.iter_mut().zip(cache.blocks).enumerate().rev() {
            d = b.backward(c, &d.view(), need_dx || i > 0)?;
        }
        Some(d)
    }
}

impl<S: Real> Module<S> for Backbone<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}
