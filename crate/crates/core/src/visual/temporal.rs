use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::TemporalConvCache;
use crate::nn::norm::BatchNormCache;
use crate::nn::{join, BatchNorm, Module, Param, Real, TemporalConv1d};

/// Local temporal module: 1-D convolution over time, batch norm over the
/// valid steps, ReLU. Length preserving.
#[derive(Clone, Debug)]
pub struct TemporalModule<S> {
    pub conv: TemporalConv1d<S>,
    pub bn: BatchNorm<S>,
}

pub struct TemporalCache<S> {
    conv: TemporalConvCache<S>,
    bn: BatchNormCache<S>,
    pre_relu: Array2<S>,
}

impl<S: Real> TemporalModule<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, kernel: usize) -> Self {
        TemporalModule {
            conv: TemporalConv1d::new(rng, c_in, c_out, kernel),
            bn: BatchNorm::new(c_out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.conv.c_out
    }

    /// `x` packs the frame-wise features of several sequences.
    pub fn forward(&mut self, x: &ArrayView2<S>, lens: &[usize], train: bool) -> Result<(Array2<S>, TemporalCache<S>)> {
        if lens.iter().any(|&l| l == 0) {
            return Err(Error::InvalidInput("temporal module input has a sequence of length 0".into()));
        }
        if x.nrows() != lens.iter().sum::<usize>() || x.ncols() != self.conv.c_in {
            return Err(Error::shape(
                "temporal module input",
                format!("{}x{}", lens.iter().sum::<usize>(), self.conv.c_in),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        let (c, conv) = self.conv.forward(x, lens);
        let (pre_relu, bn) = self.bn.forward(&c.view(), train);
        let y = pre_relu.mapv(|v| v.max(S::zero()));
        Ok((y, TemporalCache { conv, bn, pre_relu }))
    }

    pub fn backward(&mut self, cache: TemporalCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        let mut d = dy.to_owned();
        d.zip_mut_with(&cache.pre_relu, |g, &p| {
            if p <= S::zero() {
                *g = S::zero()
            }
        });
        let dc = self.bn.backward(cache.bn, &d.view(), true).unwrap();
        self.conv.backward(cache.conv, &dc.view(), need_dx)
    }
}

impl<S: Real> Module<S> for TemporalModule<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
