use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1};

use super::{join, Module, Param, Real};

const EPS: f64 = 1e-5;

/// Layer normalization over the last axis of a row matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

impl<S: Real> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(&[dim], S::one()),
            beta: Param::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &ArrayView2<S>) -> (Array2<S>, LayerNormCache<S>) {
        let d = S::lit(x.ncols() as f64);
        let eps = S::lit(EPS);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<S>() / d;
            *is = S::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &xhat * &gamma;
        y += &beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: LayerNormCache<S>, dy: &ArrayView2<S>) -> Array2<S> {
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        if self.gamma.trainable() {
            let dg = (dy * &cache.xhat).sum_axis(Axis(0));
            self.gamma.accumulate(dg.view());
        }
        if self.beta.trainable() {
            self.beta.accumulate(dy.sum_axis(Axis(0)).view());
        }
        let d = S::lit(dy.ncols() as f64);
        let mut dx = dy * &gamma;
        for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
            let sum_d = row.sum();
            let sum_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>();
            for (v, &h) in row.iter_mut().zip(xh.iter()) {
                *v = is * (*v * d - sum_d - h * sum_dx) / d;
            }
        }
        dx
    }
}

impl<S: Real> Module<S> for LayerNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Batch normalization over the columns (channels) of a row matrix whose
/// rows are the pooled batch/time/space positions. Running statistics are
/// buffers: updated in training mode, used in inference mode.
#[derive(Clone, Debug)]
pub struct BatchNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Param<S>,
    pub running_var: Param<S>,
    pub momentum: f64,
}

pub struct BatchNormCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
    train: bool,
}

impl<S: Real> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(&[channels], S::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            running_var: Param::buffer(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[channels]), S::one())),
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `train` selects batch statistics and updates the running buffers.
    pub fn forward(&mut self, x: &ArrayView2<S>, train: bool) -> (Array2<S>, BatchNormCache<S>) {
        let eps = S::lit(EPS);
        let rows = x.nrows();
        let (mean, inv_std) = if train && rows > 0 {
            let n = S::lit(rows as f64);
            let mean = x.sum_axis(Axis(0)) / n;
            let centered = x - &mean;
            let var = (&centered * &centered).sum_axis(Axis(0)) / n;
            let m = S::lit(self.momentum);
            let unbiased = if rows > 1 {
                &var * S::lit(rows as f64 / (rows as f64 - 1.0))
            } else {
                var.clone()
            };
            {
                let mut rm = self.running_mean.value.view_mut().into_dimensionality::<Ix1>().unwrap();
                rm.zip_mut_with(&mean, |r, &b| *r = (S::one() - m) * *r + m * b);
                let mut rv = self.running_var.value.view_mut().into_dimensionality::<Ix1>().unwrap();
                rv.zip_mut_with(&unbiased, |r, &b| *r = (S::one() - m) * *r + m * b);
            }
            let inv = var.mapv(|v| S::one() / (v + eps).sqrt());
            (mean, inv)
        } else {
            let rm = self.running_mean.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let rv = self.running_var.value.view().into_dimensionality::<Ix1>().unwrap();
            (rm, rv.mapv(|v| S::one() / (v + eps).sqrt()))
        };
        let xhat = (x - &mean) * &inv_std;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = &xhat * &gamma + &beta;
        (y, BatchNormCache { xhat, inv_std, train })
    }

    pub fn backward(&mut self, cache: BatchNormCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let dbeta = dy.sum_axis(Axis(0));
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        if self.gamma.trainable() {
            self.gamma.accumulate(dgamma.view());
        }
        if self.beta.trainable() {
            self.beta.accumulate(dbeta.view());
        }
        if !need_dx {
            return None;
        }
        let scale = &gamma * &cache.inv_std;
        if !cache.train {
            return Some(dy * &scale);
        }
        let n = S::lit(dy.nrows() as f64);
        // dx = gamma*inv_std/n * (n*dy - sum(dy) - xhat*sum(dy*xhat))
        let mut dx = dy * n;
        dx -= &dbeta;
        dx -= &(&cache.xhat * &dgamma);
        dx *= &(&scale / n);
        Some(dx)
    }
}

impl<S: Real> Module<S> for BatchNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
