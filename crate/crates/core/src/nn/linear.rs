use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::activation::{gelu, gelu_backward};
use super::{join, uniform, Module, Param, Real};
use crate::error::{Error, Result};

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Real> Linear<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Param::new(uniform(rng, &[d_in, d_out], bound)),
            bias: Param::new(uniform(rng, &[d_out], bound)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn w(&self) -> ArrayView2<'_, S> {
        self.weight.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn b(&self) -> ndarray::ArrayView1<'_, S> {
        self.bias.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn check_input(&self, x: &ArrayView2<S>, context: &str) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::shape(context, self.d_in(), x.ncols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayView2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w());
        y += &self.b();
        y
    }

    /// Accumulates weight/bias gradients; returns `dx` when requested.
    pub fn backward(&mut self, x: &ArrayView2<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        if self.weight.trainable() {
            let dw = x.t().dot(dy);
            self.weight.accumulate(dw.view());
        }
        if self.bias.trainable() {
            let db: Array1<S> = dy.sum_axis(Axis(0));
            self.bias.accumulate(db.view());
        }
        if need_dx {
            Some(dy.dot(&self.w().t()))
        } else {
            None
        }
    }
}

impl<S: Real> Module<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Position-wise perceptron with one GELU hidden layer. Used for both the
/// visual-to-text adapter and the adapter feeding the pretrained backend.
#[derive(Clone, Debug)]
pub struct Mlp<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

pub struct MlpCache<S> {
    x: Array2<S>,
    pre: Array2<S>,
    act: Array2<S>,
}

impl<S: Real> Mlp<S> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let fc1 = Linear::new(rng, d_in, hidden);
        let fc2 = Linear::new(rng, hidden, d_out);
        Mlp { fc1, fc2 }
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out()
    }

    pub fn forward(&self, x: &ArrayView2<S>) -> Result<(Array2<S>, MlpCache<S>)> {
        self.fc1.check_input(x, "mlp input width")?;
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act.view());
        Ok((
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        ))
    }

    pub fn infer(&self, x: &ArrayView2<S>) -> Result<Array2<S>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&mut self, cache: MlpCache<S>, dy: &ArrayView2<S>, need_dx: bool) -> Option<Array2<S>> {
        let mut da = self.fc2.backward(&cache.act.view(), dy, true).unwrap();
        ndarray::Zip::from(&mut da)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= gelu_backward(p));
        self.fc1.backward(&cache.x.view(), &da.view(), need_dx)
    }
}

impl<S: Real> Module<S> for Mlp<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<S>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
