use ndarray::{Array, Dimension};
use rand::Rng;

use super::{Ctx, Real};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<S: Real>(x: S) -> S {
    let c = S::lit(SQRT_2_OVER_PI);
    let k = S::lit(GELU_C);
    let half = S::lit(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::one() + inner.tanh())
}

#[inline]
pub fn gelu_backward<S: Real>(x: S) -> S {
    let c = S::lit(SQRT_2_OVER_PI);
    let k = S::lit(GELU_C);
    let half = S::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::lit(3.0) * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

#[inline]
pub fn relu<S: Real>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::zero()
    }
}

/// Inverted dropout. The mask holds `0` or `1/(1-p)`.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p }
    }

    pub fn forward<S: Real, D: Dimension>(&self, x: &mut Array<S, D>, ctx: &mut Ctx) -> Option<Array<S, D>> {
        if !ctx.train || self.p <= 0.0 {
            return None;
        }
        let keep = S::lit(1.0 / (1.0 - self.p));
        let mask = x.mapv(|_| {
            if ctx.rng.random::<f64>() < self.p {
                S::zero()
            } else {
                keep
            }
        });
        *x *= &mask;
        Some(mask)
    }

    pub fn backward<S: Real, D: Dimension>(mask: &Option<Array<S, D>>, dy: &mut Array<S, D>) {
        if let Some(m) = mask {
            *dy *= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_backward(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut x = ndarray::Array2::<f32>::ones((3, 3));
        let mut ctx = Ctx::eval();
        assert!(Dropout::new(0.5).forward(&mut x, &mut ctx).is_none());
        assert_eq!(x.sum(), 9.0);
    }
}
