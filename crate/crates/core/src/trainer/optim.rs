use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v = mu v + g; p -= lr v`.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::config("optimizer.momentum", format!("{momentum} not in [0, 1)")))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::config("optimizer", "adam betas must be in [0, 1) and eps positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-tensor optimizer slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Slots<S> {
    pub first: ArrayD<S>,
    pub second: Option<ArrayD<S>>,
    pub steps: u64,
}

/// Optimizer over the trainable tensors of a [`Module`], keyed by dotted
/// parameter name. Tensors without a gradient are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    pub slots: BTreeMap<String, Slots<S>>,
}

impl<S: Real> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update; `lr(name)` gives the current learning rate of a
    /// tensor's group.
    pub fn step<M: Module<S> + ?Sized>(&mut self, model: &mut M, lr: &dyn Fn(&str) -> f64) {
        let kind = self.kind;
        let slots = &mut self.slots;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable() {
                return;
            }
            let Some(g) = p.grad.as_ref() else { return };
            let rate = S::lit(lr(name));
            let slot = slots.entry(name.to_string()).or_insert_with(|| Slots {
                first: ArrayD::zeros(g.raw_dim()),
                second: match kind {
                    OptimizerKind::Adam { .. } => Some(ArrayD::zeros(g.raw_dim())),
                    OptimizerKind::Sgd { .. } => None,
                },
                steps: 0,
            });
            slot.steps += 1;
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = S::lit(momentum);
                    Zip::from(&mut slot.first).and(g).for_each(|v, &g| *v = mu * *v + g);
                    Zip::from(&mut p.value).and(&slot.first).for_each(|w, &v| *w -= rate * v);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (S::lit(beta1), S::lit(beta2));
                    let one = S::one();
                    let t = slot.steps as i32;
                    let c1 = S::lit(1.0 - beta1.powi(t));
                    let c2 = S::lit(1.0 - beta2.powi(t));
                    let e = S::lit(eps);
                    let second = slot.second.as_mut().expect("adam second moment");
                    Zip::from(&mut slot.first)
                        .and(&mut *second)
                        .and(g)
                        .for_each(|m, v, &g| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                        });
                    Zip::from(&mut p.value)
                        .and(&slot.first)
                        .and(&*second)
                        .for_each(|w, &m, &v| *w -= rate * (m / c1) / ((v / c2).sqrt() + e));
                }
            }
        });
    }
}

/// L2 norm over every gradient buffer of `model`.
pub fn global_grad_norm<S: Real, M: Module<S> + ?Sized>(model: &M) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, p| {
        if let Some(g) = &p.grad {
            sq += g.iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    });
    sq.sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Real, M: Module<S> + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let norm = global_grad_norm(model);
    if norm > max_norm && norm.is_finite() {
        let scale = S::lit(max_norm / norm);
        model.visit_mut("", &mut |_, p| {
            if let Some(g) = &mut p.grad {
                g.mapv_inplace(|v| v * scale);
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};

    /// `f(x, y) = 0.5 * (a x^2 + b y^2)` on two scalar parameters.
    struct Quad {
        x: Param<f64>,
        y: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "x"), &self.x);
            f(&join(prefix, "y"), &self.y);
        }

        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "x"), &mut self.x);
            f(&join(prefix, "y"), &mut self.y);
        }
    }

    const A: f64 = 3.0;
    const B: f64 = 0.5;

    fn quad(x: f64, y: f64) -> Quad {
        Quad {
            x: Param::filled(&[1], x),
            y: Param::filled(&[1], y),
        }
    }

    fn fill_grads(q: &mut Quad) {
        let gx = A * q.x.value[[0]];
        let gy = B * q.y.value[[0]];
        q.zero_grad();
        q.x.accumulate(ndarray::arr1(&[gx]).view());
        q.y.accumulate(ndarray::arr1(&[gy]).view());
    }

    #[test]
    fn sgd_momentum_matches_closed_form() {
        let mut q = quad(1.0, -2.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9));
        let lr = 0.1;
        fill_grads(&mut q);
        opt.step(&mut q, &|_| lr);
        // first step: v = g, p = p0 - lr g
        assert!((q.x.value[[0]] - (1.0 - lr * A)).abs() < 1e-9);
        assert!((q.y.value[[0]] - (-2.0 + lr * 2.0 * B)).abs() < 1e-9);
        let (x1, v1) = (1.0 - lr * A, A);
        fill_grads(&mut q);
        opt.step(&mut q, &|_| lr);
        let v2 = 0.9 * v1 + A * x1;
        assert!((q.x.value[[0]] - (x1 - lr * v2)).abs() < 1e-9);
    }

    #[test]
    fn adam_matches_closed_form() {
        let mut q = quad(1.0, -2.0);
        let mut opt = Optimizer::new(OptimizerKind::adam());
        let lr = 0.01;
        fill_grads(&mut q);
        opt.step(&mut q, &|_| lr);
        // bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
        let g = A;
        let expect = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((q.x.value[[0]] - expect).abs() < 1e-9);
        let gy = B * -2.0;
        assert!((q.y.value[[0]] - (-2.0 - lr * gy / (gy.abs() + 1e-8))).abs() < 1e-9);
        let x1 = expect;
        fill_grads(&mut q);
        opt.step(&mut q, &|_| lr);
        let g2 = A * x1;
        let m = 0.9 * 0.1 * g + 0.1 * g2;
        let v = 0.999 * 0.001 * g * g + 0.001 * g2 * g2;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        assert!((q.x.value[[0]] - (x1 - lr * mhat / (vhat.sqrt() + 1e-8))).abs() < 1e-9);
    }

    #[test]
    fn frozen_and_gradless_tensors_are_untouched() {
        let mut q = quad(1.0, 1.0);
        q.y.frozen = true;
        fill_grads(&mut q);
        let mut opt = Optimizer::new(OptimizerKind::adam());
        opt.step(&mut q, &|_| 0.1);
        assert_eq!(q.y.value[[0]], 1.0);
        assert!(!opt.slots.contains_key("y"));
        q.zero_grad();
        let x = q.x.value[[0]];
        opt.step(&mut q, &|_| 0.1);
        assert_eq!(q.x.value[[0]], x);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut q = quad(4.0, 6.0);
        fill_grads(&mut q);
        let before = global_grad_norm(&q);
        assert!((before - (144.0f64 + 9.0).sqrt()).abs() < 1e-12);
        let pre = clip_grad_norm(&mut q, 5.0);
        assert_eq!(pre, before);
        assert!((global_grad_norm(&q) - 5.0).abs() < 1e-12);
    }
}
