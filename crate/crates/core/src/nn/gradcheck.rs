//! Central finite-difference gradient checking.
//!
//! Errors are reported as norm-wise relative errors
//! `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)` over the concatenated
//! gradient of all probed tensors. Element-wise ratios are meaningless for
//! entries that are zero up to rounding (e.g. attention key biases).

use ndarray::{Array, ArrayD, Dimension};

use super::{Module, Real};

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Checks every trainable tensor of `module`.
///
/// `objective(module, backward)` must return a scalar and, when `backward`
/// is true, accumulate its gradient into the module parameters.
pub fn check_module_grads<S, M, F>(module: &mut M, h: f64, objective: F) -> f64
where
    S: Real,
    M: Module<S>,
    F: FnMut(&mut M, bool) -> S,
{
    check_module_grads_sampled(module, h, usize::MAX, objective)
}

/// Like [`check_module_grads`] but probes at most `max_per_param` evenly
/// spaced entries of each tensor.
pub fn check_module_grads_sampled<S, M, F>(module: &mut M, h: f64, max_per_param: usize, mut objective: F) -> f64
where
    S: Real,
    M: Module<S>,
    F: FnMut(&mut M, bool) -> S,
{
    module.zero_grad();
    objective(module, true);
    let mut analytic: Vec<(String, Option<ArrayD<S>>, usize)> = Vec::new();
    module.visit("", &mut |name, p| {
        if p.trainable() {
            analytic.push((name.to_string(), p.grad.clone(), p.len()));
        }
    });
    module.zero_grad();

    let mut a = Vec::new();
    let mut n = Vec::new();
    for (name, grad, len) in analytic {
        let idx = sample_indices(len, max_per_param);
        for &i in &idx {
            a.push(grad.as_ref().map_or(0.0, |g| g.as_slice_memory_order().unwrap()[i].f64()));
            let mut eval_at = |delta: f64, m: &mut M| -> f64 {
                let mut original = S::zero();
                m.visit_mut("", &mut |pn, p| {
                    if pn == name {
                        let slot = &mut p.value.as_slice_memory_order_mut().unwrap()[i];
                        original = *slot;
                        *slot = original + S::lit(delta);
                    }
                });
                let v = objective(m, false).f64();
                m.visit_mut("", &mut |pn, p| {
                    if pn == name {
                        p.value.as_slice_memory_order_mut().unwrap()[i] = original;
                    }
                });
                v
            };
            let plus = eval_at(h, module);
            let minus = eval_at(-h, module);
            n.push((plus - minus) / (2.0 * h));
        }
    }
    relative_error(&a, &n)
}

/// Checks an input gradient: `f` is the scalar objective, `analytic`
/// returns its gradient with respect to the input.
pub fn check_input_grad<S, D, F, G>(x: &Array<S, D>, h: f64, f: F, analytic: G) -> f64
where
    S: Real,
    D: Dimension,
    F: Fn(&Array<S, D>) -> S,
    G: Fn(&Array<S, D>) -> Array<S, D>,
{
    let g = analytic(x);
    let a: Vec<f64> = g.iter().map(|v| v.f64()).collect();
    let mut n = Vec::with_capacity(x.len());
    let mut probe = x.to_owned();
    for i in 0..x.len() {
        let original = probe.as_slice_memory_order().unwrap()[i];
        probe.as_slice_memory_order_mut().unwrap()[i] = original + S::lit(h);
        let plus = f(&probe).f64();
        probe.as_slice_memory_order_mut().unwrap()[i] = original - S::lit(h);
        let minus = f(&probe).f64();
        probe.as_slice_memory_order_mut().unwrap()[i] = original;
        n.push((plus - minus) / (2.0 * h));
    }
    relative_error(&a, &n)
}
