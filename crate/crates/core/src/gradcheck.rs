//! Central finite-difference gradient checking.
//!
//! Non-scalar kernel outputs are reduced to a scalar with fixed pseudo-random
//! weights, so every output element contributes to the checked gradient.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor in the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Result of one gradient check: worst relative error and where it occurred.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: Option<Location>,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Location {
    Input { index: usize, element: usize },
    Param { name: String, element: usize },
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check `kernel` with respect to every element of every input.
pub fn grad_check<F>(kernel: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_params(&ParamStore::new(), inputs, eps, |tape, _, vars| kernel(tape, vars))
}

/// Check `kernel` with respect to every parameter in `store` and every
/// element of `inputs`.
pub fn grad_check_params<F>(store: &ParamStore, inputs: &[Tensor], eps: f64, kernel: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    grad_check_selected(store, inputs, eps, |_| true, kernel)
}

/// Like [`grad_check_params`], but only parameters whose name passes
/// `select` are perturbed. Inputs are always checked.
pub fn grad_check_selected<F, S>(store: &ParamStore, inputs: &[Tensor], eps: f64, select: S, kernel: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    let forward = |store: &ParamStore, inputs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = kernel(&mut tape, store, &vars)?;
        Ok(tape.value(out).clone())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = kernel(&mut tape, store, &vars)?;
    let weights = projection_weights(tape.shape(out));
    let w = tape.constant(weights.clone());
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum(weighted)?;
    tape.backward(loss)?;
    let param_grads: std::collections::HashMap<ParamId, Tensor> = tape.param_grads().into_iter().collect();

    // project the difference of the two outputs rather than differencing two
    // projected sums: the sums are large and their last bits cancel badly
    let numeric = |plus: Tensor, minus: Tensor| -> f64 {
        let diff: f64 = plus
            .data()
            .iter()
            .zip(minus.data())
            .zip(weights.data())
            .map(|((p, m), w)| (p - m) * w)
            .sum();
        diff / (2.0 * eps)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut record = |rel: f64, loc: Location| {
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some(loc);
        }
    };

    for (index, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[index]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for element in 0..input.numel() {
            let eval = |delta: f64| -> Result<Tensor> {
                let mut perturbed = inputs.to_vec();
                perturbed[index] = nudge(input, element, delta);
                forward(store, &perturbed)
            };
            let n = numeric(eval(eps)?, eval(-eps)?);
            record(relative_error(analytic[element], n), Location::Input { index, element });
        }
    }

    for (id, name, value) in store.iter() {
        if !select(name) {
            continue;
        }
        let analytic = param_grads
            .get(&id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        for element in 0..value.numel() {
            let eval = |delta: f64| -> Result<Tensor> {
                let mut perturbed = store.clone();
                perturbed.set(id, nudge(value, element, delta))?;
                forward(&perturbed, inputs)
            };
            let n = numeric(eval(eps)?, eval(-eps)?);
            record(
                relative_error(analytic[element], n),
                Location::Param {
                    name: name.to_string(),
                    element,
                },
            );
        }
    }
    Ok(report)
}

/// Copy of `store` with every value redrawn uniformly from `[-scale, scale]`.
///
/// Trained-from-init weights (std 0.02) give attention gradients near 1e-7,
/// below what a relative check can resolve; checks run at random points of
/// order one instead.
pub fn randomized(store: &ParamStore, seed: u64, scale: f64) -> ParamStore {
    let mut out = store.clone();
    let mut r = rng::stream(seed);
    for id in store.ids() {
        let shape = store.get(id).shape().to_vec();
        let n = store.get(id).numel();
        let data = (0..n).map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale).collect();
        out.set(id, Tensor::from_parts(shape, data)).expect("same shape");
    }
    out
}

fn nudge(t: &Tensor, element: usize, delta: f64) -> Tensor {
    let mut data = t.to_vec();
    data[element] += delta;
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn projection_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if n == 1 {
        return Tensor::from_parts(shape.to_vec(), vec![1.0]);
    }
    let mut r = rng::stream(0x6772_6164 ^ n as u64);
    let data = (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_kernel_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.75]).unwrap();
        let report = grad_check(
            |t, v| {
                let w = t.constant(w.clone());
                let y = t.matmul(v[0], w)?;
                t.scale(y, 3.0)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu at exactly zero input is a kink: the finite difference sees
        // slope 1/2, the analytic subgradient is 0
        let x = Tensor::from_vec(vec![0.0]);
        let report = grad_check(|t, v| t.relu(v[0]), &[x], DEFAULT_EPS).unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
