//! Parameterized building blocks shared by the model components.

use crate::error::Result;
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Init std for transformer-style projections.
pub(crate) const PROJ_STD: f64 = 0.02;

/// He-style std for a layer feeding a rectifier.
pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, out: usize, inp: usize) -> Self {
        Self::with_std(store, rng, name, out, inp, PROJ_STD)
    }

    pub fn with_std(store: &mut ParamStore, rng: &mut StreamRng, name: &str, out: usize, inp: usize, std: f64) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), trunc_normal(&[out, inp], std, rng)),
            b: Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out]))),
        }
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut StreamRng, name: &str, out: usize, inp: usize, std: f64) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), trunc_normal(&[out, inp], std, rng)),
            b: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(vec![dim], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, axis: usize) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, axis, g, b)
    }
}

/// Same-padded stride-1 convolution, weight `C_out × C_in × k × k`.
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, out: usize, inp: usize, k: usize) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), trunc_normal(&[out, inp, k, k], he_std(inp * k * k), rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b))
    }
}

/// Kernel-2 stride-2 transposed convolution, weight `C_in × C_out × 2 × 2`.
pub(crate) struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, out: usize, inp: usize) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), trunc_normal(&[inp, out, 2, 2], he_std(inp), rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.deconv2d(x, w, Some(b))
    }
}
