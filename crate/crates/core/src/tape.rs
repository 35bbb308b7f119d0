//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every value produced during a forward pass, in execution
//! order. [`Tape::backward`] walks that record in exact reverse and
//! accumulates gradients additively, so a value used twice receives the sum
//! of both contributions.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};

/// Added to the norm before dividing in [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;
/// Variance floor used by [`Tape::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Gelu,
    Sigmoid,
}

enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
        // broadcast maps, absent when shapes already match
        maps: Option<(Vec<usize>, Vec<usize>)>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Unary {
        x: Var,
        kind: Pointwise,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        cols: Vec<f64>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample2x {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        rows: Vec<usize>,
    },
    BroadcastTo {
        x: Var,
        map: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Execution record for one computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    frozen: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameters bind as constants: nothing is recorded for
    /// backward.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter as a trainable leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), !self.frozen);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    // ---------------------------------------------------------------- pointwise

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            return self.push("add", Tensor::from_parts(sa, data), &[a, b], Op::Add { a, b, maps: None });
        }
        let out_shape = kernels::broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: "add",
            left: sa.clone(),
            right: sb.clone(),
        })?;
        let ma = kernels::broadcast_index_map(&sa, &out_shape);
        let mb = kernels::broadcast_index_map(&sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| da[i] + db[j]).collect();
        self.push(
            "add",
            Tensor::from_parts(out_shape, data),
            &[a, b],
            Op::Add {
                a,
                b,
                maps: Some((ma, mb)),
            },
        )
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        self.push("mul", Tensor::from_parts(shape, data), &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push("scale", value, &[x], Op::Scale { x, s })
    }

    pub fn pointwise(&mut self, x: Var, kind: Pointwise) -> Result<Var> {
        let value = match kind {
            Pointwise::Relu => self.value(x).map(|v| v.max(0.0)),
            Pointwise::Gelu => self.value(x).map(kernels::gelu),
            Pointwise::Sigmoid => self.value(x).map(kernels::sigmoid),
        };
        let name = match kind {
            Pointwise::Relu => "relu",
            Pointwise::Gelu => "gelu",
            Pointwise::Sigmoid => "sigmoid",
        };
        self.push(name, value, &[x], Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Pointwise::Sigmoid)
    }

    // -------------------------------------------------------------- reductions

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis })
    }

    /// `x / (‖x‖ + eps)` along `axis`. All-zero vectors map to zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        let mut zeros = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let norm = (0..len).map(|j| src[at(j)] * src[at(j)]).sum::<f64>().sqrt();
                if norm == 0.0 {
                    zeros += 1;
                }
                let denom = norm + L2_EPS;
                for j in 0..len {
                    out[at(j)] = src[at(j)] / denom;
                }
                norms.push(norm);
            }
        }
        if zeros > 0 {
            log::warn!("l2_normalize: {zeros} zero vector(s) left at zero");
        }
        self.push(
            "l2_normalize",
            Tensor::from_parts(shape, out),
            &[x],
            Op::L2Normalize { x, axis, norms },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Layer normalization over `axis` with population variance, followed by
    /// the per-feature affine `gamma * x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, axis: usize, gamma: Var, beta: Var) -> Result<Var> {
        self.check_axis("layernorm", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        for p in [gamma, beta] {
            if self.shape(p) != [len] {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).map(|j| src[at(j)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / len as f64;
                let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                for j in 0..len {
                    let h = (src[at(j)] - mean) * inv;
                    xhat[at(j)] = h;
                    out[at(j)] = g[j] * h + b[j];
                }
                inv_std.push(inv);
            }
        }
        self.push(
            "layernorm",
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean cross-entropy of `logits[N×H×W]` (classes first) against integer
    /// targets; pixels equal to `ignore_index` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], ignore_index: u8) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 3 || shape[1] * shape[2] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        let (n, hw) = (shape[0], shape[1] * shape[2]);
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        let mut count = 0usize;
        let mut resolved = Vec::with_capacity(hw);
        for (p, &t) in targets.iter().enumerate() {
            let max = (0..n).map(|c| src[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (src[c * hw + p] - max).exp();
                probs[c * hw + p] = e;
                sum += e;
            }
            for c in 0..n {
                probs[c * hw + p] /= sum;
            }
            if t == ignore_index {
                resolved.push(None);
                continue;
            }
            let t = t as usize;
            if t >= n {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    msg: format!("target class {t} out of range for {n} classes"),
                });
            }
            loss += -(src[t * hw + p] - max - sum.ln());
            count += 1;
            resolved.push(Some(t));
        }
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every pixel is ignored".into()));
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / count as f64),
            &[logits],
            Op::CrossEntropy {
                logits,
                probs,
                targets: resolved,
                count,
            },
        )
    }

    // ------------------------------------------------------------ linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("expected a matrix, got {s:?}"),
            });
        }
        let out = kernels::transpose(self.value(x).data(), s[0], s[1]);
        self.push("transpose", Tensor::from_parts(vec![s[1], s[0]], out), &[x], Op::Transpose { x })
    }

    /// `x[n×in] · wᵀ + b` with `w[out×in]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    // ------------------------------------------------------------- spatial ops

    /// Stride-1 convolution with zero "same" padding. `x[C_in×H×W]`,
    /// `w[C_out×C_in×k×k]`, `b[C_out]`, `k` odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        let k = sw[2];
        if k.is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel size {k} must be odd"),
            });
        }
        let (cin, h, wd, cout) = (sx[0], sx[1], sx[2], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d(bias)",
                    left: sw,
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let cols = if k == 1 {
            self.value(x).to_vec()
        } else {
            kernels::im2col(self.value(x).data(), cin, h, wd, k)
        };
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in out.chunks_mut(hw).enumerate() {
                row.fill(bias[o]);
            }
        }
        kernels::gemm_nn(self.value(w).data(), &cols, &mut out, cout, kk, hw);
        let needs = self.requires_grad(x) || self.requires_grad(w);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "conv2d",
            Tensor::from_parts(vec![cout, h, wd], out),
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                cols: if needs { cols } else { Vec::new() },
            },
        )
    }

    /// Transposed convolution, kernel 2, stride 2. `x[C_in×H×W]`,
    /// `w[C_in×C_out×2×2]`, output `C_out×2H×2W`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sw[2] != 2 || sw[3] != 2 {
            return Err(Error::ShapeMismatch {
                op: "deconv2d",
                left: sx,
                right: sw,
            });
        }
        let (cin, h, wd, cout) = (sx[0], sx[1], sx[2], sw[1]);
        let (oh, ow) = (2 * h, 2 * wd);
        let hw = h * wd;
        // taps[(o, a, b) × (i, j)] = Σ_c w[c, (o,a,b)] x[c, (i,j)]
        let mut taps = vec![0.0; cout * 4 * hw];
        kernels::gemm_tn(self.value(w).data(), self.value(x).data(), &mut taps, cout * 4, cin, hw);
        let mut out = vec![0.0; cout * oh * ow];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for o in 0..cout {
            let bo = bias.as_ref().map_or(0.0, |b| b[o]);
            for a in 0..2 {
                for bb in 0..2 {
                    let t = &taps[((o * 2 + a) * 2 + bb) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..wd {
                            out[(o * oh + 2 * i + a) * ow + 2 * j + bb] = t[i * wd + j] + bo;
                        }
                    }
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "deconv2d",
            Tensor::from_parts(vec![cout, oh, ow], out),
            &inputs,
            Op::Deconv2d { x, w, b },
        )
    }

    /// 2×2 max pooling, stride 2. Ties resolve to the first position in
    /// row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                msg: format!("expected C×H×W with even H and W, got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (ch * h + 2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (ch * oh + i) * ow + j;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        self.push(
            "maxpool2d",
            Tensor::from_parts(vec![c, oh, ow], out),
            &[x],
            Op::MaxPool2d { x, argmax },
        )
    }

    /// 2× bilinear upsampling of `C×H×W`, half-pixel centers.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "upsample2x",
                msg: format!("expected C×H×W, got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let ty = kernels::bilinear_taps(h, oh);
        let tx = kernels::bilinear_taps(w, ow);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        self.push(
            "upsample2x",
            Tensor::from_parts(vec![c, oh, ow], out),
            &[x],
            Op::Upsample2x { x },
        )
    }

    // ------------------------------------------------------------- structural

    /// Join along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "no operands".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::InvalidShape {
                    op: "concat",
                    msg: format!("operand {i} has shape {s:?}, incompatible with {base:?} on axis {axis}"),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let s = self.shape(x).to_vec();
        if start + len > s[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                msg: format!("range {start}..{} exceeds extent {}", start + len, s[axis]),
            });
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_parts(shape, out),
            &[x],
            Op::Narrow { x, axis, start },
        )
    }

    /// Gather rows of a matrix: `out[r] = x[rows[r]]`.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::InvalidShape {
                op: "index_select",
                msg: format!("row index out of range for {s:?}"),
            });
        }
        let d = s[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        self.push(
            "index_select",
            Tensor::from_parts(vec![rows.len(), d], out),
            &[x],
            Op::IndexSelect {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Broadcast `x` to `shape` (right-aligned, singleton or missing leading
    /// dims expand).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        match kernels::broadcast_shape(&s, shape) {
            Some(ref b) if b == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    left: s,
                    right: shape.to_vec(),
                })
            }
        }
        let map = kernels::broadcast_index_map(&s, shape);
        let src = self.value(x).data();
        let out = map.iter().map(|&i| src[i]).collect();
        self.push(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), out),
            &[x],
            Op::BroadcastTo { x, map },
        )
    }

    // ---------------------------------------------------------------- backward

    /// Populate gradients of the scalar `loss` with respect to every recorded
    /// value that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, maps } => match maps {
                None => {
                    if wants(*a) {
                        acc(*a, g.to_vec());
                    }
                    if wants(*b) {
                        acc(*b, g.to_vec());
                    }
                }
                Some((ma, mb)) => {
                    for (v, map) in [(*a, ma), (*b, mb)] {
                        if wants(v) {
                            let mut d = vec![0.0; nodes[v.0].value.numel()];
                            for (gi, &src) in g.iter().zip(map) {
                                d[src] += gi;
                            }
                            acc(v, d);
                        }
                    }
                }
            },
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Unary { x, kind } => {
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                let d = match kind {
                    Pointwise::Relu => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Pointwise::Gelu => g.iter().zip(xv).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
                    Pointwise::Sigmoid => g.iter().zip(yv).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                };
                acc(*x, d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::L2Normalize { x, axis, norms } => {
                let xv = nodes[x.0].value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let n = norms[o * inner + i];
                        let s = n + L2_EPS;
                        let xg: f64 = (0..len).map(|j| xv[at(j)] * g[at(j)]).sum();
                        let coef = if n > 0.0 { xg / (n * s * s) } else { 0.0 };
                        for j in 0..len {
                            d[at(j)] = g[at(j)] / s - xv[at(j)] * coef;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm_nt(g, nodes[b.0].value.data(), &mut d, m, n, k);
                    acc(*a, d);
                }
                if wants(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm_tn(nodes[a.0].value.data(), g, &mut d, k, m, n);
                    acc(*b, d);
                }
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                acc(*x, kernels::transpose(g, s[0], s[1]));
            }
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Conv2d { x, w, b, k, cols } => {
                let sx = nodes[x.0].value.shape();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = node.value.shape()[0];
                let hw = h * wd;
                let kk = cin * k * k;
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, g.chunks(hw).map(|row| row.iter().sum()).collect());
                    }
                }
                if wants(*w) {
                    let mut d = vec![0.0; cout * kk];
                    kernels::gemm_nt(g, cols, &mut d, cout, hw, kk);
                    acc(*w, d);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; kk * hw];
                    kernels::gemm_tn(nodes[w.0].value.data(), g, &mut dcols, kk, cout, hw);
                    let d = if *k == 1 {
                        dcols
                    } else {
                        kernels::col2im(&dcols, cin, h, wd, *k)
                    };
                    acc(*x, d);
                }
            }
            Op::Deconv2d { x, w, b } => {
                let sx = nodes[x.0].value.shape();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = node.value.shape()[0];
                let (oh, ow) = (2 * h, 2 * wd);
                let hw = h * wd;
                // gather output gradient back into tap layout
                let mut gt = vec![0.0; cout * 4 * hw];
                for o in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let t = &mut gt[((o * 2 + a) * 2 + bb) * hw..][..hw];
                            for i in 0..h {
                                for j in 0..wd {
                                    t[i * wd + j] = g[(o * oh + 2 * i + a) * ow + 2 * j + bb];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, gt.chunks(4 * hw).map(|c| c.iter().sum()).collect());
                    }
                }
                if wants(*w) {
                    let mut d = vec![0.0; cin * cout * 4];
                    kernels::gemm_nt(nodes[x.0].value.data(), &gt, &mut d, cin, hw, cout * 4);
                    acc(*w, d);
                }
                if wants(*x) {
                    let mut d = vec![0.0; cin * hw];
                    kernels::gemm_nn(nodes[w.0].value.data(), &gt, &mut d, cin, cout * 4, hw);
                    acc(*x, d);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut d = vec![0.0; nodes[x.0].value.numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                acc(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gv = nodes[gamma.0].value.data();
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; len];
                    let mut db = vec![0.0; len];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let at = (o * len + j) * inner + i;
                                dg[j] += g[at] * xhat[at];
                                db[j] += g[at];
                            }
                        }
                    }
                    if wants(*gamma) {
                        acc(*gamma, dg);
                    }
                    if wants(*beta) {
                        acc(*beta, db);
                    }
                }
                if wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    let nf = len as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..len {
                                let dh = g[at(j)] * gv[j];
                                s1 += dh;
                                s2 += dh * xhat[at(j)];
                            }
                            let inv = inv_std[o * inner + i];
                            for j in 0..len {
                                let dh = g[at(j)] * gv[j];
                                d[at(j)] = inv / nf * (nf * dh - s1 - xhat[at(j)] * s2);
                            }
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::Upsample2x { x } => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g[(ch * oh + oy) * ow + ox];
                            plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let mut slices: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(nodes[p.0].value.numel()))
                    .collect();
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let len = nodes[p.0].value.shape()[*axis] * inner;
                        slices[pi].extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                for (p, d) in parts.iter().zip(slices) {
                    if wants(*p) {
                        acc(*p, d);
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = nodes[x.0].value.shape();
                let (outer, ext, inner) = split_axis(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::IndexSelect { x, rows } => {
                let d_cols = nodes[x.0].value.shape()[1];
                let mut d = vec![0.0; nodes[x.0].value.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d_cols..(r + 1) * d_cols], &mut d[src * d_cols..(src + 1) * d_cols]);
                }
                acc(*x, d);
            }
            Op::BroadcastTo { x, map } => {
                let mut d = vec![0.0; nodes[x.0].value.numel()];
                for (gi, &src) in g.iter().zip(map) {
                    d[src] += gi;
                }
                acc(*x, d);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                let s = nodes[logits.0].value.shape();
                let (n, hw) = (s[0], s[1] * s[2]);
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (p, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for c in 0..n {
                        let onehot = if c == *t { 1.0 } else { 0.0 };
                        d[c * hw + p] = (probs[c * hw + p] - onehot) * scale;
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => kernels::axpy(1.0, &contrib, existing),
        slot @ None => *slot = Some(contrib),
    }
}
