//! Finite-difference checks for every differentiable kernel and the model's
//! composite blocks, at small random points.

use rand::Rng;

use crate::error::Result;
use crate::fusion::{FusionConfig, FusionSite, Placement, Strategy};
use crate::gradcheck::{grad_check, grad_check_params, randomized, GradCheck, DEFAULT_EPS};
use crate::head::{seg_loss, UpBlock, IGNORE_INDEX};
use crate::loc::Granularity;
use crate::params::ParamStore;
use crate::rng::{self, StreamRng};
use crate::sfpn::SfpnLevel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{AttentionMode, VitBackbone, VitConfig};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheck,
}

fn uniform(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
}

/// Values bounded away from zero, for kinks at the origin.
fn off_zero(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    uniform(r, shape).map(|x| x.signum() * (0.1 + 0.9 * x.abs()))
}

/// A shuffled ramp: every pair of elements differs by at least 0.05, so
/// max-pool windows have no ties.
fn distinct(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    rng::shuffle(&mut v, r);
    Tensor::from_parts(shape.to_vec(), v)
}

fn labels(r: &mut StreamRng, n: usize, classes: u8) -> Vec<u8> {
    let mut t: Vec<u8> = (0..n).map(|_| r.random_range(0..classes)).collect();
    t[n / 2] = IGNORE_INDEX;
    t
}

type Kernel = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn kernels(r: &mut StreamRng) -> Vec<(&'static str, Vec<Tensor>, Kernel)> {
    let ce_truth = labels(r, 16, 3);
    vec![
        ("add", vec![uniform(r, &[4, 4]), uniform(r, &[4, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_broadcast", vec![uniform(r, &[2, 4, 4]), uniform(r, &[4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![uniform(r, &[4, 4]), uniform(r, &[4, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.scale(v[0], -1.5))),
        ("relu", vec![off_zero(r, &[4, 4])], Box::new(|t, v| t.relu(v[0]))),
        ("gelu", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.gelu(v[0]))),
        ("sigmoid", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("softmax", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_axis0", vec![uniform(r, &[3, 4])], Box::new(|t, v| t.softmax(v[0], 0))),
        ("l2_normalize", vec![uniform(r, &[4, 2, 2])], Box::new(|t, v| t.l2_normalize(v[0], 0))),
        ("sum", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.mean(v[0]))),
        (
            "layernorm",
            vec![uniform(r, &[3, 4]), uniform(r, &[4]), uniform(r, &[4])],
            Box::new(|t, v| t.layernorm(v[0], 1, v[1], v[2])),
        ),
        (
            "layernorm_channels",
            vec![uniform(r, &[4, 2, 2]), uniform(r, &[4]), uniform(r, &[4])],
            Box::new(|t, v| t.layernorm(v[0], 0, v[1], v[2])),
        ),
        (
            "cross_entropy",
            vec![uniform(r, &[3, 4, 4])],
            Box::new(move |t, v| t.cross_entropy(v[0], &ce_truth, IGNORE_INDEX)),
        ),
        ("matmul", vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![uniform(r, &[3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        (
            "linear",
            vec![uniform(r, &[3, 4]), uniform(r, &[2, 4]), uniform(r, &[2])],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
        ("reshape", vec![uniform(r, &[2, 4, 2])], Box::new(|t, v| t.reshape(v[0], &[4, 4]))),
        (
            "conv2d_3x3",
            vec![uniform(r, &[2, 4, 4]), uniform(r, &[3, 2, 3, 3]), uniform(r, &[3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
        ),
        (
            "conv2d_1x1",
            vec![uniform(r, &[4, 3, 3]), uniform(r, &[2, 4, 1, 1])],
            Box::new(|t, v| t.conv2d(v[0], v[1], None)),
        ),
        (
            "deconv2d",
            vec![uniform(r, &[4, 2, 2]), uniform(r, &[4, 2, 2, 2]), uniform(r, &[2])],
            Box::new(|t, v| t.deconv2d(v[0], v[1], Some(v[2]))),
        ),
        ("maxpool2d", vec![distinct(r, &[4, 4, 4])], Box::new(|t, v| t.maxpool2d(v[0]))),
        ("upsample2x", vec![uniform(r, &[2, 2, 3])], Box::new(|t, v| t.upsample2x(v[0]))),
        (
            "concat",
            vec![uniform(r, &[2, 4]), uniform(r, &[3, 4])],
            Box::new(|t, v| t.concat(&[v[0], v[1]], 0)),
        ),
        ("narrow", vec![uniform(r, &[4, 4])], Box::new(|t, v| t.narrow(v[0], 1, 1, 2))),
        (
            "index_select",
            vec![uniform(r, &[4, 3])],
            Box::new(|t, v| t.index_select(v[0], &[2, 0, 2, 3])),
        ),
        ("broadcast_to", vec![uniform(r, &[1, 4])], Box::new(|t, v| t.broadcast_to(v[0], &[3, 4]))),
    ]
}

fn entry(name: impl Into<String>, report: GradCheck) -> SuiteEntry {
    SuiteEntry {
        name: name.into(),
        report,
    }
}

fn composites(seed: u64, r: &mut StreamRng) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let scale = 0.5;

    // a 4×4 token grid of width 4, windows of 2×2 tokens
    let mut store = ParamStore::new();
    let config = VitConfig {
        embed_dim: 4,
        depth: 1,
        n_heads: 2,
        window_size: 2,
        subset_size: 1,
        mlp_ratio: 2,
        ..VitConfig::tiny(64)
    };
    let vit = VitBackbone::new(config, &mut store, r, "vit")?;
    let store = randomized(&store, seed ^ 1, scale);
    let tokens = uniform(r, &[16, 4]);
    for (name, mode) in [("attention_block_window", AttentionMode::Window), ("attention_block_global", AttentionMode::Global)] {
        let report = grad_check_params(&store, std::slice::from_ref(&tokens), DEFAULT_EPS, |t, s, v| {
            vit.block_forward(t, s, 0, v[0], mode)
        })?;
        out.push(entry(name, report));
    }

    let features = uniform(r, &[4, 2, 2]);
    for (name, target) in [("sfpn_level_up", 4), ("sfpn_level_down", 32)] {
        let mut store = ParamStore::new();
        let level = SfpnLevel::new(&mut store, r, "sfpn", 4, 3, 16, target)?;
        let store = randomized(&store, seed ^ 2, scale);
        let report = grad_check_params(&store, std::slice::from_ref(&features), DEFAULT_EPS, |t, s, v| {
            level.forward(t, s, v[0]).map(|(y, _)| y)
        })?;
        out.push(entry(name, report));
    }

    let mut store = ParamStore::new();
    let block = UpBlock::new(&mut store, r, "up", 3, 2, 2);
    let store = randomized(&store, seed ^ 3, scale);
    let inputs = [uniform(r, &[3, 2, 2]), uniform(r, &[2, 4, 4])];
    let report = grad_check_params(&store, &inputs, DEFAULT_EPS, |t, s, v| block.forward(t, s, v[0], Some(v[1])))?;
    out.push(entry("upsample_block", report));

    let f = uniform(r, &[4, 4, 4]);
    let loc = uniform(r, &[4]);
    for strategy in Strategy::ALL {
        let mut config = FusionConfig::new(strategy, Placement::Post, Granularity::L10);
        config.n_tokens = 2;
        config.d_attn = 4;
        let mut store = ParamStore::new();
        let site = FusionSite::new(&config, &mut store, r, "fusion", 4, (4, 4), 4)?;
        let store = randomized(&store, seed ^ 4, scale);
        let report = grad_check_params(&store, &[f.clone(), loc.clone()], DEFAULT_EPS, |t, s, v| {
            site.forward(t, s, v[0], v[1])
        })?;
        out.push(entry(format!("fusion_{}", strategy.as_str()), report));
    }

    let truth = labels(r, 16, 3);
    let report = grad_check(|t, v| seg_loss(t, v[0], &truth, IGNORE_INDEX), &[uniform(r, &[3, 4, 4])], DEFAULT_EPS)?;
    out.push(entry("seg_loss", report));
    Ok(out)
}

/// Run every check at one seed.
pub fn kernel_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut r = rng::labeled_stream(seed, "gradsuite");
    let mut out = Vec::new();
    for (name, inputs, kernel) in kernels(&mut r) {
        out.push(entry(name, grad_check(kernel, &inputs, DEFAULT_EPS)?));
    }
    out.extend(composites(seed, &mut r)?);
    Ok(out)
}

/// Worst relative error per check across `seeds`, in suite order.
pub fn suite_max_errors(seeds: &[u64]) -> Result<Vec<(String, f64)>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for &seed in seeds {
        for (i, e) in kernel_suite(seed)?.into_iter().enumerate() {
            if i == worst.len() {
                worst.push((e.name, e.report.max_rel_error));
            } else {
                worst[i].1 = worst[i].1.max(e.report.max_rel_error);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_one_seed() {
        for e in kernel_suite(3).unwrap() {
            assert!(e.report.max_rel_error < 1e-4, "{} {:?}", e.name, e.report);
            assert!(e.report.checked > 0, "{}", e.name);
        }
    }
}
