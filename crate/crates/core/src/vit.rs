//! Plain ViT feature extractor with interleaved window and global attention.

use crate::error::{Error, Result};
use crate::layers::{Linear, Norm, PROJ_STD};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    /// Window edge in patches.
    pub window_size: usize,
    /// Blocks per subset; the last block of each subset attends globally.
    pub subset_size: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    pub fn tiny(img_size: usize) -> Self {
        Self {
            img_size,
            patch_size: PATCH_SIZE,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            n_heads: 4,
            window_size: 2,
            subset_size: 2,
            mlp_ratio: 4,
        }
    }

    pub fn small(img_size: usize) -> Self {
        Self {
            embed_dim: 128,
            depth: 8,
            n_heads: 8,
            ..Self::tiny(img_size)
        }
    }

    /// ViT-B sized backbone (86M parameters at 1024px).
    pub fn base(img_size: usize) -> Self {
        Self {
            embed_dim: 768,
            depth: 12,
            n_heads: 12,
            window_size: 14.min(img_size / PATCH_SIZE),
            subset_size: 3,
            ..Self::tiny(img_size)
        }
    }

    pub fn preset(name: &str, img_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(img_size)),
            "small" => Ok(Self::small(img_size)),
            "base" => Ok(Self::base(img_size)),
            other => Err(Error::config(format!("unknown backbone preset {other:?}"))),
        }
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.img_size == 0 || !self.img_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "img_size {} must be a positive multiple of patch_size {}",
                self.img_size, self.patch_size
            ));
        }
        if self.window_size == 0 || !self.grid().is_multiple_of(self.window_size) {
            return fail(format!(
                "patch grid {} is not divisible by window_size {}",
                self.grid(),
                self.window_size
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.subset_size == 0 || !self.depth.is_multiple_of(self.subset_size) {
            return fail(format!(
                "depth {} is not divisible by subset_size {}",
                self.depth, self.subset_size
            ));
        }
        if self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 || self.in_channels == 0 {
            return fail("mlp_ratio and in_channels must be positive".into());
        }
        Ok(())
    }

    /// Indices of the blocks that use global attention.
    pub fn global_blocks(&self) -> Vec<usize> {
        (1..=self.depth / self.subset_size)
            .map(|k| self.subset_size * k - 1)
            .collect()
    }

    pub fn mode_of(&self, block: usize) -> AttentionMode {
        if (block + 1).is_multiple_of(self.subset_size) {
            AttentionMode::Global
        } else {
            AttentionMode::Window
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Window,
    Global,
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v`. Returns the output and
/// the attention weights (rows sum to one).
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(k)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Token order that makes each window contiguous: window-major, row-major
/// inside each window.
pub fn window_order(grid: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || !grid.is_multiple_of(window) {
        return Err(Error::InvalidShape {
            op: "window_partition",
            msg: format!("grid {grid} is not divisible into windows of {window}"),
        });
    }
    let per_side = grid / window;
    let mut order = Vec::with_capacity(grid * grid);
    for wy in 0..per_side {
        for wx in 0..per_side {
            for y in 0..window {
                for x in 0..window {
                    order.push((wy * window + y) * grid + wx * window + x);
                }
            }
        }
    }
    Ok(order)
}

/// Fused q/k/v projection. Keys carry no bias: a key bias shifts every score
/// in a row equally and cancels in the softmax.
struct QkvProjection {
    w: ParamId,
    q_bias: ParamId,
    v_bias: ParamId,
    dim: usize,
}

impl QkvProjection {
    fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, dim: usize) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), trunc_normal(&[3 * dim, dim], PROJ_STD, rng)),
            q_bias: store.add(format!("{name}.q_bias"), Tensor::zeros(vec![dim])),
            v_bias: store.add(format!("{name}.v_bias"), Tensor::zeros(vec![dim])),
            dim,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let qb = tape.param(store, self.q_bias);
        let vb = tape.param(store, self.v_bias);
        let kb = tape.constant(Tensor::zeros(vec![self.dim]));
        let b = tape.concat(&[qb, kb, vb], 0)?;
        tape.linear(x, w, Some(b))
    }
}

pub struct Block {
    norm1: Norm,
    qkv: QkvProjection,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

pub struct VitBackbone {
    config: VitConfig,
    patch: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
}

/// Backbone output: the spatial map `F` plus the attention mode each block
/// ran with.
pub struct BackboneOutput {
    pub features: Var,
    pub modes: Vec<AttentionMode>,
}

impl VitBackbone {
    pub fn new(config: VitConfig, store: &mut ParamStore, rng: &mut StreamRng, prefix: &str) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_dim = config.in_channels * config.patch_size * config.patch_size;
        let patch = Linear::new(store, rng, &format!("{prefix}.patch_embed"), d, patch_dim);
        let pos_embed = store.add(format!("{prefix}.pos_embed"), Tensor::zeros(vec![config.num_tokens(), d]));
        let hidden = d * config.mlp_ratio;
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("{prefix}.blocks.{i}");
                Block {
                    norm1: Norm::new(store, &format!("{p}.norm1"), d),
                    qkv: QkvProjection::new(store, rng, &format!("{p}.attn.qkv"), d),
                    proj: Linear::new(store, rng, &format!("{p}.attn.proj"), d, d),
                    norm2: Norm::new(store, &format!("{p}.norm2"), d),
                    fc1: Linear::new(store, rng, &format!("{p}.mlp.fc1"), hidden, d),
                    fc2: Linear::new(store, rng, &format!("{p}.mlp.fc2"), d, hidden),
                }
            })
            .collect();
        let norm = Norm::new(store, &format!("{prefix}.norm"), d);
        Ok(Self {
            config,
            patch,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn patch_weight(&self) -> ParamId {
        self.patch.w
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    /// Cut `image[C×H×W]` into row-major patches, each flattened
    /// channel-major to a `C·p·p` vector: `n × (C·p·p)`.
    pub fn patchify(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let c = self.config.in_channels;
        let size = self.config.img_size;
        let p = self.config.patch_size;
        if tape.shape(image) != [c, size, size] {
            return Err(Error::InvalidShape {
                op: "patch_embed",
                msg: format!("expected image {c}×{size}×{size}, got {:?}", tape.shape(image)),
            });
        }
        let grid = size / p;
        let mut rows = Vec::with_capacity(c * size * size);
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for y in 0..p {
                        for x in 0..p {
                            rows.push((ch * size + gy * p + y) * size + gx * p + x);
                        }
                    }
                }
            }
        }
        let column = tape.reshape(image, &[c * size * size, 1])?;
        let picked = tape.index_select(column, &rows)?;
        tape.reshape(picked, &[grid * grid, c * p * p])
    }

    /// Linear patch embedding plus the learned position table: `n × d`.
    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let patches = self.patchify(tape, image)?;
        let tokens = self.patch.forward(tape, store, patches)?;
        let pos = tape.param(store, self.pos_embed);
        tape.add(tokens, pos)
    }

    /// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        index: usize,
        tokens: Var,
        mode: AttentionMode,
    ) -> Result<Var> {
        let block = &self.blocks[index];
        let h = block.norm1.forward(tape, store, tokens, 1)?;
        let attn = self.attention(tape, store, block, h, mode)?;
        let x = tape.add(tokens, attn)?;
        let h = block.norm2.forward(tape, store, x, 1)?;
        let h = block.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = block.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, block: &Block, x: Var, mode: AttentionMode) -> Result<Var> {
        let n = tape.shape(x)[0];
        let d = self.config.embed_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let grid = self.config.grid();
        let (order, group) = match mode {
            AttentionMode::Global => (None, n),
            AttentionMode::Window => {
                let w = self.config.window_size;
                (Some(window_order(grid, w)?), w * w)
            }
        };
        if !n.is_multiple_of(group) {
            return Err(Error::InvalidShape {
                op: "attention",
                msg: format!("{n} tokens cannot be split into groups of {group}"),
            });
        }
        let qkv = block.qkv.forward(tape, store, x)?;
        let qkv = match &order {
            Some(order) => tape.index_select(qkv, order)?,
            None => qkv,
        };
        let mut groups = Vec::with_capacity(n / group);
        for g in 0..n / group {
            let rows = tape.narrow(qkv, 0, g * group, group)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.narrow(rows, 1, hd * dh, dh)?;
                let k = tape.narrow(rows, 1, d + hd * dh, dh)?;
                let v = tape.narrow(rows, 1, 2 * d + hd * dh, dh)?;
                head_out.push(attend(tape, q, k, v)?.0);
            }
            groups.push(tape.concat(&head_out, 1)?);
        }
        let mut out = tape.concat(&groups, 0)?;
        if let Some(order) = &order {
            let mut inverse = vec![0; n];
            for (pos, &tok) in order.iter().enumerate() {
                inverse[tok] = pos;
            }
            out = tape.index_select(out, &inverse)?;
        }
        block.proj.forward(tape, store, out)
    }

    /// Full backbone: embed, run every block, final norm, reshape to
    /// `d × (H/16) × (W/16)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<BackboneOutput> {
        let mut x = self.patch_embed(tape, store, image)?;
        let mut modes = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let mode = self.config.mode_of(i);
            x = self.block_forward(tape, store, i, x, mode)?;
            modes.push(mode);
        }
        let x = self.norm.forward(tape, store, x, 1)?;
        let xt = tape.transpose(x)?;
        let g = self.config.grid();
        let features = tape.reshape(xt, &[self.config.embed_dim, g, g])?;
        Ok(BackboneOutput { features, modes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::rng;
    use rand::Rng;

    fn random_image(c: usize, size: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed);
        Tensor::new(vec![c, size, size], (0..c * size * size).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    fn build(config: VitConfig, seed: u64) -> (VitBackbone, ParamStore) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed);
        let vit = VitBackbone::new(config, &mut store, &mut r, "vit").unwrap();
        (vit, store)
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::tiny(64).validate().is_ok());
        assert!(VitConfig { depth: 0, ..VitConfig::tiny(64) }.validate().is_err());
        assert!(VitConfig::tiny(72).validate().is_err());
        assert!(VitConfig { window_size: 3, ..VitConfig::tiny(64) }.validate().is_err());
        assert!(VitConfig { n_heads: 3, ..VitConfig::tiny(64) }.validate().is_err());
        assert_eq!(VitConfig::tiny(64).global_blocks(), vec![1, 3]);
        assert_eq!(VitConfig::small(64).global_blocks(), vec![1, 3, 5, 7]);
    }

    #[test]
    fn patch_embed_token_count() {
        let (vit, store) = build(VitConfig::tiny(64), 1);
        let mut tape = Tape::new();
        let img = tape.constant(random_image(3, 64, 2));
        let tokens = vit.patch_embed(&mut tape, &store, img).unwrap();
        assert_eq!(tape.shape(tokens), &[16, 64]);
    }

    #[test]
    fn zero_image_gives_bias_rows() {
        let (vit, mut store) = build(VitConfig::tiny(32), 3);
        let bias = Tensor::from_vec((0..64).map(|i| i as f64 * 0.01).collect());
        let id = store.id("vit.patch_embed.bias").unwrap();
        store.set(id, bias.clone()).unwrap();
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(vec![3, 32, 32]));
        let tokens = vit.patch_embed(&mut tape, &store, img).unwrap();
        for row in tape.value(tokens).data().chunks(64) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn swapping_patches_swaps_projections() {
        let (vit, store) = build(VitConfig::tiny(32), 4);
        let img = random_image(3, 32, 5);
        // swap patch (0,0) with patch (1,1)
        let mut swapped = img.to_vec();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let a = (c * 32 + y) * 32 + x;
                    let b = (c * 32 + 16 + y) * 32 + 16 + x;
                    swapped.swap(a, b);
                }
            }
        }
        let swapped = Tensor::new(vec![3, 32, 32], swapped).unwrap();
        let project = |img: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(img);
            let p = vit.patchify(&mut tape, v).unwrap();
            let w = tape.param(&store, vit.patch_weight());
            let y = tape.linear(p, w, None).unwrap();
            tape.value(y).clone()
        };
        let a = project(img);
        let b = project(swapped);
        let row = |t: &Tensor, r: usize| t.data()[r * 64..(r + 1) * 64].to_vec();
        assert_eq!(row(&a, 0), row(&b, 3));
        assert_eq!(row(&a, 3), row(&b, 0));
        assert_eq!(row(&a, 1), row(&b, 1));
    }

    #[test]
    fn full_window_equals_global() {
        let config = VitConfig {
            window_size: 4,
            ..VitConfig::tiny(64)
        };
        let (vit, store) = build(config, 6);
        let mut r = rng::stream(7);
        let tokens = Tensor::new(vec![16, 64], (0..16 * 64).map(|_| r.random::<f64>() - 0.5).collect()).unwrap();
        let run = |mode| {
            let mut tape = Tape::new();
            let x = tape.constant(tokens.clone());
            let y = vit.block_forward(&mut tape, &store, 0, x, mode).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(AttentionMode::Window), run(AttentionMode::Global));
    }

    #[test]
    fn equal_tokens_match_single_token_path() {
        let config = VitConfig::tiny(64);
        let (vit, store) = build(config, 8);
        let mut r = rng::stream(9);
        let row: Vec<f64> = (0..64).map(|_| r.random::<f64>() - 0.5).collect();
        let mut tape = Tape::new();
        let all = tape.constant(Tensor::new(vec![16, 64], row.repeat(16)).unwrap());
        let y = vit.block_forward(&mut tape, &store, 1, all, AttentionMode::Global).unwrap();
        // one token attending to itself: weights are exactly one
        let single = tape.constant(Tensor::new(vec![1, 64], row.clone()).unwrap());
        let block = &vit.blocks[1];
        let h = block.norm1.forward(&mut tape, &store, single, 1).unwrap();
        let qkv = block.qkv.forward(&mut tape, &store, h).unwrap();
        let v = tape.narrow(qkv, 1, 128, 64).unwrap();
        let a = block.proj.forward(&mut tape, &store, v).unwrap();
        let x = tape.add(single, a).unwrap();
        let h = block.norm2.forward(&mut tape, &store, x, 1).unwrap();
        let h = block.fc1.forward(&mut tape, &store, h).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = block.fc2.forward(&mut tape, &store, h).unwrap();
        let want = tape.add(x, h).unwrap();
        let want = tape.value(want).data().to_vec();
        for out_row in tape.value(y).data().chunks(64) {
            for (a, b) in out_row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng::stream(10);
        let mut t = Tape::new();
        let mut rand_mat = |t: &mut Tape, n, d| {
            t.constant(Tensor::new(vec![n, d], (0..n * d).map(|_| r.random::<f64>() * 4.0 - 2.0).collect()).unwrap())
        };
        let q = rand_mat(&mut t, 5, 3);
        let k = rand_mat(&mut t, 7, 3);
        let v = rand_mat(&mut t, 7, 2);
        let (out, w) = attend(&mut t, q, k, v).unwrap();
        assert_eq!(t.shape(out), &[5, 2]);
        for row in t.value(w).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_partition_rejects_indivisible_grid() {
        assert!(window_order(4, 3).is_err());
        assert_eq!(window_order(4, 2).unwrap()[..4], [0, 1, 4, 5]);
    }

    #[test]
    fn backbone_shape_and_mode_trace() {
        let (vit, store) = build(VitConfig::tiny(64), 11);
        let mut tape = Tape::new();
        let img = tape.constant(random_image(3, 64, 12));
        let out = vit.forward(&mut tape, &store, img).unwrap();
        assert_eq!(tape.shape(out.features), &[64, 4, 4]);
        use AttentionMode::*;
        assert_eq!(out.modes, vec![Window, Global, Window, Global]);
    }

    #[test]
    fn backbone_gradient_passes_check() {
        let config = VitConfig {
            embed_dim: 16,
            n_heads: 2,
            depth: 2,
            ..VitConfig::tiny(32)
        };
        let (vit, store) = build(config, 13);
        let store = crate::gradcheck::randomized(&store, 15, 0.5);
        let img = random_image(3, 32, 14);
        // ~19k parameters include some with gradients near 1e-7; the wider
        // step keeps their finite differences above roundoff
        let report = grad_check_params(&store, &[img], 1e-4, |tape, store, v| {
            Ok(vit.forward(tape, store, v[0])?.features)
        })
        .unwrap();
        assert_eq!(report.checked, store.num_elements() + 3 * 32 * 32);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
