//! Fusion of image features with a location embedding.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::loc::Granularity;
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::vit::attend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Add,
    NormAdd,
    Concat,
    NormConcat,
    ConcatNorm,
    ProjAdd,
    ProjConcat,
    CrossAttention,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Add,
        Strategy::NormAdd,
        Strategy::Concat,
        Strategy::NormConcat,
        Strategy::ConcatNorm,
        Strategy::ProjAdd,
        Strategy::ProjConcat,
        Strategy::CrossAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Add => "add",
            Strategy::NormAdd => "norm_add",
            Strategy::Concat => "concat",
            Strategy::NormConcat => "norm_concat",
            Strategy::ConcatNorm => "concat_norm",
            Strategy::ProjAdd => "proj_add",
            Strategy::ProjConcat => "proj_concat",
            Strategy::CrossAttention => "cross_attention",
        }
    }

    /// Only usable after the pyramid, where the embedding width matches.
    pub fn post_only(self) -> bool {
        matches!(self, Strategy::Add | Strategy::NormAdd)
    }

    /// Channel count of the fused map.
    pub fn out_channels(self, channels: usize, loc_dim: usize) -> usize {
        match self {
            Strategy::Add | Strategy::NormAdd | Strategy::ProjAdd | Strategy::CrossAttention => channels,
            Strategy::Concat | Strategy::NormConcat | Strategy::ConcatNorm => channels + loc_dim,
            Strategy::ProjConcat => channels + 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Pre,
    Post,
}

impl Placement {
    pub const ALL: [Placement; 2] = [Placement::Pre, Placement::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Pre => "pre",
            Placement::Post => "post",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Placement::Pre),
            "post" => Ok(Placement::Post),
            _ => Err(Error::config(format!("unknown placement {s:?} (expected pre or post)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub placement: Placement,
    pub granularity: Granularity,
    /// Location tokens for cross-attention.
    pub n_tokens: usize,
    /// Query/key width for cross-attention.
    pub d_attn: usize,
    /// Add the attended values back onto `F` instead of replacing it.
    pub residual: bool,
}

impl FusionConfig {
    pub fn new(strategy: Strategy, placement: Placement, granularity: Granularity) -> Self {
        Self {
            strategy,
            placement,
            granularity,
            n_tokens: 8,
            d_attn: 64,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.placement == Placement::Pre && self.strategy.post_only() {
            return Err(Error::config(format!(
                "fusion strategy {} is only valid post-pyramid",
                self.strategy
            )));
        }
        if self.n_tokens == 0 || self.d_attn == 0 {
            return Err(Error::config("cross-attention n_tokens and d_attn must be positive"));
        }
        Ok(())
    }

    /// `placement/strategy/granularity`, e.g. `post/concat/L40`.
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.placement, self.strategy, self.granularity)
    }
}

/// Every valid (placement, granularity, strategy) triple with default
/// cross-attention settings.
pub fn valid_configs() -> Vec<FusionConfig> {
    let mut out = Vec::new();
    for placement in [Placement::Post, Placement::Pre] {
        for granularity in Granularity::ALL {
            for strategy in Strategy::ALL {
                let c = FusionConfig::new(strategy, placement, granularity);
                if c.validate().is_ok() {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// `d` vector → `d × h × w` map with the vector at every position.
pub fn tile_location(tape: &mut Tape, loc: Var, h: usize, w: usize) -> Result<Var> {
    let d = tape.shape(loc)[0];
    let col = tape.reshape(loc, &[d, 1, 1])?;
    tape.broadcast_to(col, &[d, h, w])
}

fn spatial(tape: &Tape, f: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(f) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::InvalidShape {
            op,
            msg: format!("expected a C×H×W feature map, got {s:?}"),
        }),
    }
}

/// Parameter-free strategies: add, norm_add, concat, norm_concat,
/// concat_norm. Normalization is per position across channels.
pub fn fuse_elementwise(tape: &mut Tape, f: Var, loc: Var, strategy: Strategy) -> Result<Var> {
    let (c, h, w) = spatial(tape, f, "fuse_elementwise")?;
    let tiled = tile_location(tape, loc, h, w)?;
    let d = tape.shape(loc)[0];
    if matches!(strategy, Strategy::Add | Strategy::NormAdd) && d != c {
        return Err(Error::ShapeMismatch {
            op: strategy.as_str(),
            left: vec![c, h, w],
            right: vec![d],
        });
    }
    match strategy {
        Strategy::Add => tape.add(f, tiled),
        Strategy::NormAdd => {
            let nf = tape.l2_normalize(f, 0)?;
            let nl = tape.l2_normalize(tiled, 0)?;
            tape.add(nf, nl)
        }
        Strategy::Concat => tape.concat(&[f, tiled], 0),
        Strategy::NormConcat => {
            let nf = tape.l2_normalize(f, 0)?;
            let nl = tape.l2_normalize(tiled, 0)?;
            tape.concat(&[nf, nl], 0)
        }
        Strategy::ConcatNorm => {
            let cat = tape.concat(&[f, tiled], 0)?;
            tape.l2_normalize(cat, 0)
        }
        other => Err(Error::config(format!("{other} is not an elementwise strategy"))),
    }
}

/// `L_p = W_l L` reshaped to a `1 × H × W` raster, then added to every
/// channel (`proj_add`) or appended as one extra channel (`proj_concat`).
pub fn fuse_projection(tape: &mut Tape, f: Var, loc: Var, w_l: Var, strategy: Strategy) -> Result<Var> {
    let (_, h, w) = spatial(tape, f, "fuse_projection")?;
    let d = tape.shape(loc)[0];
    if tape.shape(w_l) != [h * w, d] {
        return Err(Error::ShapeMismatch {
            op: "fuse_projection",
            left: vec![h * w, d],
            right: tape.shape(w_l).to_vec(),
        });
    }
    let col = tape.reshape(loc, &[d, 1])?;
    let raster = tape.matmul(w_l, col)?;
    let raster = tape.reshape(raster, &[1, h, w])?;
    match strategy {
        Strategy::ProjAdd => tape.add(f, raster),
        Strategy::ProjConcat => tape.concat(&[f, raster], 0),
        other => Err(Error::config(format!("{other} is not a projection strategy"))),
    }
}

/// Cross-attention weights for one application site.
pub struct CrossAttentionParams {
    pub w_tok: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Queries from every position of `F`, keys and values from `n_tokens`
/// tokens cut from `W_tok L`. Returns `C = AV` as `C × H × W` and the
/// `HW × n_tokens` attention matrix.
pub fn fuse_cross_attention(
    tape: &mut Tape,
    f: Var,
    loc: Var,
    p: &CrossAttentionParams,
    n_tokens: usize,
    residual: bool,
) -> Result<(Var, Var)> {
    let (c, h, w) = spatial(tape, f, "fuse_cross_attention")?;
    let d_tok = tape.shape(p.w_tok)[0];
    if n_tokens == 0 || !d_tok.is_multiple_of(n_tokens) {
        return Err(Error::InvalidShape {
            op: "fuse_cross_attention",
            msg: format!("token projection of width {d_tok} does not split into {n_tokens} tokens"),
        });
    }
    let d = tape.shape(loc)[0];
    let row = tape.reshape(loc, &[1, d])?;
    let tokens = tape.linear(row, p.w_tok, None)?;
    let tokens = tape.reshape(tokens, &[n_tokens, d_tok / n_tokens])?;
    let flat = tape.reshape(f, &[c, h * w])?;
    let queries = tape.transpose(flat)?;
    let q = tape.linear(queries, p.w_q, None)?;
    let k = tape.linear(tokens, p.w_k, None)?;
    let v = tape.linear(tokens, p.w_v, None)?;
    let (out, weights) = attend(tape, q, k, v)?;
    let out = tape.transpose(out)?;
    let mut out = tape.reshape(out, &[c, h, w])?;
    if residual {
        out = tape.add(out, f)?;
    }
    Ok((out, weights))
}

enum SiteParams {
    None,
    Projection(ParamId),
    Cross { tok: Linear, q: Linear, k: Linear, v: Linear },
}

/// Fusion parameters for one feature map of fixed shape.
pub struct FusionSite {
    strategy: Strategy,
    n_tokens: usize,
    residual: bool,
    params: SiteParams,
}

impl FusionSite {
    pub fn new(
        config: &FusionConfig,
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        channels: usize,
        extent: (usize, usize),
        loc_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.strategy.post_only() && loc_dim != channels {
            return Err(Error::config(format!(
                "{} needs a location embedding of width {channels}, got {loc_dim}",
                config.strategy
            )));
        }
        let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let params = match config.strategy {
            Strategy::ProjAdd | Strategy::ProjConcat => SiteParams::Projection(store.add(
                format!("{name}.w_l"),
                trunc_normal(&[extent.0 * extent.1, loc_dim], std(loc_dim), rng),
            )),
            Strategy::CrossAttention => {
                let (n, d) = (config.n_tokens, config.d_attn);
                SiteParams::Cross {
                    tok: Linear::no_bias(store, rng, &format!("{name}.w_tok"), n * d, loc_dim, std(loc_dim)),
                    q: Linear::no_bias(store, rng, &format!("{name}.w_q"), d, channels, std(channels)),
                    k: Linear::no_bias(store, rng, &format!("{name}.w_k"), d, d, std(d)),
                    v: Linear::no_bias(store, rng, &format!("{name}.w_v"), channels, d, std(d)),
                }
            }
            _ => SiteParams::None,
        };
        Ok(Self {
            strategy: config.strategy,
            n_tokens: config.n_tokens,
            residual: config.residual,
            params,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var, loc: Var) -> Result<Var> {
        match &self.params {
            SiteParams::None => fuse_elementwise(tape, f, loc, self.strategy),
            SiteParams::Projection(w_l) => {
                let w_l = tape.param(store, *w_l);
                fuse_projection(tape, f, loc, w_l, self.strategy)
            }
            SiteParams::Cross { tok, q, k, v } => {
                let p = CrossAttentionParams {
                    w_tok: tape.param(store, tok.w),
                    w_q: tape.param(store, q.w),
                    w_k: tape.param(store, k.w),
                    w_v: tape.param(store, v.w),
                };
                Ok(fuse_cross_attention(tape, f, loc, &p, self.n_tokens, self.residual)?.0)
            }
        }
    }
}
