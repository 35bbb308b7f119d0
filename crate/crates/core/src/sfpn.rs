//! Simple feature pyramid: four independent resize stacks over the single
//! backbone map.

use crate::error::{Error, Result};
use crate::layers::{Conv, Deconv, Norm};
use crate::params::ParamStore;
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};

/// Scale of the backbone map relative to the image.
pub const FEATURE_SCALE: usize = 16;
/// Pyramid scales, coarse to fine.
pub const SCALES: [usize; 4] = [16, 8, 4, 2];
pub const DEFAULT_CHANNELS: usize = 256;

/// `log2(S_f) - log2(S_d)`: positive means upsample.
pub fn num_resizes(feature_scale: usize, target_scale: usize) -> Result<i32> {
    for s in [feature_scale, target_scale] {
        if !s.is_power_of_two() {
            return Err(Error::config(format!("pyramid scale {s} is not a power of two")));
        }
    }
    Ok(feature_scale.trailing_zeros() as i32 - target_scale.trailing_zeros() as i32)
}

/// Channel width after each deconvolution: halve, but never below `floor`
/// (and never widen a map that is already at or under it).
pub fn deconv_widths(in_channels: usize, floor: usize, steps: usize) -> Vec<usize> {
    let mut c = in_channels;
    (0..steps)
        .map(|_| {
            c = (c / 2).max(floor.min(c));
            c
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Deconv,
    MaxPool,
}

/// What one level actually executed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LevelTrace {
    pub resizes: Vec<Resize>,
    pub pre_activations: usize,
}

enum Step {
    Up { pre: Option<Norm>, deconv: Deconv },
    Pool,
}

pub struct SfpnLevel {
    scale: usize,
    steps: Vec<Step>,
    conv1: Conv,
    norm1: Norm,
    conv3: Conv,
    norm3: Norm,
}

impl SfpnLevel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        in_channels: usize,
        channels: usize,
        feature_scale: usize,
        scale: usize,
    ) -> Result<Self> {
        let n = num_resizes(feature_scale, scale)?;
        let count = n.unsigned_abs() as usize;
        let mut c = in_channels;
        let mut steps = Vec::with_capacity(count);
        if n < 0 {
            steps.extend((0..count).map(|_| Step::Pool));
        } else {
            for (i, out) in deconv_widths(in_channels, channels, count).into_iter().enumerate() {
                let pre = (i > 0).then(|| Norm::new(store, &format!("{name}.up.{i}.norm"), c));
                let deconv = Deconv::new(store, rng, &format!("{name}.up.{i}.deconv"), out, c);
                steps.push(Step::Up { pre, deconv });
                c = out;
            }
        }
        Ok(Self {
            scale,
            steps,
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), channels, c, 1),
            norm1: Norm::new(store, &format!("{name}.norm1"), channels),
            conv3: Conv::new(store, rng, &format!("{name}.conv3"), channels, channels, 3),
            norm3: Norm::new(store, &format!("{name}.norm3"), channels),
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<(Var, LevelTrace)> {
        let mut trace = LevelTrace::default();
        let mut x = features;
        for step in &self.steps {
            match step {
                Step::Pool => {
                    x = tape.maxpool2d(x)?;
                    trace.resizes.push(Resize::MaxPool);
                }
                Step::Up { pre, deconv } => {
                    if let Some(norm) = pre {
                        x = norm.forward(tape, store, x, 0)?;
                        x = tape.gelu(x)?;
                        trace.pre_activations += 1;
                    }
                    x = deconv.forward(tape, store, x)?;
                    trace.resizes.push(Resize::Deconv);
                }
            }
        }
        let x = self.conv1.forward(tape, store, x)?;
        let x = self.norm1.forward(tape, store, x, 0)?;
        let x = self.conv3.forward(tape, store, x)?;
        let x = self.norm3.forward(tape, store, x, 0)?;
        Ok((x, trace))
    }
}

/// Pyramid levels ordered as [`SCALES`].
pub struct Pyramid {
    pub levels: Vec<(usize, Var)>,
    pub traces: Vec<LevelTrace>,
}

impl Pyramid {
    pub fn level(&self, scale: usize) -> Option<Var> {
        self.levels.iter().find(|(s, _)| *s == scale).map(|(_, v)| *v)
    }
}

pub struct Sfpn {
    levels: Vec<SfpnLevel>,
    channels: usize,
}

impl Sfpn {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, prefix: &str, in_channels: usize, channels: usize) -> Result<Self> {
        if channels == 0 || in_channels == 0 {
            return Err(Error::config("pyramid channel widths must be positive"));
        }
        let levels = SCALES
            .iter()
            .map(|&s| SfpnLevel::new(store, rng, &format!("{prefix}.p{s}"), in_channels, channels, FEATURE_SCALE, s))
            .collect::<Result<_>>()?;
        Ok(Self { levels, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> &[SfpnLevel] {
        &self.levels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Pyramid> {
        let mut levels = Vec::with_capacity(self.levels.len());
        let mut traces = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let (x, trace) = level.forward(tape, store, features)?;
            levels.push((level.scale, x));
            traces.push(trace);
        }
        Ok(Pyramid { levels, traces })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn resize_counts() {
        assert_eq!(num_resizes(16, 16).unwrap(), 0);
        assert_eq!(num_resizes(16, 2).unwrap(), 3);
        assert_eq!(num_resizes(16, 32).unwrap(), -1);
        assert!(num_resizes(16, 6).is_err());
        assert!(num_resizes(12, 4).is_err());
    }

    #[test]
    fn width_schedule() {
        assert_eq!(deconv_widths(768, 256, 3), vec![384, 256, 256]);
        assert_eq!(deconv_widths(64, 256, 3), vec![64, 64, 64]);
        assert_eq!(deconv_widths(64, 16, 3), vec![32, 16, 16]);
        assert!(deconv_widths(64, 16, 0).is_empty());
    }

    #[test]
    fn downsample_branch_pools_once() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1);
        let level = SfpnLevel::new(&mut store, &mut r, "p32", 4, 6, 16, 32).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(vec![4, 4, 4], 0.5));
        let (out, trace) = level.forward(&mut tape, &store, f).unwrap();
        assert_eq!(trace.resizes, vec![Resize::MaxPool]);
        assert_eq!(trace.pre_activations, 0);
        assert_eq!(tape.shape(out), &[6, 2, 2]);
    }

    #[test]
    fn identity_scale_keeps_extent() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2);
        let level = SfpnLevel::new(&mut store, &mut r, "p16", 8, 256, 16, 16).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(vec![8, 4, 4], 0.1));
        let (out, trace) = level.forward(&mut tape, &store, f).unwrap();
        assert!(trace.resizes.is_empty());
        assert_eq!(tape.shape(out), &[256, 4, 4]);
    }
}
