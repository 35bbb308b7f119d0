//! Cascaded-upsampler segmentation head over the pyramid.

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::ParamStore;
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const IGNORE_INDEX: u8 = 255;
pub const DEFAULT_WIDTHS: [usize; 4] = [128, 64, 32, 16];

/// `bilinear 2× → concat skip → conv3×3 → ReLU`.
pub struct UpBlock {
    conv: Conv,
}

impl UpBlock {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, in_channels: usize, skip_channels: usize, out: usize) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), out, in_channels + skip_channels, 3),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, skip: Option<Var>) -> Result<Var> {
        let up = tape.upsample2x(x)?;
        let joined = match skip {
            Some(skip) => {
                if tape.shape(skip)[1..] != tape.shape(up)[1..] {
                    return Err(Error::ShapeMismatch {
                        op: "upsample_block",
                        left: tape.shape(x).to_vec(),
                        right: tape.shape(skip).to_vec(),
                    });
                }
                tape.concat(&[up, skip], 0)?
            }
            None => up,
        };
        let y = self.conv.forward(tape, store, joined)?;
        tape.relu(y)
    }
}

/// Stem at scale 16, three skip blocks consuming scales 8, 4, 2, one plain
/// block to full resolution, then a 1×1 classifier.
pub struct UnetHead {
    blocks: Vec<UpBlock>,
    classifier: Conv,
    n_classes: usize,
}

impl UnetHead {
    /// `level_channels` are the widths of P16, P8, P4, P2 as fed to the head.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        prefix: &str,
        level_channels: [usize; 4],
        widths: [usize; 4],
        n_classes: usize,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {n_classes}")));
        }
        if widths.contains(&0) {
            return Err(Error::config("head widths must be positive"));
        }
        let mut blocks = Vec::with_capacity(4);
        let mut c = level_channels[0];
        for (i, &out) in widths.iter().enumerate() {
            let skip = level_channels.get(i + 1).copied().unwrap_or(0);
            blocks.push(UpBlock::new(store, rng, &format!("{prefix}.up{i}"), c, skip, out));
            c = out;
        }
        let classifier = Conv::new(store, rng, &format!("{prefix}.classifier"), n_classes, c, 1);
        Ok(Self {
            blocks,
            classifier,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `levels` ordered P16, P8, P4, P2; returns `N × H × W` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, levels: [Var; 4]) -> Result<Var> {
        let mut x = levels[0];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x, levels.get(i + 1).copied())?;
        }
        self.classifier.forward(tape, store, x)
    }
}

/// Per-pixel class (lowest index wins ties) and softmax probabilities.
pub fn predict(logits: &Tensor) -> Result<(Vec<u8>, Tensor)> {
    let [n, h, w] = *logits.shape() else {
        return Err(Error::InvalidShape {
            op: "predict",
            msg: format!("expected N×H×W logits, got {:?}", logits.shape()),
        });
    };
    if n > usize::from(IGNORE_INDEX) {
        return Err(Error::config(format!("{n} classes do not fit a u8 class map")));
    }
    let hw = h * w;
    let src = logits.data();
    let mut classes = vec![0u8; hw];
    let mut probs = vec![0.0; src.len()];
    for p in 0..hw {
        let mut best = 0;
        for c in 1..n {
            if src[c * hw + p] > src[best * hw + p] {
                best = c;
            }
        }
        classes[p] = best as u8;
        let max = src[best * hw + p];
        let mut z = 0.0;
        for c in 0..n {
            let e = (src[c * hw + p] - max).exp();
            probs[c * hw + p] = e;
            z += e;
        }
        for c in 0..n {
            probs[c * hw + p] /= z;
        }
    }
    Ok((classes, Tensor::from_parts(vec![n, h, w], probs)))
}

/// Mean pixel cross-entropy over pixels whose label is not `ignore_index`.
pub fn seg_loss(tape: &mut Tape, logits: Var, truth: &[u8], ignore_index: u8) -> Result<Var> {
    tape.cross_entropy(logits, truth, ignore_index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_ties() {
        let logits = Tensor::new(vec![3, 1, 2], vec![2.0, 0.5, 1.0, 0.5, 0.0, 0.5]).unwrap();
        let (classes, probs) = predict(&logits).unwrap();
        assert_eq!(classes, vec![0, 0]);
        for p in 0..2 {
            let s: f64 = (0..3).map(|c| probs.data()[c * 2 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_loss_is_log_n() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(vec![4, 2, 2]));
        let loss = seg_loss(&mut t, logits, &[0, 1, 2, 3], IGNORE_INDEX).unwrap();
        assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn skip_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut r = crate::rng::stream(3);
        let block = UpBlock::new(&mut store, &mut r, "b", 2, 2, 4);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![2, 2, 2]));
        let skip = t.constant(Tensor::zeros(vec![2, 3, 3]));
        assert!(block.forward(&mut t, &store, x, Some(skip)).is_err());
    }
}
