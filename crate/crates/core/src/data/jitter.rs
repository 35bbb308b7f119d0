//! Large-scale jitter: random rescale, then crop or pad back to size.

use rand::Rng;

use super::{TileRecord, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::kernels::bilinear_taps;
use crate::rng;

pub const DEFAULT_JITTER_RANGE: (f64, f64) = (0.1, 2.0);

/// Rescale by a factor drawn uniformly from `range`, then crop (when larger)
/// or pad (when smaller) at a random offset. Padded mask pixels are
/// [`IGNORE_INDEX`]; padded raster values are 0.
pub fn scale_jitter(tile: &TileRecord, range: (f64, f64), seed: u64) -> Result<TileRecord> {
    if !(range.0 > 0.0 && range.0 <= range.1 && range.1.is_finite()) {
        return Err(Error::config(format!("jitter range {range:?} must be positive and ordered")));
    }
    let mut r = rng::stream(seed);
    let factor = rng::uniform(&mut r, range.0, range.1);
    let (h, w) = scaled_extent(tile, factor);
    let oy = r.random_range(0..=h.abs_diff(tile.height));
    let ox = r.random_range(0..=w.abs_diff(tile.width));
    Ok(jitter_with(tile, factor, (oy, ox)))
}

fn scaled_extent(tile: &TileRecord, factor: f64) -> (usize, usize) {
    let h = ((tile.height as f64 * factor).round() as usize).max(1);
    let w = ((tile.width as f64 * factor).round() as usize).max(1);
    (h, w)
}

/// Deterministic core of [`scale_jitter`]. `offset` is the crop origin in the
/// rescaled tile when it is larger, or the paste origin in the output when it
/// is smaller.
pub fn jitter_with(tile: &TileRecord, factor: f64, offset: (usize, usize)) -> TileRecord {
    let (sh, sw) = scaled_extent(tile, factor);
    let (h, w) = (tile.height, tile.width);
    let ty = bilinear_taps(h, sh);
    let tx = bilinear_taps(w, sw);
    let ny: Vec<usize> = (0..sh).map(|o| nearest(o, h, sh)).collect();
    let nx: Vec<usize> = (0..sw).map(|o| nearest(o, w, sw)).collect();

    let mut raster = vec![0f32; tile.channels * h * w];
    let mut mask = vec![IGNORE_INDEX; h * w];
    for y in 0..h {
        let Some(sy) = source_index(y, sh, h, offset.0) else { continue };
        for x in 0..w {
            let Some(sx) = source_index(x, sw, w, offset.1) else { continue };
            mask[y * w + x] = tile.mask[ny[sy] * w + nx[sx]];
            let (y0, y1, fy) = ty[sy];
            let (x0, x1, fx) = tx[sx];
            for c in 0..tile.channels {
                let plane = &tile.raster[c * h * w..(c + 1) * h * w];
                let at = |yy: usize, xx: usize| f64::from(plane[yy * w + xx]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                raster[c * h * w + y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    TileRecord {
        raster,
        mask,
        ..tile.clone()
    }
}

/// Position in the rescaled axis that output index `i` reads from, if any.
fn source_index(i: usize, scaled: usize, full: usize, offset: usize) -> Option<usize> {
    let s = if scaled >= full { Some(i + offset) } else { i.checked_sub(offset) };
    s.filter(|&v| v < scaled)
}

fn nearest(out: usize, in_len: usize, out_len: usize) -> usize {
    (((out as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ambiguity_sites, generate_dataset};
    use crate::par::Execution;

    fn tile() -> TileRecord {
        generate_dataset(&ambiguity_sites([1, 1, 1], 32), 5, true, Execution::Sequential).unwrap().remove(0)
    }

    #[test]
    fn unit_factor_is_identity() {
        let t = tile();
        assert_eq!(jitter_with(&t, 1.0, (0, 0)), t);
    }

    #[test]
    fn shape_preserved_and_labels_subset() {
        let t = tile();
        for seed in 0..20 {
            let j = scale_jitter(&t, DEFAULT_JITTER_RANGE, seed).unwrap();
            assert_eq!((j.height, j.width, j.raster.len(), j.mask.len()), (t.height, t.width, t.raster.len(), t.mask.len()));
            assert_eq!(j.coord, t.coord);
            for c in &j.mask {
                assert!(*c == IGNORE_INDEX || t.mask.contains(c));
            }
        }
    }

    #[test]
    fn shrinking_pads_with_ignore() {
        let t = tile();
        let j = jitter_with(&t, 0.5, (3, 5));
        assert_eq!(j.mask[0], IGNORE_INDEX);
        assert_ne!(j.mask[3 * 32 + 5], IGNORE_INDEX);
        assert!(scale_jitter(&t, (0.0, 1.0), 0).is_err());
    }
}
