//! Synthetic geolocated tiles: generation, augmentation and file formats.

mod format;
mod jitter;
mod synth;

pub use format::{decode_tile, encode_tile, read_dataset, read_tile, write_dataset, write_tile, Dataset, TILE_MAGIC, TILE_VERSION};
pub use jitter::{jitter_with, scale_jitter, DEFAULT_JITTER_RANGE};
pub use synth::{ambiguity_sites, generate_dataset, ClassSpectrum, ShapeFamily, ShapeKind, SiteSpec};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loc::GeoCoord;
use crate::tensor::Tensor;

pub use crate::head::IGNORE_INDEX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Split::ALL.get(usize::from(code)).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s:?}")))
    }
}

/// One raster tile with its label mask and location.
#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `channels × height × width`, row-major, values in `[0, 1]`.
    pub raster: Vec<f32>,
    /// `height × width` class ids; [`IGNORE_INDEX`] marks unlabeled pixels.
    pub mask: Vec<u8>,
    pub coord: GeoCoord,
    pub split: Split,
    pub site_id: u32,
}

impl TileRecord {
    pub fn validate(&self) -> Result<()> {
        let hw = self.height * self.width;
        if self.raster.len() != self.channels * hw || self.mask.len() != hw {
            return Err(Error::InvalidShape {
                op: "tile",
                msg: format!(
                    "raster {} / mask {} values for {}×{}×{}",
                    self.raster.len(),
                    self.mask.len(),
                    self.channels,
                    self.height,
                    self.width
                ),
            });
        }
        if !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) || hw == 0 {
            return Err(Error::InvalidShape {
                op: "tile",
                msg: format!("{}×{} is not a positive multiple of 16", self.height, self.width),
            });
        }
        Ok(())
    }

    pub fn image(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.channels, self.height, self.width],
            self.raster.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Largest class id in the mask, ignoring unlabeled pixels.
    pub fn max_class(&self) -> Option<u8> {
        self.mask.iter().copied().filter(|&c| c != IGNORE_INDEX).max()
    }
}
