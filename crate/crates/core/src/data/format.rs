//! Tile file format and dataset directories.
//!
//! A tile file is, little-endian: magic `GVT1`, u32 version, u32 H, u32 W,
//! u32 C, f32 raster (C·H·W), u8 mask (H·W), u16 mask ignore value, f64 lon,
//! f64 lat, u8 split, u32 site id, and a CRC32 of every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Split, TileRecord, IGNORE_INDEX};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::loc::GeoCoord;

pub const TILE_MAGIC: [u8; 4] = *b"GVT1";
pub const TILE_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.txt";

pub fn encode_tile(t: &TileRecord) -> Result<Vec<u8>> {
    t.validate()?;
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::config(format!("dimension {v} exceeds u32")));
    let mut w = Writer::default();
    w.bytes(&TILE_MAGIC);
    w.u32(TILE_VERSION);
    w.u32(dim(t.height)?);
    w.u32(dim(t.width)?);
    w.u32(dim(t.channels)?);
    for &v in &t.raster {
        w.f32(v);
    }
    w.bytes(&t.mask);
    w.u16(u16::from(IGNORE_INDEX));
    w.f64(t.coord.lon());
    w.f64(t.coord.lat());
    w.u8(t.split.code());
    w.u32(t.site_id);
    Ok(w.finish())
}

pub fn decode_tile(bytes: &[u8]) -> Result<TileRecord, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(TILE_MAGIC)?;
    let version = r.u32()?;
    if version != TILE_VERSION {
        return Err(FormatError::Version(version));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let hw = height
        .checked_mul(width)
        .filter(|hw| hw.checked_mul(channels).and_then(|n| n.checked_mul(4)).is_some())
        .ok_or_else(|| FormatError::Malformed(format!("dimensions {channels}×{height}×{width} overflow")))?;
    // raster, mask, ignore, lon, lat, split, site, crc
    r.need(channels * hw * 4 + hw + 2 + 8 + 8 + 1 + 4 + 4)?;
    let raster = r.take(channels * hw * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let mask = r.take(hw)?.to_vec();
    let ignore = r.u16()?;
    let lon = r.f64()?;
    let lat = r.f64()?;
    let split = r.u8()?;
    let site_id = r.u32()?;
    r.checksum()?;
    if ignore != u16::from(IGNORE_INDEX) {
        return Err(FormatError::Malformed(format!("mask ignore value {ignore}, expected {IGNORE_INDEX}")));
    }
    let split = Split::from_code(split).ok_or_else(|| FormatError::Malformed(format!("split code {split}")))?;
    let coord = GeoCoord::new(lon, lat).map_err(|e| FormatError::Malformed(e.to_string()))?;
    if coord.lon() != lon {
        return Err(FormatError::Malformed(format!("longitude {lon} not normalized")));
    }
    let tile = TileRecord {
        channels,
        height,
        width,
        raster,
        mask,
        coord,
        split,
        site_id,
    };
    tile.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(tile)
}

pub fn write_tile(tile: &TileRecord, path: &Path) -> Result<()> {
    let bytes = encode_tile(tile)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tile(path: &Path) -> Result<TileRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tile(&bytes)?)
}

/// Tiles loaded from (or written to) a dataset directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tiles: Vec<TileRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&TileRecord> {
        self.tiles.iter().filter(|t| t.split == split).collect()
    }

    /// One more than the largest class id present in any mask.
    pub fn n_classes(&self) -> usize {
        self.tiles.iter().filter_map(TileRecord::max_class).max().map_or(0, |c| usize::from(c) + 1)
    }
}

/// Write `tile_NNNNN.gvt` files plus a manifest of `file split site` lines.
/// Returns the manifest path.
pub fn write_dataset(tiles: &[TileRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# file split site\n");
    for (i, tile) in tiles.iter().enumerate() {
        let name = format!("tile_{i:05}.gvt");
        write_tile(tile, &dir.join(&name))?;
        manifest.push_str(&format!("{name} {} {}\n", tile.split, tile.site_id));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from its manifest (or the directory holding it). Tile paths
/// are relative to the manifest.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut tiles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::config(format!("{}:{}: {msg}", manifest.display(), lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [file, split, site] = fields[..] else {
            return Err(bad(format!("expected `file split site`, got {line:?}")));
        };
        let split: Split = split.parse()?;
        let site: u32 = site.parse().map_err(|_| bad(format!("bad site id {site:?}")))?;
        let tile = read_tile(&base.join(file))?;
        if tile.split != split || tile.site_id != site {
            return Err(bad(format!("{file} holds split {} site {}", tile.split, tile.site_id)));
        }
        tiles.push(tile);
    }
    Ok(Dataset { tiles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ambiguity_sites, generate_dataset};
    use crate::par::Execution;

    fn tile() -> TileRecord {
        generate_dataset(&ambiguity_sites([1, 1, 1], 16), 2, true, Execution::Sequential).unwrap().remove(1)
    }

    #[test]
    fn round_trip() {
        let t = tile();
        let bytes = encode_tile(&t).unwrap();
        assert_eq!(bytes.len(), 20 + 3 * 256 * 4 + 256 + 2 + 16 + 1 + 4 + 4);
        assert_eq!(decode_tile(&bytes).unwrap(), t);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_tile(&tile()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tile(&bad), Err(FormatError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[100] ^= 1;
        assert!(matches!(decode_tile(&bad), Err(FormatError::Checksum { .. })));
        assert!(matches!(decode_tile(&bytes[..bytes.len() / 2]), Err(FormatError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(decode_tile(&bad), Err(FormatError::Version(2)));
    }
}
