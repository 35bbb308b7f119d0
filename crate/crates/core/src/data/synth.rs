//! Deterministic synthetic tile generator.

use std::f64::consts::PI;

use rand::Rng;

use super::{Split, TileRecord};
use crate::error::{Error, Result};
use crate::loc::GeoCoord;
use crate::par::{self, Execution};
use crate::rng::{self, StreamRng};

/// Per-class mean colour and per-channel noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSpectrum {
    pub mean: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    /// Star-shaped blobs with a few low-order radial harmonics.
    Blobs,
    /// Random star polygons with 5 to 8 vertices.
    Polygons,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeFamily {
    pub kind: ShapeKind,
    /// Inclusive range of shapes per tile.
    pub count: (usize, usize),
    /// Radius range in pixels.
    pub radius: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteSpec {
    pub site_id: u32,
    pub center: GeoCoord,
    /// Tile centres are drawn uniformly within this many degrees of `center`.
    pub spread_deg: f64,
    /// Tiles per split, ordered train, val, test.
    pub n_tiles: [usize; 3],
    pub tile_size: usize,
    /// Indexed by class id; class 0 is background.
    pub spectra: Vec<ClassSpectrum>,
    /// Foreground classes that occur at this site.
    pub foreground: Vec<u8>,
    pub shapes: ShapeFamily,
}

impl SiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("site {}: {msg}", self.site_id)));
        if self.n_tiles.contains(&0) {
            return bad("every split needs at least one tile".into());
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(16) {
            return bad(format!("tile size {} is not a positive multiple of 16", self.tile_size));
        }
        if self.spectra.len() < 2 || self.spectra.len() > 255 {
            return bad(format!("{} classes, need 2 to 255", self.spectra.len()));
        }
        for s in &self.spectra {
            if s.mean.iter().any(|m| !(0.0..=1.0).contains(m)) || !(s.sigma >= 0.0) {
                return bad(format!("spectral mean {:?} / sigma {} out of range", s.mean, s.sigma));
            }
        }
        if self.foreground.is_empty() || self.foreground.iter().any(|&c| c == 0 || usize::from(c) >= self.spectra.len()) {
            return bad(format!("foreground classes {:?} invalid", self.foreground));
        }
        let (lo, hi) = self.shapes.count;
        let (rlo, rhi) = self.shapes.radius;
        if lo > hi || !(rlo > 0.0 && rlo <= rhi) || !(self.spread_deg >= 0.0) {
            return bad("shape count/radius or spread out of range".into());
        }
        Ok(())
    }
}

/// Two distant sites sharing one background and one foreground colour.
/// Class 1 appears only at the first site and class 2 only at the second,
/// so in ambiguity mode location is the only thing that separates them.
pub fn ambiguity_sites(n_tiles: [usize; 3], tile_size: usize) -> Vec<SiteSpec> {
    let spectra = vec![
        ClassSpectrum {
            mean: [0.25, 0.45, 0.30],
            sigma: 0.05,
        },
        ClassSpectrum {
            mean: [0.75, 0.60, 0.35],
            sigma: 0.05,
        },
        ClassSpectrum {
            mean: [0.75, 0.60, 0.35],
            sigma: 0.05,
        },
    ];
    let shapes = ShapeFamily {
        kind: ShapeKind::Blobs,
        count: (1, 3),
        radius: (tile_size as f64 / 8.0, tile_size as f64 / 3.5),
    };
    [(-150.0, 68.0), (30.0, -20.0)]
        .into_iter()
        .enumerate()
        .map(|(i, (lon, lat))| SiteSpec {
            site_id: i as u32,
            center: GeoCoord::new(lon, lat).expect("valid site centre"),
            spread_deg: 0.5,
            n_tiles,
            tile_size,
            spectra: spectra.clone(),
            foreground: vec![i as u8 + 1],
            shapes,
        })
        .collect()
}

struct Job<'a> {
    site: &'a SiteSpec,
    foreground: Vec<u8>,
    spectra: &'a [ClassSpectrum],
    split: Split,
    index: u64,
}

/// Tiles ordered by site, then split, then index within the split. Each tile
/// draws from its own stream `derive(seed, global index)`, so the result is
/// the same however the work is scheduled.
///
/// In ambiguity mode classes 1 and 2 take class 1's spectrum everywhere and
/// site `i` contains only class `1 + i % 2`.
pub fn generate_dataset(specs: &[SiteSpec], seed: u64, ambiguity: bool, exec: Execution) -> Result<Vec<TileRecord>> {
    if specs.is_empty() {
        return Err(Error::config("no sites"));
    }
    for s in specs {
        s.validate()?;
    }
    let n_classes = specs[0].spectra.len();
    if specs.iter().any(|s| s.spectra.len() != n_classes || s.tile_size != specs[0].tile_size) {
        return Err(Error::config("sites disagree on class count or tile size"));
    }
    let mut spectra = specs[0].spectra.clone();
    if ambiguity {
        if specs.len() < 2 {
            return Err(Error::config("ambiguity mode needs at least two sites"));
        }
        if n_classes < 3 {
            return Err(Error::config("ambiguity mode needs two foreground classes"));
        }
        spectra[2] = spectra[1];
    }

    let mut jobs = Vec::new();
    for (site_index, site) in specs.iter().enumerate() {
        let foreground = if ambiguity {
            vec![1 + (site_index % 2) as u8]
        } else {
            site.foreground.clone()
        };
        for split in Split::ALL {
            for _ in 0..site.n_tiles[split as usize] {
                jobs.push(Job {
                    site,
                    foreground: foreground.clone(),
                    spectra: if ambiguity { &spectra } else { &site.spectra },
                    split,
                    index: jobs.len() as u64,
                });
            }
        }
    }
    par::map(exec, &jobs, |job| generate_tile(job, seed)).into_iter().collect()
}

fn generate_tile(job: &Job, seed: u64) -> Result<TileRecord> {
    let site = job.site;
    let mut r = rng::stream(rng::derive(seed, job.index));
    let n = site.tile_size;
    let spread = site.spread_deg;
    let lon = site.center.lon() + rng::uniform(&mut r, -spread, spread);
    let lat = (site.center.lat() + rng::uniform(&mut r, -spread, spread)).clamp(-90.0, 90.0);
    let coord = GeoCoord::new(lon, lat)?;

    let mut mask = vec![0u8; n * n];
    let (lo, hi) = site.shapes.count;
    let count = r.random_range(lo..=hi);
    for _ in 0..count {
        let class = job.foreground[r.random_range(0..job.foreground.len())];
        let shape = Shape::sample(&mut r, site.shapes, n);
        for y in 0..n {
            for x in 0..n {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    mask[y * n + x] = class;
                }
            }
        }
    }

    let mut raster = vec![0f32; 3 * n * n];
    for p in 0..n * n {
        let s = job.spectra[usize::from(mask[p])];
        for c in 0..3 {
            let v = s.mean[c] + s.sigma * rng::standard_normal(&mut r);
            raster[c * n * n + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(TileRecord {
        channels: 3,
        height: n,
        width: n,
        raster,
        mask,
        coord,
        split: job.split,
        site_id: site.site_id,
    })
}

enum Shape {
    Blob {
        cx: f64,
        cy: f64,
        radius: f64,
        harmonics: [(f64, f64); 3],
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn sample(r: &mut StreamRng, family: ShapeFamily, size: usize) -> Self {
        let cx = rng::uniform(r, 0.0, size as f64);
        let cy = rng::uniform(r, 0.0, size as f64);
        let radius = rng::uniform(r, family.radius.0, family.radius.1);
        match family.kind {
            ShapeKind::Blobs => {
                let mut harmonics = [(0.0, 0.0); 3];
                for h in &mut harmonics {
                    *h = (rng::uniform(r, 0.0, 0.15), rng::uniform(r, 0.0, 2.0 * PI));
                }
                Shape::Blob { cx, cy, radius, harmonics }
            }
            ShapeKind::Polygons => {
                let k = r.random_range(5..=8);
                let vertices = (0..k)
                    .map(|i| {
                        let a = 2.0 * PI * (i as f64 + rng::uniform(r, -0.3, 0.3)) / k as f64;
                        let rr = radius * rng::uniform(r, 0.6, 1.0);
                        (cx + rr * libm::cos(a), cy + rr * libm::sin(a))
                    })
                    .collect();
                Shape::Polygon(vertices)
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Blob { cx, cy, radius, harmonics } => {
                let (dx, dy) = (x - cx, y - cy);
                let d = libm::sqrt(dx * dx + dy * dy);
                if d > radius * 1.5 {
                    return false;
                }
                let t = libm::atan2(dy, dx);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(amp, phase))| amp * libm::cos((k + 2) as f64 * t + phase))
                    .sum();
                d <= radius * (1.0 + wobble)
            }
            Shape::Polygon(v) => {
                let mut inside = false;
                let n = v.len();
                for i in 0..n {
                    let (a, b) = (v[i], v[(i + 1) % n]);
                    if (a.1 > y) != (b.1 > y) && x < a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1) {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}
