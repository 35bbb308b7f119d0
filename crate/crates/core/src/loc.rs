//! Location encoder: real spherical harmonics of (lon, lat) followed by a
//! small learned network.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::RwLock;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Geographic coordinate in degrees; longitude is wrapped into `[-180, 180)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoCoord {
    lon: f64,
    lat: f64,
}

impl GeoCoord {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::config("coordinate must be finite"));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::config(format!("latitude {lat} outside [-90, 90]")));
        }
        let mut lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        // rem_euclid can round up to exactly 360
        if lon >= 180.0 {
            lon -= 360.0;
        }
        Ok(Self { lon, lat })
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    fn key(&self) -> (u64, u64) {
        (self.lon.to_bits(), self.lat.to_bits())
    }
}

/// Spherical-harmonic degree of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    L10,
    L40,
}

impl Granularity {
    pub const ALL: [Granularity; 2] = [Granularity::L10, Granularity::L40];

    pub fn degree(self) -> usize {
        match self {
            Granularity::L10 => 10,
            Granularity::L40 => 40,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::L10 => "L10",
            Granularity::L40 => "L40",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L10" => Ok(Granularity::L10),
            "L40" => Ok(Granularity::L40),
            _ => Err(Error::config(format!("unknown granularity {s:?} (expected L10 or L40)"))),
        }
    }
}

/// Real orthonormal spherical harmonics `Y_l^m` for `l < degree`, ordered by
/// `l` then `m` ascending; `degree²` values.
///
/// Uses the fully normalized associated Legendre recurrence, which stays
/// in range at high degree where factorial normalization would not.
pub fn sh_basis(coord: GeoCoord, degree: usize) -> Vec<f64> {
    let theta = (90.0 - coord.lat).to_radians();
    let phi = coord.lon.to_radians();
    let (x, s) = (theta.cos(), theta.sin());

    // p[l][m] = normalized P_l^m(cos θ), no Condon-Shortley phase
    let mut p = vec![vec![0.0; degree]; degree];
    if degree > 0 {
        p[0][0] = 1.0 / (4.0 * PI).sqrt();
    }
    for m in 0..degree {
        if m > 0 {
            let mf = m as f64;
            p[m][m] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * p[m - 1][m - 1];
        }
        if m + 1 < degree {
            p[m + 1][m] = (2.0 * m as f64 + 3.0).sqrt() * x * p[m][m];
        }
        for l in (m + 2)..degree {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[l][m] = a * (x * p[l - 1][m] - b * p[l - 2][m]);
        }
    }

    let mut out = Vec::with_capacity(degree * degree);
    for (l, row) in p.iter().enumerate() {
        for m in -(l as i64)..=(l as i64) {
            let k = m.unsigned_abs() as usize;
            let v = match m {
                0 => row[0],
                m if m > 0 => std::f64::consts::SQRT_2 * row[k] * (k as f64 * phi).cos(),
                _ => std::f64::consts::SQRT_2 * row[k] * (k as f64 * phi).sin(),
            };
            out.push(v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocEncoderConfig {
    pub granularity: Granularity,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl LocEncoderConfig {
    pub fn new(granularity: Granularity) -> Self {
        Self {
            granularity,
            hidden: 256,
            embed_dim: 256,
        }
    }

    pub fn basis_dim(&self) -> usize {
        self.granularity.degree().pow(2)
    }
}

/// basis → hidden → GeLU → hidden → GeLU → embed.
pub struct LocEncoder {
    config: LocEncoderConfig,
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl LocEncoder {
    pub fn new(config: LocEncoderConfig, store: &mut ParamStore, rng: &mut StreamRng, prefix: &str) -> Result<Self> {
        if config.hidden == 0 || config.embed_dim == 0 {
            return Err(Error::config("location encoder widths must be positive"));
        }
        let b = config.basis_dim();
        let h = config.hidden;
        // unit-variance scaling; the basis has norm ~ degree / sqrt(4π)
        let fc1 = Linear::with_std(store, rng, &format!("{prefix}.fc1"), h, b, (4.0 * PI / b as f64).sqrt());
        let fc2 = Linear::with_std(store, rng, &format!("{prefix}.fc2"), h, h, (1.0 / h as f64).sqrt());
        let fc3 = Linear::with_std(store, rng, &format!("{prefix}.fc3"), config.embed_dim, h, (1.0 / h as f64).sqrt());
        Ok(Self { config, fc1, fc2, fc3 })
    }

    pub fn config(&self) -> &LocEncoderConfig {
        &self.config
    }

    /// Embedding of `coord` as a `embed_dim` vector on the tape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, coord: GeoCoord) -> Result<Var> {
        let basis = sh_basis(coord, self.config.granularity.degree());
        let x = tape.constant(Tensor::from_parts(vec![1, basis.len()], basis));
        let x = self.fc1.forward(tape, store, x)?;
        let x = tape.gelu(x)?;
        let x = self.fc2.forward(tape, store, x)?;
        let x = tape.gelu(x)?;
        let x = self.fc3.forward(tape, store, x)?;
        tape.reshape(x, &[self.config.embed_dim])
    }

    /// Embedding evaluated outside any training graph.
    pub fn encode(&self, store: &ParamStore, coord: GeoCoord) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = self.forward(&mut tape, store, coord)?;
        Ok(tape.value(v).clone())
    }
}

/// Embeddings keyed by coordinate and parameter version. Readers share the
/// lock; a miss takes the write lock once.
#[derive(Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(u64, u64, u64), Tensor>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_encode(&self, encoder: &LocEncoder, store: &ParamStore, coord: GeoCoord) -> Result<Tensor> {
        let (lon, lat) = coord.key();
        let key = (lon, lat, store.version());
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let value = encoder.encode(store, coord)?;
        self.entries.write().expect("cache lock").insert(key, value.clone());
        Ok(value)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
