//! Checkpoint format.
//!
//! Little-endian: magic `GVCK`, u32 version, u32 config length, config text
//! (UTF-8 `key = value` lines), u32 parameter count, then per parameter u32
//! name length, name, u32 rank, u32 extents, f32 values; trailing CRC32 of
//! every preceding byte.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, store: &ParamStore) -> Self {
        Self {
            config: config.clone(),
            params: store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect(),
        }
    }

    /// Copy every stored value into `store`, which must hold exactly the
    /// same names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::config(format!("checkpoint parameter {name} not in model")))?;
            store.set(id, value.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = |n: usize| u32::try_from(n).map_err(|_| Error::config(format!("length {n} exceeds u32")));
        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let text = self.config.to_text();
        w.u32(len(text.len())?);
        w.bytes(text.as_bytes());
        w.u32(len(self.params.len())?);
        for (name, t) in &self.params {
            w.u32(len(name.len())?);
            w.bytes(name.as_bytes());
            w.u32(len(t.rank())?);
            for &d in t.shape() {
                w.u32(len(d)?);
            }
            for &v in t.data() {
                let f = v as f32;
                if f64::from(f) != v {
                    return Err(Error::config(format!("{name} holds a value not representable as f32")));
                }
                w.f32(f);
            }
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version(version).into());
        }
        let text_len = r.u32()? as usize;
        let text = r.take(text_len)?;
        let n = r.u32()? as usize;
        let mut raw = Vec::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            let rank = r.u32()? as usize;
            r.need(rank.saturating_mul(4))?;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| FormatError::Malformed(format!("shape {shape:?} overflows")))?;
            let data = r.take(numel * 4)?;
            raw.push((name, shape, data));
        }
        r.need(4)?;
        r.checksum()?;
        let text = std::str::from_utf8(text).map_err(|_| FormatError::Malformed("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let params = raw
            .into_iter()
            .map(|(name, shape, data)| {
                let name = String::from_utf8(name.to_vec())
                    .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?;
                let values = data.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))).collect();
                Ok((name, Tensor::new(shape, values)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new(vec![2, 2], vec![0.5, -1.25, 3.0, 0.0]).unwrap());
        store.add("a.bias", Tensor::from_vec(vec![0.125]));
        Checkpoint::from_store(&RunConfig::default(), &store)
    }

    #[test]
    fn round_trip_and_errors() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        let last = bad.len() - 6;
        bad[last] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(FormatError::Checksum { .. }))));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 9]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn rejects_non_f32_values() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::from_vec(vec![0.1]));
        assert!(Checkpoint::from_store(&RunConfig::default(), &store).encode().is_err());
    }

    #[test]
    fn restore_checks_names() {
        let ck = sample();
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::zeros(vec![2, 2]));
        assert!(ck.restore(&mut store).is_err());
        store.add("a.bias", Tensor::zeros(vec![1]));
        ck.restore(&mut store).unwrap();
        assert_eq!(store.get(store.id("a.bias").unwrap()).data(), &[0.125]);
    }
}
