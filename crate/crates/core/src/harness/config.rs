//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Placement, Strategy};
use crate::loc::Granularity;
use crate::model::ModelConfig;
use crate::sfpn::DEFAULT_CHANNELS;
use crate::vit::VitConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: String,
    pub fusion: Option<FusionConfig>,
    pub n_classes: usize,
    pub epochs: usize,
    pub per_device_batch: usize,
    pub devices: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Tile edge in pixels; 0 means "take it from the dataset".
    pub img_size: usize,
    pub pyramid_channels: usize,
    pub loc_hidden: usize,
    pub jitter: bool,
    /// Dataset tag written to the first ablation CSV column.
    pub feature: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: "tiny".into(),
            fusion: None,
            n_classes: 3,
            epochs: 75,
            per_device_batch: 4,
            devices: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            manifest: None,
            out: None,
            img_size: 0,
            pyramid_channels: DEFAULT_CHANNELS,
            loc_hidden: 256,
            jitter: false,
            feature: "synthetic".into(),
        }
    }
}

fn parse_fusion(value: &str) -> Result<Option<FusionConfig>> {
    if value == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = value.split('/').collect();
    let [placement, strategy, granularity] = parts[..] else {
        return Err(Error::config(format!(
            "fusion {value:?}: expected none or placement/strategy/granularity"
        )));
    };
    let config = FusionConfig::new(
        strategy.parse::<Strategy>()?,
        placement.parse::<Placement>()?,
        granularity.parse::<Granularity>()?,
    );
    Ok(Some(config))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown and repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        // cross-attention settings may precede the fusion line
        let mut attn: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            c.set(key, value, &mut attn)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        c.apply_attention(&attn)?;
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str, attn: &mut Vec<(String, String)>) -> Result<()> {
        match key {
            "backbone" => self.backbone = value.to_string(),
            "fusion" => self.fusion = parse_fusion(value)?,
            "n_tokens" | "d_attn" | "residual" => attn.push((key.to_string(), value.to_string())),
            "n_classes" => self.n_classes = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "per_device_batch" => self.per_device_batch = parse_num(key, value)?,
            "devices" => self.devices = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "img_size" => self.img_size = parse_num(key, value)?,
            "pyramid_channels" => self.pyramid_channels = parse_num(key, value)?,
            "loc_hidden" => self.loc_hidden = parse_num(key, value)?,
            "jitter" => self.jitter = parse_bool(key, value)?,
            "feature" => self.feature = value.to_string(),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn apply_attention(&mut self, attn: &[(String, String)]) -> Result<()> {
        for (key, value) in attn {
            let Some(f) = self.fusion.as_mut() else {
                return Err(Error::config(format!("{key} given without a fusion config")));
            };
            match key.as_str() {
                "n_tokens" => f.n_tokens = parse_num(key, value)?,
                "d_attn" => f.d_attn = parse_num(key, value)?,
                _ => f.residual = parse_bool(key, value)?,
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.per_device_batch == 0 || self.devices == 0 {
            return Err(Error::config("epochs, per_device_batch and devices must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr must be positive and weight_decay non-negative"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        if self.feature.contains(',') || self.feature.is_empty() {
            return Err(Error::config("feature tag must be non-empty and contain no commas"));
        }
        if let Some(f) = &self.fusion {
            f.validate()?;
        }
        VitConfig::preset(&self.backbone, 64)?;
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("backbone", self.backbone.clone());
        match &self.fusion {
            None => kv("fusion", "none".into()),
            Some(f) => {
                kv("fusion", f.label());
                kv("n_tokens", f.n_tokens.to_string());
                kv("d_attn", f.d_attn.to_string());
                kv("residual", f.residual.to_string());
            }
        }
        kv("n_classes", self.n_classes.to_string());
        kv("epochs", self.epochs.to_string());
        kv("per_device_batch", self.per_device_batch.to_string());
        kv("devices", self.devices.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("seed", self.seed.to_string());
        if let Some(m) = &self.manifest {
            kv("manifest", m.display().to_string());
        }
        if let Some(o) = &self.out {
            kv("out", o.display().to_string());
        }
        kv("img_size", self.img_size.to_string());
        kv("pyramid_channels", self.pyramid_channels.to_string());
        kv("loc_hidden", self.loc_hidden.to_string());
        kv("jitter", self.jitter.to_string());
        kv("feature", self.feature.clone());
        s
    }

    pub fn model_config(&self, img_size: usize) -> Result<ModelConfig> {
        let vit = VitConfig::preset(&self.backbone, img_size)?;
        let mut m = ModelConfig::new(vit, self.n_classes, self.fusion.clone());
        m.pyramid_channels = self.pyramid_channels;
        m.loc_hidden = self.loc_hidden;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let text = "# run\nbackbone = tiny\nd_attn = 16\nfusion = post/concat/L40  # fused\nepochs = 3\nlr = 0.002\nseed = 9\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.fusion.as_ref().unwrap().d_attn, 16);
        assert_eq!(c.fusion.as_ref().unwrap().strategy, Strategy::Concat);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejections() {
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("epochs = 1\nepochs = 2").is_err());
        assert!(RunConfig::parse("epochs = 0").is_err());
        assert!(RunConfig::parse("fusion = pre/add/L10").is_err());
        assert!(RunConfig::parse("fusion = post/add").is_err());
        assert!(RunConfig::parse("n_tokens = 4").is_err());
        assert!(RunConfig::parse("backbone = huge").is_err());
        assert!(RunConfig::parse("jitter = yes").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }
}
