//! Full segmentation model: backbone, optional location fusion, pyramid,
//! head.

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionSite, Placement};
use crate::head::{UnetHead, DEFAULT_WIDTHS};
use crate::loc::{GeoCoord, LocEncoder, LocEncoderConfig};
use crate::params::ParamStore;
use crate::rng::StreamRng;
use crate::sfpn::{LevelTrace, Sfpn, DEFAULT_CHANNELS, SCALES};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{VitBackbone, VitConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    /// Pyramid width `C_d`; also the location embedding width.
    pub pyramid_channels: usize,
    pub n_classes: usize,
    pub fusion: Option<FusionConfig>,
    pub loc_hidden: usize,
    pub head_widths: [usize; 4],
}

impl ModelConfig {
    pub fn new(vit: VitConfig, n_classes: usize, fusion: Option<FusionConfig>) -> Self {
        Self {
            vit,
            pyramid_channels: DEFAULT_CHANNELS,
            n_classes,
            fusion,
            loc_hidden: 256,
            head_widths: DEFAULT_WIDTHS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if let Some(f) = &self.fusion {
            f.validate()?;
        }
        if self.pyramid_channels == 0 || self.loc_hidden == 0 {
            return Err(Error::config("pyramid_channels and loc_hidden must be positive"));
        }
        Ok(())
    }
}

struct Fusion {
    config: FusionConfig,
    encoder: LocEncoder,
    sites: Vec<FusionSite>,
}

pub struct SegModel {
    config: ModelConfig,
    backbone: VitBackbone,
    fusion: Option<Fusion>,
    sfpn: Sfpn,
    head: UnetHead,
}

pub struct ModelOutput {
    pub logits: Var,
    /// Pyramid levels after any post-placement fusion, ordered P16..P2.
    pub levels: [Var; 4],
    pub traces: Vec<LevelTrace>,
}

impl SegModel {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let d = config.vit.embed_dim;
        let c_d = config.pyramid_channels;
        let grid = config.vit.grid();
        let backbone = VitBackbone::new(config.vit.clone(), store, rng, "vit")?;

        let mut fusion = None;
        let mut sfpn_in = d;
        let mut level_channels = [c_d; 4];
        if let Some(fc) = &config.fusion {
            let loc_config = LocEncoderConfig {
                granularity: fc.granularity,
                hidden: config.loc_hidden,
                embed_dim: c_d,
            };
            let encoder = LocEncoder::new(loc_config, store, rng, "loc")?;
            let sites = match fc.placement {
                Placement::Pre => {
                    sfpn_in = fc.strategy.out_channels(d, c_d);
                    vec![FusionSite::new(fc, store, rng, "fusion.pre", d, (grid, grid), c_d)?]
                }
                Placement::Post => {
                    level_channels = [fc.strategy.out_channels(c_d, c_d); 4];
                    SCALES
                        .iter()
                        .map(|&s| {
                            let extent = config.vit.img_size / s;
                            FusionSite::new(fc, store, rng, &format!("fusion.p{s}"), c_d, (extent, extent), c_d)
                        })
                        .collect::<Result<_>>()?
                }
            };
            fusion = Some(Fusion {
                config: fc.clone(),
                encoder,
                sites,
            });
        }
        let sfpn = Sfpn::new(store, rng, "sfpn", sfpn_in, c_d)?;
        let head = UnetHead::new(store, rng, "head", level_channels, config.head_widths, config.n_classes)?;
        Ok(Self {
            config,
            backbone,
            fusion,
            sfpn,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn location_encoder(&self) -> Option<&LocEncoder> {
        self.fusion.as_ref().map(|f| &f.encoder)
    }

    /// `image` is `C × H × W`; `coord` is ignored by models without fusion.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, coord: GeoCoord) -> Result<ModelOutput> {
        let image = tape.constant(image.clone());
        self.forward_var(tape, store, image, coord)
    }

    pub fn forward_var(&self, tape: &mut Tape, store: &ParamStore, image: Var, coord: GeoCoord) -> Result<ModelOutput> {
        let mut features = self.backbone.forward(tape, store, image)?.features;
        let loc = match &self.fusion {
            Some(f) => Some(f.encoder.forward(tape, store, coord)?),
            None => None,
        };
        if let (Some(f), Some(loc)) = (&self.fusion, loc) {
            if f.config.placement == Placement::Pre {
                features = f.sites[0].forward(tape, store, features, loc)?;
            }
        }
        let pyramid = self.sfpn.forward(tape, store, features)?;
        let mut levels = [pyramid.levels[0].1, pyramid.levels[1].1, pyramid.levels[2].1, pyramid.levels[3].1];
        if let (Some(f), Some(loc)) = (&self.fusion, loc) {
            if f.config.placement == Placement::Post {
                for (level, site) in levels.iter_mut().zip(&f.sites) {
                    *level = site.forward(tape, store, *level, loc)?;
                }
            }
        }
        let logits = self.head.forward(tape, store, levels)?;
        Ok(ModelOutput {
            logits,
            levels,
            traces: pyramid.traces,
        })
    }

    /// Logits for one image without building a training graph.
    pub fn infer(&self, store: &ParamStore, image: &Tensor, coord: GeoCoord) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, store, image, coord)?;
        Ok(tape.value(out.logits).clone())
    }
}
