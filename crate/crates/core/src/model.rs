//! Full network: per-date backbone, date-conditioned temporal fusion,
//! sub-pixel upsampling and the height head.

use alloc::{vec, vec::Vec};
use rand::Rng;

use crate::backbone::{Backbone, BackboneTape};
use crate::config::ModelConfig;
use crate::encoders::{normalize_doy_lidar, normalize_doy_s2, positional_encoding};
use crate::error::{Error, Result};
use crate::nn::{par_map, FeatureMap, ParamLayout};
use crate::superres::{HeadTape, HeightHead, SuperRes, SuperResTape};
use crate::temporal::{FusionOutput, FusionTape, TemporalFusion};

/// One (padded) input series, already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `T` frames of `in_channels x H x W`; padded entries are ignored.
    pub frames: Vec<FeatureMap>,
    pub s2_doys: Vec<u16>,
    pub lidar_doy: u16,
    /// `true` marks padding.
    pub pad_mask: Vec<bool>,
}

impl ModelInput {
    pub fn timesteps(&self) -> usize {
        self.frames.len()
    }

    fn first_valid(&self) -> Result<&FeatureMap> {
        self.frames
            .iter()
            .zip(&self.pad_mask)
            .find(|(_, &p)| !p)
            .map(|(f, _)| f)
            .ok_or(Error::AllPadded)
    }

    pub fn height(&self) -> usize {
        self.first_valid().map(|f| f.height).unwrap_or(0)
    }

    pub fn width(&self) -> usize {
        self.first_valid().map(|f| f.width).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `1 x rH x rW`, before border cropping.
    pub heights: FeatureMap,
    pub fusion: FusionOutput,
}

#[derive(Debug, Clone)]
pub struct ModelTape {
    backbone: Vec<Option<BackboneTape>>,
    fusion: FusionTape,
    sr: SuperResTape,
    head: HeadTape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanopyModel {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub backbone: Backbone,
    pub fusion: TemporalFusion,
    pub sr: SuperRes,
    pub head: HeightHead,
}

impl CanopyModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let backbone = Backbone::new(&mut layout, &cfg.backbone);
        let fusion = TemporalFusion::new(&mut layout, &cfg.attention, cfg.encoding_dim());
        let sr = SuperRes::new(&mut layout, cfg.attention.feat_out, cfg.sr.factor);
        let head = HeightHead::new(&mut layout, &cfg.head.mlp_sizes);
        Ok(Self {
            cfg: cfg.clone(),
            layout,
            backbone,
            fusion,
            sr,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn factor(&self) -> usize {
        self.cfg.sr.factor
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let mut p = vec![0.0f32; self.layout.len];
        self.backbone.init(&mut p, rng);
        self.fusion.init(&mut p, rng);
        self.sr
            .init(&mut p, self.cfg.sr.init_noise_scale, rng)
            .expect("sub-pixel layout validated at construction");
        self.head.init(&mut p, rng);
        p
    }

    fn encodings(&self, input: &ModelInput) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
        let dim = self.cfg.encoding_dim();
        let tau = self.cfg.attention.tau;
        let mut enc = Vec::with_capacity(input.timesteps());
        for (&doy, &pad) in input.s2_doys.iter().zip(&input.pad_mask) {
            enc.push(if pad {
                Vec::new()
            } else {
                positional_encoding(normalize_doy_s2(doy)?, dim, tau)?.0
            });
        }
        let lidar = positional_encoding(normalize_doy_lidar(input.lidar_doy)?, dim, tau)?.0;
        Ok((enc, lidar))
    }

    fn check(&self, input: &ModelInput) -> Result<()> {
        let t = input.timesteps();
        if input.s2_doys.len() != t || input.pad_mask.len() != t {
            return Err(Error::Shape {
                context: "model input timesteps",
                expected: t,
                found: input.s2_doys.len().min(input.pad_mask.len()),
            });
        }
        input.first_valid().map(|_| ())
    }

    pub fn forward(&self, params: &[f32], input: &ModelInput) -> Result<(ModelOutput, ModelTape)> {
        self.check(input)?;
        let (enc, lidar) = self.encodings(input)?;
        let items: Vec<(usize, bool)> = input.pad_mask.iter().copied().enumerate().collect();
        let results = par_map(&items, |&(t, pad)| {
            if pad {
                Ok(None)
            } else {
                self.backbone.forward(params, &input.frames[t]).map(Some)
            }
        });
        let mut feats = Vec::with_capacity(items.len());
        let mut tapes = Vec::with_capacity(items.len());
        for r in results {
            match r? {
                Some((f, tape)) => {
                    feats.push(f);
                    tapes.push(Some(tape));
                }
                None => {
                    feats.push(FeatureMap::zeros(0, 0, 0));
                    tapes.push(None);
                }
            }
        }
        let (fusion, fusion_tape) = self.fusion.fuse(params, &feats, &enc, &lidar, &input.pad_mask)?;
        let (up, sr_tape) = self.sr.forward(params, &fusion.fused)?;
        let (heights, head_tape) = self.head.forward(params, &up);
        Ok((
            ModelOutput { heights, fusion },
            ModelTape {
                backbone: tapes,
                fusion: fusion_tape,
                sr: sr_tape,
                head: head_tape,
            },
        ))
    }

    /// Accumulates parameter gradients given `d loss / d heights` on the
    /// uncropped output grid.
    pub fn backward(&self, params: &[f32], grads: &mut [f32], output: &ModelOutput, tape: &ModelTape, dheights: &FeatureMap) {
        let dup = self.head.backward(params, grads, &tape.head, dheights);
        let dfused = self.sr.backward(params, grads, &tape.sr, &dup);
        let dfeats = self.fusion.backward(params, grads, &tape.fusion, &output.fusion, &dfused);
        let jobs: Vec<usize> = (0..dfeats.len()).filter(|&t| tape.backbone[t].is_some()).collect();
        let partial = par_map(&jobs, |&t| {
            let mut g = vec![0.0f32; grads.len()];
            let bt = tape.backbone[t].as_ref().expect("filtered");
            self.backbone.backward(params, &mut g, bt, &dfeats[t]);
            g
        });
        for g in partial {
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }

    /// Height map with `margin` input pixels cropped from every side.
    pub fn predict(&self, params: &[f32], input: &ModelInput, margin: usize) -> Result<FeatureMap> {
        let (out, _) = self.forward(params, input)?;
        crop_border(&out.heights, margin * self.factor())
    }
}

/// Removes `border` pixels from every side.
pub fn crop_border(map: &FeatureMap, border: usize) -> Result<FeatureMap> {
    if 2 * border >= map.height || 2 * border >= map.width {
        return Err(Error::Shape {
            context: "border crop larger than map",
            expected: 2 * border + 1,
            found: map.height.min(map.width),
        });
    }
    Ok(map.crop(border, border, map.height - 2 * border, map.width - 2 * border))
}
