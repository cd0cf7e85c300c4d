//! Temporal sampling, padding, window extraction, standardization and the
//! synthetic scene generator.

pub mod synth;

use alloc::{vec, vec::Vec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SamplerConfig, SamplingStrategy, ANGLE_CHANNELS, CLOUD_CHANNEL, INPUT_CHANNELS, SPECTRAL_BANDS};
use crate::datamodel::{ReferenceRaster, SitsPatch};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::nn::FeatureMap;

pub use synth::{generate_synthetic, SynthConfig};

/// Picks which acquisitions of a series of length `n` enter the model.
///
/// Series no longer than `t_max` are kept whole. Longer ones get `t_max`
/// indices: uniformly without replacement (`Random`), or the first
/// acquisition of each of `t_max` equal index bins (`EqualRange`,
/// `floor(j n / t_max)`). Indices are always strictly increasing.
pub fn sample_timesteps<R: Rng>(n: usize, cfg: &SamplerConfig, strategy: SamplingStrategy, rng: &mut R) -> Result<Vec<usize>> {
    if n < cfg.t_min {
        return Err(Error::TooFewObservations {
            found: n,
            required: cfg.t_min,
        });
    }
    if n <= cfg.t_max {
        return Ok((0..n).collect());
    }
    Ok(match strategy {
        SamplingStrategy::EqualRange => (0..cfg.t_max).map(|j| j * n / cfg.t_max).collect(),
        SamplingStrategy::Random => {
            let mut idx = rand::seq::index::sample(rng, n, cfg.t_max).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// Pads every series to the longest one with zero frames. Padded entries
/// are flagged in `pad_mask` and carry a placeholder date.
pub fn pad_series(inputs: &mut [ModelInput]) {
    let t_max = inputs.iter().map(ModelInput::timesteps).max().unwrap_or(0);
    for x in inputs.iter_mut() {
        let Some(shape) = x.frames.first().map(|f| (f.channels, f.height, f.width)) else {
            continue;
        };
        while x.frames.len() < t_max {
            x.frames.push(FeatureMap::zeros(shape.0, shape.1, shape.2));
            x.s2_doys.push(1);
            x.pad_mask.push(true);
        }
    }
}

/// Per-band mean and standard deviation of the spectral channels, computed
/// over cloud-free pixels. The cloud and angle channels are never rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; SPECTRAL_BANDS],
            std: vec![1.0; SPECTRAL_BANDS],
        }
    }

    pub fn compute(patches: &[&SitsPatch]) -> Result<Self> {
        let mut count = [0u64; SPECTRAL_BANDS];
        let mut mean = [0.0f64; SPECTRAL_BANDS];
        let mut m2 = [0.0f64; SPECTRAL_BANDS];
        for p in patches {
            for t in 0..p.len() {
                let cloud = p.cloud_mask(t);
                for b in 0..SPECTRAL_BANDS {
                    for (&v, &c) in p.band(t, b).iter().zip(cloud) {
                        if c != 0 {
                            continue;
                        }
                        let x = f64::from(v);
                        count[b] += 1;
                        let d = x - mean[b];
                        mean[b] += d / count[b] as f64;
                        m2[b] += d * (x - mean[b]);
                    }
                }
            }
        }
        let mut std = vec![0.0; SPECTRAL_BANDS];
        for b in 0..SPECTRAL_BANDS {
            std[b] = if count[b] == 0 { 0.0 } else { libm::sqrt(m2[b] / count[b] as f64) };
            if !(std[b] > 0.0) {
                return Err(Error::ZeroStd { channel: b });
            }
        }
        Ok(Self { mean: mean.to_vec(), std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != SPECTRAL_BANDS || self.std.len() != SPECTRAL_BANDS {
            return Err(Error::Shape {
                context: "channel statistics",
                expected: SPECTRAL_BANDS,
                found: self.mean.len().min(self.std.len()),
            });
        }
        if let Some(c) = self.std.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::ZeroStd { channel: c });
        }
        Ok(())
    }

    fn check_layout(&self, len: usize, pixels: usize) -> Result<()> {
        self.validate()?;
        if pixels == 0 || len % (SPECTRAL_BANDS * pixels) != 0 {
            return Err(Error::Shape {
                context: "band stack (T x 10 x pixels)",
                expected: SPECTRAL_BANDS * pixels,
                found: len,
            });
        }
        Ok(())
    }

    /// `(x - mean_b) / std_b` over a `T x 10 x pixels` stack.
    pub fn standardize(&self, bands: &[f64], pixels: usize) -> Result<Vec<f64>> {
        self.check_layout(bands.len(), pixels)?;
        Ok(bands
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let b = (i / pixels) % SPECTRAL_BANDS;
                (x - self.mean[b]) / self.std[b]
            })
            .collect())
    }

    pub fn unstandardize(&self, bands: &[f64], pixels: usize) -> Result<Vec<f64>> {
        self.check_layout(bands.len(), pixels)?;
        Ok(bands
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let b = (i / pixels) % SPECTRAL_BANDS;
                x * self.std[b] + self.mean[b]
            })
            .collect())
    }
}

/// Builds the 17-channel input frames of a patch: standardized bands, the
/// binary cloud mask and the six angle features broadcast over the grid.
pub fn assemble_frames(patch: &SitsPatch, stats: &ChannelStats) -> Result<Vec<FeatureMap>> {
    stats.validate()?;
    let n = patch.pixels();
    let mut frames = Vec::with_capacity(patch.len());
    for t in 0..patch.len() {
        let mut data = Vec::with_capacity(INPUT_CHANNELS * n);
        for b in 0..SPECTRAL_BANDS {
            let (m, s) = (stats.mean[b], stats.std[b]);
            data.extend(patch.band(t, b).iter().map(|&v| ((f64::from(v) - m) / s) as f32));
        }
        debug_assert_eq!(data.len(), CLOUD_CHANNEL * n);
        data.extend(patch.cloud_mask(t).iter().map(|&c| f32::from(c)));
        for a in 0..ANGLE_CHANNELS {
            data.extend(core::iter::repeat_n(patch.angles[t].0[a], n));
        }
        frames.push(FeatureMap::from_vec(INPUT_CHANNELS, patch.height, patch.width, data)?);
    }
    Ok(frames)
}

/// Unpadded model input for a whole patch.
pub fn model_input(patch: &SitsPatch, stats: &ChannelStats, lidar_doy: u16) -> Result<ModelInput> {
    Ok(ModelInput {
        frames: assemble_frames(patch, stats)?,
        s2_doys: patch.dates.clone(),
        lidar_doy,
        pad_mask: vec![false; patch.len()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Uniformly random core position inside the reference.
    Train,
    /// Core centered in the reference.
    Validation,
}

/// Position of a training window in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPosition {
    /// Top-left of the input window (core plus margins).
    pub row: usize,
    pub col: usize,
}

/// Placement of the reference grid inside the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    /// Reference pixels per patch pixel along each axis.
    pub factor: usize,
    /// Patch pixel holding the reference's top-left corner; may be negative.
    pub row: i64,
    pub col: i64,
    /// Reference extent in patch pixels.
    pub rows: usize,
    pub cols: usize,
}

pub fn alignment(patch: &SitsPatch, reference: &ReferenceRaster) -> Result<Alignment> {
    let ratio = patch.geo.pixel_size / reference.geo.pixel_size;
    let factor = libm::round(ratio) as usize;
    if factor == 0 || (ratio - factor as f64).abs() > 1e-6 {
        return Err(Error::InvalidArgument(alloc::format!(
            "reference pixel size {} does not divide patch pixel size {}",
            reference.geo.pixel_size,
            patch.geo.pixel_size
        )));
    }
    let px = patch.geo.pixel_size;
    let dc = (reference.geo.origin_x - patch.geo.origin_x) / px;
    let dr = (patch.geo.origin_y - reference.geo.origin_y) / px;
    if (dc - libm::round(dc)).abs() > 1e-6 || (dr - libm::round(dr)).abs() > 1e-6 {
        return Err(Error::MisalignedExtent { resolution: px });
    }
    if reference.height % factor != 0 || reference.width % factor != 0 {
        return Err(Error::Shape {
            context: "reference size not a multiple of the scale factor",
            expected: factor,
            found: reference.height,
        });
    }
    Ok(Alignment {
        factor,
        row: libm::round(dr) as i64,
        col: libm::round(dc) as i64,
        rows: reference.height / factor,
        cols: reference.width / factor,
    })
}

/// Chooses where to cut a window. The core lies inside the reference and
/// the full input window (core plus margins) inside the patch.
pub fn choose_window<R: Rng>(
    patch: &SitsPatch,
    reference: &ReferenceRaster,
    cfg: &SamplerConfig,
    mode: WindowMode,
    rng: &mut R,
) -> Result<WindowPosition> {
    let a = alignment(patch, reference)?;
    let out_of_bounds = |row: i64, col: i64| Error::WindowOutOfBounds {
        row,
        col,
        size: cfg.input_side(),
        height: patch.height,
        width: patch.width,
    };
    if a.rows < cfg.window || a.cols < cfg.window {
        return Err(out_of_bounds(a.row, a.col));
    }
    let (slack_r, slack_c) = (a.rows - cfg.window, a.cols - cfg.window);
    let (dr, dc) = match mode {
        WindowMode::Validation => (slack_r / 2, slack_c / 2),
        WindowMode::Train => (rng.random_range(0..=slack_r), rng.random_range(0..=slack_c)),
    };
    let row = a.row + dr as i64 - cfg.margin as i64;
    let col = a.col + dc as i64 - cfg.margin as i64;
    let side = cfg.input_side() as i64;
    if row < 0 || col < 0 || row + side > patch.height as i64 || col + side > patch.width as i64 {
        return Err(out_of_bounds(row, col));
    }
    Ok(WindowPosition {
        row: row as usize,
        col: col as usize,
    })
}

/// An input window and its aligned reference core.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: SitsPatch,
    pub reference: ReferenceRaster,
}

pub fn extract_window(patch: &SitsPatch, reference: &ReferenceRaster, pos: WindowPosition, cfg: &SamplerConfig) -> Result<TrainingSample> {
    let a = alignment(patch, reference)?;
    let input = patch.crop(pos.row, pos.col, cfg.input_side(), cfg.input_side())?;
    let core_row = pos.row as i64 + cfg.margin as i64 - a.row;
    let core_col = pos.col as i64 + cfg.margin as i64 - a.col;
    if core_row < 0 || core_col < 0 {
        return Err(Error::WindowOutOfBounds {
            row: core_row,
            col: core_col,
            size: cfg.window,
            height: a.rows,
            width: a.cols,
        });
    }
    let f = a.factor;
    let reference = reference.crop(core_row as usize * f, core_col as usize * f, cfg.window * f, cfg.window * f)?;
    Ok(TrainingSample { input, reference })
}
