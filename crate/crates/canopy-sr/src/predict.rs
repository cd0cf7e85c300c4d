//! Whole-patch and tiled inference.
//!
//! A tile's input is its core grown by a halo of at least the network's
//! receptive radius, clipped to the patch. Pixels of the core therefore
//! see exactly the context they would see in a whole-patch pass: interior
//! sides have enough real neighbours, and sides on the patch border are
//! zero-padded in both cases. The mosaic of cropped cores equals the
//! whole-patch output up to floating-point summation order.

use canopy_core::config::{SamplerConfig, SamplingStrategy};
use canopy_core::datapipe::{model_input, sample_timesteps, ChannelStats};
use canopy_core::resample::bicubic_upsample;
use canopy_core::{CanopyModel, SitsPatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::AppResult;
use crate::geotiff::Raster;

/// Anything that turns an image series into a height raster covering the
/// whole patch at `factor` times its resolution.
pub trait HeightPredictor {
    fn factor(&self) -> usize;
    fn predict(&self, patch: &SitsPatch, lidar_doy: u16) -> AppResult<Raster>;
}

/// One inference tile in patch pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub core_row: usize,
    pub core_col: usize,
    pub core_h: usize,
    pub core_w: usize,
    pub in_row: usize,
    pub in_col: usize,
    pub in_h: usize,
    pub in_w: usize,
}

/// Cores of side `tile` (smaller at the far edges) covering the patch,
/// each with `halo` pixels of context clipped to the patch.
pub fn plan_tiles(height: usize, width: usize, tile: usize, halo: usize) -> Vec<Tile> {
    assert!(tile > 0, "tile side must be positive");
    let mut out = Vec::new();
    for core_row in (0..height).step_by(tile) {
        for core_col in (0..width).step_by(tile) {
            let core_h = tile.min(height - core_row);
            let core_w = tile.min(width - core_col);
            let in_row = core_row.saturating_sub(halo);
            let in_col = core_col.saturating_sub(halo);
            let in_h = (core_row + core_h + halo).min(height) - in_row;
            let in_w = (core_col + core_w + halo).min(width) - in_col;
            out.push(Tile {
                core_row,
                core_col,
                core_h,
                core_w,
                in_row,
                in_col,
                in_h,
                in_w,
            });
        }
    }
    out
}

pub struct ModelPredictor {
    pub model: CanopyModel,
    pub params: Vec<f32>,
    pub stats: ChannelStats,
    pub sampler: SamplerConfig,
    /// Core tile side; `None` runs the whole patch at once.
    pub tile: Option<usize>,
}

impl ModelPredictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> AppResult<Self> {
        Ok(Self {
            model: ck.model()?,
            params: ck.params.clone(),
            stats: ck.header.stats.clone(),
            sampler: ck.header.config.sampler.clone(),
            tile: Some(ck.header.config.eval.tile),
        })
    }

    pub fn halo(&self) -> usize {
        self.sampler.margin.max(self.model.cfg.receptive_radius())
    }

    /// Long series are reduced to `t_max` acquisitions with equal-range
    /// sampling, which is deterministic.
    pub fn select_dates(&self, patch: &SitsPatch) -> AppResult<SitsPatch> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let idx = sample_timesteps(patch.len(), &self.sampler, SamplingStrategy::EqualRange, &mut unused)?;
        Ok(patch.select(&idx))
    }

    fn run(&self, patch: &SitsPatch, lidar_doy: u16) -> AppResult<Vec<f32>> {
        let input = model_input(patch, &self.stats, lidar_doy)?;
        let (out, _) = self.model.forward(&self.params, &input)?;
        Ok(out.heights.data)
    }

    pub fn predict_whole(&self, patch: &SitsPatch, lidar_doy: u16) -> AppResult<Raster> {
        let patch = self.select_dates(patch)?;
        let f = self.model.factor();
        let data = self.run(&patch, lidar_doy)?;
        Ok(Raster::new(
            patch.height * f,
            patch.width * f,
            data.into_iter().map(f64::from).collect(),
            patch.geo.offset(0, 0, f),
        ))
    }

    pub fn predict_tiled(&self, patch: &SitsPatch, lidar_doy: u16, tile: usize) -> AppResult<Raster> {
        let patch = self.select_dates(patch)?;
        let f = self.model.factor();
        let (oh, ow) = (patch.height * f, patch.width * f);
        let mut data = vec![0.0f64; oh * ow];
        for t in plan_tiles(patch.height, patch.width, tile, self.halo()) {
            let sub = patch.crop(t.in_row, t.in_col, t.in_h, t.in_w)?;
            let out = self.run(&sub, lidar_doy)?;
            let sw = t.in_w * f;
            let (dr, dc) = ((t.core_row - t.in_row) * f, (t.core_col - t.in_col) * f);
            for y in 0..t.core_h * f {
                let src = &out[(dr + y) * sw + dc..(dr + y) * sw + dc + t.core_w * f];
                let dst_start = (t.core_row * f + y) * ow + t.core_col * f;
                for (d, &s) in data[dst_start..dst_start + t.core_w * f].iter_mut().zip(src) {
                    *d = f64::from(s);
                }
            }
        }
        Ok(Raster::new(oh, ow, data, patch.geo.offset(0, 0, f)))
    }
}

impl HeightPredictor for ModelPredictor {
    fn factor(&self) -> usize {
        self.model.factor()
    }

    fn predict(&self, patch: &SitsPatch, lidar_doy: u16) -> AppResult<Raster> {
        match self.tile {
            Some(t) => self.predict_tiled(patch, lidar_doy, t),
            None => self.predict_whole(patch, lidar_doy),
        }
    }
}

/// Bicubic upsampling of another predictor's output, the classic baseline
/// for a low-resolution model.
pub struct Bicubic<P> {
    pub inner: P,
    pub factor: usize,
}

impl<P: HeightPredictor> HeightPredictor for Bicubic<P> {
    fn factor(&self) -> usize {
        self.inner.factor() * self.factor
    }

    fn predict(&self, patch: &SitsPatch, lidar_doy: u16) -> AppResult<Raster> {
        let low = self.inner.predict(patch, lidar_doy)?;
        let data = bicubic_upsample(&low.data, low.height, low.width, self.factor)?;
        Ok(Raster::new(
            low.height * self.factor,
            low.width * self.factor,
            data,
            low.geo.offset(0, 0, self.factor),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_partition_the_patch() {
        for (h, w, tile, halo) in [(10, 7, 4, 2), (5, 5, 8, 3), (9, 12, 3, 0)] {
            let mut hits = vec![0u8; h * w];
            for t in plan_tiles(h, w, tile, halo) {
                assert!(t.in_row + t.in_h <= h && t.in_col + t.in_w <= w);
                assert!(t.in_row <= t.core_row && t.in_col <= t.core_col);
                for y in t.core_row..t.core_row + t.core_h {
                    for x in t.core_col..t.core_col + t.core_w {
                        hits[y * w + x] += 1;
                    }
                }
                // context on each interior side is the full halo
                if t.in_row > 0 {
                    assert_eq!(t.core_row - t.in_row, halo);
                }
                if t.in_row + t.in_h < h {
                    assert_eq!(t.in_row + t.in_h - t.core_row - t.core_h, halo);
                }
            }
            assert!(hits.iter().all(|&c| c == 1));
        }
    }
}
