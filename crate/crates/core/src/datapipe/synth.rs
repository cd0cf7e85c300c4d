//! Seeded synthetic scenes: a canopy of dome-shaped crowns and low crop
//! parcels on a fine grid, the LiDAR-style reference gridded from it, and a
//! cloudy reflectance time series driven by canopy cover, canopy height and
//! a seasonal cycle.

use alloc::{string::String, vec, vec::Vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calendar::{SEASON_FIRST_DOY, SEASON_LAST_DOY};
use crate::config::SPECTRAL_BANDS;
use crate::datamodel::{
    filter_series, rasterize_p95, CandidateImage, Extent, GeoInfo, LidarPoint, PointClass, PointCloudSample, Polygon,
    ReferenceRaster, SitsPatch,
};
use crate::encoders::encode_angles;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side of the reference area in 10 m pixels.
    pub size: usize,
    /// Extra 10 m pixels of imagery on every side of the reference area.
    pub margin: usize,
    /// Fine canopy cells per 10 m pixel side.
    pub fine_per_pixel: usize,
    /// Reference pixel size in meters (10, 5 or 2.5).
    pub resolution: f64,
    /// Crown centers per hectare.
    pub crown_density: f64,
    pub height_min: f64,
    pub height_max: f64,
    /// Crown radius `radius_base + radius_slope * height`, meters.
    pub radius_base: f64,
    pub radius_slope: f64,
    pub crop_parcels: usize,
    /// Crop parcel side range in meters.
    pub crop_side: (f64, f64),
    pub crop_height: f64,
    pub soil_reflectance: Vec<f64>,
    pub vegetation_reflectance: Vec<f64>,
    /// Reflectance change per 30 m of mean canopy height.
    pub height_response: Vec<f64>,
    pub phenology_amplitude: f64,
    /// Day of year of the seasonal peak.
    pub phenology_peak: f64,
    pub candidate_dates: usize,
    /// Probability that an acquisition has clouds.
    pub cloud_probability: f64,
    pub max_cloud_disks: usize,
    /// Cloud disk radius range in 10 m pixels.
    pub cloud_radius: (f64, f64),
    pub noise_std: f64,
    pub year: i32,
    pub lidar_doy: u16,
    pub origin_x: f64,
    pub origin_y: f64,
    pub crs: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            margin: 25,
            fine_per_pixel: 8,
            resolution: 2.5,
            crown_density: 60.0,
            height_min: 4.0,
            height_max: 32.0,
            radius_base: 1.5,
            radius_slope: 0.15,
            crop_parcels: 2,
            crop_side: (60.0, 160.0),
            crop_height: 1.0,
            soil_reflectance: vec![0.08, 0.11, 0.15, 0.19, 0.22, 0.24, 0.26, 0.27, 0.32, 0.26],
            vegetation_reflectance: vec![0.03, 0.06, 0.03, 0.09, 0.28, 0.36, 0.42, 0.44, 0.20, 0.10],
            height_response: vec![-0.01, -0.015, -0.01, -0.01, 0.02, 0.04, 0.05, 0.05, -0.04, -0.03],
            phenology_amplitude: 0.25,
            phenology_peak: 200.0,
            candidate_dates: 18,
            cloud_probability: 0.3,
            max_cloud_disks: 3,
            cloud_radius: (3.0, 12.0),
            noise_std: 0.005,
            year: 2023,
            lidar_doy: 182,
            origin_x: 650_000.0,
            origin_y: 6_860_000.0,
            crs: "EPSG:2154".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.size == 0 || self.fine_per_pixel == 0 {
            return bad("size and fine_per_pixel must be positive".into());
        }
        let cells = 10.0 / self.resolution;
        let per = self.fine_per_pixel as f64 / cells;
        if !(self.resolution > 0.0) || (cells - libm::round(cells)).abs() > 1e-9 || (per - libm::round(per)).abs() > 1e-9 || per < 1.0 {
            return bad(alloc::format!(
                "resolution {} must split a 10 m pixel into a whole number of fine-cell groups",
                self.resolution
            ));
        }
        for (name, v) in [
            ("soil_reflectance", &self.soil_reflectance),
            ("vegetation_reflectance", &self.vegetation_reflectance),
            ("height_response", &self.height_response),
        ] {
            if v.len() != SPECTRAL_BANDS {
                return bad(alloc::format!("{name} needs {SPECTRAL_BANDS} values, got {}", v.len()));
            }
        }
        if !(self.crown_density >= 0.0) || !(self.height_min > 0.0 && self.height_max >= self.height_min) {
            return bad("crown density must be >= 0 and 0 < height_min <= height_max".into());
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) || !(self.noise_std >= 0.0) {
            return bad("cloud_probability must lie in [0, 1] and noise_std be >= 0".into());
        }
        if self.crop_side.0 <= 0.0 || self.crop_side.1 < self.crop_side.0 || self.cloud_radius.0 <= 0.0 || self.cloud_radius.1 < self.cloud_radius.0 {
            return bad("crop_side and cloud_radius must be positive ranges".into());
        }
        if self.candidate_dates > (SEASON_LAST_DOY - SEASON_FIRST_DOY + 1) as usize {
            return bad("more candidate dates than days in the season".into());
        }
        Ok(())
    }

    /// Side of the image grid in 10 m pixels.
    pub fn scene_side(&self) -> usize {
        self.size + 2 * self.margin
    }
}

struct Crown {
    x: f64,
    y: f64,
    height: f64,
    radius: f64,
}

fn phenology(cfg: &SynthConfig, doy: u16) -> f64 {
    libm::cos(2.0 * core::f64::consts::PI * (f64::from(doy) - cfg.phenology_peak) / 365.0)
}

/// A generated scene with the per-pixel quantities that drive reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub patch: SitsPatch,
    pub reference: ReferenceRaster,
    /// Vegetated fraction of each 10 m pixel.
    pub cover: Vec<f64>,
    /// Mean canopy height of each 10 m pixel.
    pub mean_height: Vec<f64>,
}

/// Builds one scene. Identical configs give bit-identical outputs.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(SitsPatch, ReferenceRaster)> {
    let s = synthesize_scene(cfg)?;
    Ok((s.patch, s.reference))
}

pub fn synthesize_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.scene_side();
    let k = cfg.fine_per_pixel;
    let fine = side * k;
    let cell = 10.0 / k as f64;
    let extent_m = side as f64 * 10.0;

    // canopy on the fine grid, row 0 at the north edge
    let area_ha = extent_m * extent_m / 10_000.0;
    let n_crowns = libm::round(cfg.crown_density * area_ha) as usize;
    let crowns: Vec<Crown> = (0..n_crowns)
        .map(|_| {
            let height = rng.random_range(cfg.height_min..=cfg.height_max);
            Crown {
                x: rng.random_range(0.0..extent_m),
                y: rng.random_range(0.0..extent_m),
                height,
                radius: cfg.radius_base + cfg.radius_slope * height,
            }
        })
        .collect();
    let parcels: Vec<(f64, f64, f64, f64)> = (0..cfg.crop_parcels)
        .map(|_| {
            let w = rng.random_range(cfg.crop_side.0..=cfg.crop_side.1);
            let h = rng.random_range(cfg.crop_side.0..=cfg.crop_side.1);
            let x = rng.random_range(0.0..(extent_m - w).max(1.0));
            let y = rng.random_range(0.0..(extent_m - h).max(1.0));
            (x, y, x + w, y + h)
        })
        .collect();

    let mut canopy = vec![0.0f64; fine * fine];
    for &(x0, y0, x1, y1) in &parcels {
        let c0 = libm::floor(x0 / cell) as usize;
        let c1 = (libm::ceil(x1 / cell) as usize).min(fine);
        let r0 = libm::floor(y0 / cell) as usize;
        let r1 = (libm::ceil(y1 / cell) as usize).min(fine);
        for r in r0..r1 {
            for c in c0..c1 {
                canopy[r * fine + c] = cfg.crop_height;
            }
        }
    }
    for cr in &crowns {
        let c0 = libm::floor((cr.x - cr.radius) / cell).max(0.0) as usize;
        let c1 = (libm::ceil((cr.x + cr.radius) / cell).max(0.0) as usize).min(fine);
        let r0 = libm::floor((cr.y - cr.radius) / cell).max(0.0) as usize;
        let r1 = (libm::ceil((cr.y + cr.radius) / cell).max(0.0) as usize).min(fine);
        for r in r0..r1 {
            let dy = (r as f64 + 0.5) * cell - cr.y;
            for c in c0..c1 {
                let dx = (c as f64 + 0.5) * cell - cr.x;
                let q = 1.0 - (dx * dx + dy * dy) / (cr.radius * cr.radius);
                if q > 0.0 {
                    let z = cr.height * libm::sqrt(q);
                    let v = &mut canopy[r * fine + c];
                    if z > *v {
                        *v = z;
                    }
                }
            }
        }
    }

    // reference: one LiDAR return per fine cell over the inner area
    let x_left = cfg.origin_x;
    let y_top = cfg.origin_y;
    let inner0 = cfg.margin * k;
    let inner1 = (cfg.margin + cfg.size) * k;
    let mut points = Vec::with_capacity((inner1 - inner0) * (inner1 - inner0));
    for r in inner0..inner1 {
        for c in inner0..inner1 {
            let z = canopy[r * fine + c];
            points.push(LidarPoint {
                x: x_left + (c as f64 + 0.5) * cell,
                y: y_top - (r as f64 + 0.5) * cell,
                z,
                class: if z > 0.0 { PointClass::Vegetation } else { PointClass::Ground },
            });
        }
    }
    let crop_parcels: Vec<Polygon> = parcels
        .iter()
        .map(|&(x0, y0, x1, y1)| {
            vec![
                (x_left + x0, y_top - y0),
                (x_left + x1, y_top - y0),
                (x_left + x1, y_top - y1),
                (x_left + x0, y_top - y1),
            ]
        })
        .collect();
    let margin_m = cfg.margin as f64 * 10.0;
    let size_m = cfg.size as f64 * 10.0;
    let extent = Extent {
        x_min: x_left + margin_m,
        y_min: y_top - margin_m - size_m,
        x_max: x_left + margin_m + size_m,
        y_max: y_top - margin_m,
    };
    let reference = rasterize_p95(&PointCloudSample { points, crop_parcels }, cfg.resolution, extent, cfg.lidar_doy, &cfg.crs)?;

    // per 10 m pixel: vegetated fraction and mean canopy height
    let n = side * side;
    let mut cover = vec![0.0f64; n];
    let mut mean_h = vec![0.0f64; n];
    let inv = 1.0 / (k * k) as f64;
    for py in 0..side {
        for px in 0..side {
            let (mut cv, mut hs) = (0.0, 0.0);
            for r in py * k..(py + 1) * k {
                for c in px * k..(px + 1) * k {
                    let z = canopy[r * fine + c];
                    if z > 0.0 {
                        cv += 1.0;
                    }
                    hs += z;
                }
            }
            cover[py * side + px] = cv * inv;
            mean_h[py * side + px] = hs * inv;
        }
    }

    // acquisition dates and images
    let season = (SEASON_FIRST_DOY..=SEASON_LAST_DOY).collect::<Vec<u16>>();
    let mut dates: Vec<u16> = rand::seq::index::sample(&mut rng, season.len(), cfg.candidate_dates)
        .into_iter()
        .map(|i| season[i])
        .collect();
    dates.sort_unstable();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidConfig(alloc::format!("{e}")))?;
    let mut candidates = Vec::with_capacity(dates.len());
    for &doy in &dates {
        let mut cloud = vec![0u8; n];
        if rng.random::<f64>() < cfg.cloud_probability {
            let disks = rng.random_range(1..=cfg.max_cloud_disks.max(1));
            for _ in 0..disks {
                let cx = rng.random_range(0.0..side as f64);
                let cy = rng.random_range(0.0..side as f64);
                let rad = rng.random_range(cfg.cloud_radius.0..=cfg.cloud_radius.1);
                for py in 0..side {
                    for px in 0..side {
                        let dx = px as f64 + 0.5 - cx;
                        let dy = py as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= rad * rad {
                            cloud[py * side + px] = 1;
                        }
                    }
                }
            }
        }
        let season_gain = 1.0 + cfg.phenology_amplitude * phenology(cfg, doy);
        let mut bands = vec![0.0f32; SPECTRAL_BANDS * n];
        for b in 0..SPECTRAL_BANDS {
            let soil = cfg.soil_reflectance[b];
            let veg = cfg.vegetation_reflectance[b];
            let hr = cfg.height_response[b];
            for i in 0..n {
                let mut v = soil + (veg - soil) * cover[i] * season_gain + hr * mean_h[i] / 30.0;
                if cfg.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                bands[b * n + i] = if cloud[i] != 0 { 0.0 } else { v as f32 };
            }
        }
        let cloud_fraction = cloud.iter().filter(|&&c| c != 0).count() as f64 / n as f64;
        let day = f64::from(doy);
        let angles = encode_angles(
            0.35 + 0.4 * ((day - 172.0) / 133.0).abs(),
            2.6 + rng.random_range(-0.1..0.1),
            rng.random_range(0.0..0.2),
            rng.random_range(1.6..2.0),
        )?;
        candidates.push(CandidateImage {
            year: cfg.year,
            doy,
            cloud_fraction,
            missing_fraction: 0.0,
            bands,
            cloud,
            angles,
        });
    }
    let geo = GeoInfo {
        origin_x: x_left,
        origin_y: y_top,
        pixel_size: 10.0,
        crs: cfg.crs.clone(),
    };
    let patch = filter_series(&candidates, cfg.year, side, side, geo)?;
    Ok(SyntheticScene {
        patch,
        reference,
        cover,
        mean_height: mean_h,
    })
}

/// Pearson correlation between per-pixel reference cover and an NDVI-like
/// index of the cloud-free observations. Used as a learnability check.
pub fn cover_index_correlation(patch: &SitsPatch, cover: &[f64]) -> f64 {
    let n = patch.pixels();
    let (red, nir) = (2, 6);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in 0..patch.len() {
        let cloud = patch.cloud_mask(t);
        let r = patch.band(t, red);
        let q = patch.band(t, nir);
        for i in 0..n {
            if cloud[i] == 0 {
                let s = f64::from(q[i]) + f64::from(r[i]);
                if s > 0.0 {
                    xs.push(cover[i]);
                    ys.push((f64::from(q[i]) - f64::from(r[i])) / s);
                }
            }
        }
    }
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / libm::sqrt(sxx * syy)
}
