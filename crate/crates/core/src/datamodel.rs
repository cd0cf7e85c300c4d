//! Patches, reference rasters and LiDAR point clouds.

use alloc::{string::String, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::calendar;
use crate::config::SPECTRAL_BANDS;
use crate::encoders::AngleVector;
use crate::error::{Error, Result};

/// Minimum observations kept per series.
pub const MIN_OBSERVATIONS: usize = 5;
/// Minimum vegetation height kept in the reference, meters.
pub const MIN_VEGETATION_HEIGHT: f64 = 1.5;
/// Vegetation inside crop parcels below this height is treated as a crop.
pub const CROP_HEIGHT_LIMIT: f64 = 5.0;
/// Acquisitions above this cloud fraction are dropped.
pub const MAX_CLOUD_FRACTION: f64 = 0.5;
/// Acquisitions above this missing-data fraction are dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.1;

/// North-up grid placement. `origin_*` is the outer corner of the top-left pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoInfo {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
    pub crs: String,
}

impl GeoInfo {
    /// Placement of a sub-grid starting at (`row`, `col`) with pixels
    /// `scale` times smaller.
    pub fn offset(&self, row: usize, col: usize, scale: usize) -> GeoInfo {
        GeoInfo {
            origin_x: self.origin_x + col as f64 * self.pixel_size,
            origin_y: self.origin_y - row as f64 * self.pixel_size,
            pixel_size: self.pixel_size / scale as f64,
            crs: self.crs.clone(),
        }
    }
}

/// A Sentinel-2-style acquisition series over one spatial window.
///
/// Stored compactly: physical reflectances `T x 10 x H x W`, a binary cloud
/// mask `T x H x W` and one angle vector per date. The 17-channel model
/// input (standardized bands, cloud channel, broadcast angles) is assembled
/// by [`crate::datapipe::assemble_frames`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitsPatch {
    pub height: usize,
    pub width: usize,
    pub bands: Vec<f32>,
    pub cloud: Vec<u8>,
    pub angles: Vec<AngleVector>,
    /// Day of year per acquisition, strictly increasing.
    pub dates: Vec<u16>,
    pub geo: GeoInfo,
}

impl SitsPatch {
    pub fn new(
        height: usize,
        width: usize,
        bands: Vec<f32>,
        cloud: Vec<u8>,
        angles: Vec<AngleVector>,
        dates: Vec<u16>,
        geo: GeoInfo,
    ) -> Result<Self> {
        let patch = Self {
            height,
            width,
            bands,
            cloud,
            angles,
            dates,
            geo,
        };
        patch.validate()?;
        Ok(patch)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Number of real (non-padding) acquisitions; stored patches never pad.
    pub fn valid_length(&self) -> usize {
        self.dates.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, t: usize, b: usize) -> &[f32] {
        let n = self.pixels();
        let start = (t * SPECTRAL_BANDS + b) * n;
        &self.bands[start..start + n]
    }

    pub fn cloud_mask(&self, t: usize) -> &[u8] {
        let n = self.pixels();
        &self.cloud[t * n..(t + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.dates.len();
        if t < MIN_OBSERVATIONS {
            return Err(Error::TooFewObservations {
                found: t,
                required: MIN_OBSERVATIONS,
            });
        }
        let n = self.pixels();
        if n == 0 {
            return Err(Error::InvalidArgument("patch has no pixels".into()));
        }
        check_len("bands", t * SPECTRAL_BANDS * n, self.bands.len())?;
        check_len("cloud mask", t * n, self.cloud.len())?;
        check_len("angles", t, self.angles.len())?;
        for &d in &self.dates {
            if !(calendar::SEASON_FIRST_DOY..=calendar::SEASON_LAST_DOY).contains(&d) {
                return Err(Error::DateOutOfRange { doy: i64::from(d) });
            }
        }
        if let Some(i) = self.dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::DatesNotIncreasing { index: i + 1 });
        }
        if let Some(i) = self.bands.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "reflectance", index: i });
        }
        if let Some(i) = self.cloud.iter().position(|&c| c > 1) {
            return Err(Error::InvalidArgument(alloc::format!(
                "cloud mask must be binary (index {i})"
            )));
        }
        if !(self.geo.pixel_size > 0.0) {
            return Err(Error::InvalidArgument("pixel size must be positive".into()));
        }
        Ok(())
    }

    /// Spatial crop of every acquisition.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<SitsPatch> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::WindowOutOfBounds {
                row: row as i64,
                col: col as i64,
                size: h.max(w),
                height: self.height,
                width: self.width,
            });
        }
        let t = self.len();
        let mut bands = Vec::with_capacity(t * SPECTRAL_BANDS * h * w);
        let mut cloud = Vec::with_capacity(t * h * w);
        for ti in 0..t {
            for b in 0..SPECTRAL_BANDS {
                let plane = self.band(ti, b);
                for y in row..row + h {
                    bands.extend_from_slice(&plane[y * self.width + col..y * self.width + col + w]);
                }
            }
            let mask = self.cloud_mask(ti);
            for y in row..row + h {
                cloud.extend_from_slice(&mask[y * self.width + col..y * self.width + col + w]);
            }
        }
        Ok(SitsPatch {
            height: h,
            width: w,
            bands,
            cloud,
            angles: self.angles.clone(),
            dates: self.dates.clone(),
            geo: self.geo.offset(row, col, 1),
        })
    }

    /// Keeps only the acquisitions at `indices` (in order).
    pub fn select(&self, indices: &[usize]) -> SitsPatch {
        let n = self.pixels();
        let mut bands = Vec::with_capacity(indices.len() * SPECTRAL_BANDS * n);
        let mut cloud = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            bands.extend_from_slice(&self.bands[i * SPECTRAL_BANDS * n..(i + 1) * SPECTRAL_BANDS * n]);
            cloud.extend_from_slice(self.cloud_mask(i));
        }
        SitsPatch {
            height: self.height,
            width: self.width,
            bands,
            cloud,
            angles: indices.iter().map(|&i| self.angles[i]).collect(),
            dates: indices.iter().map(|&i| self.dates[i]).collect(),
            geo: self.geo.clone(),
        }
    }
}

fn check_len(field: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            context: field,
            expected,
            found,
        })
    }
}

/// LiDAR-derived canopy height grid at the target resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRaster {
    pub height: usize,
    pub width: usize,
    /// Meters, row-major.
    pub heights: Vec<f64>,
    /// True where the pixel contributes to losses and metrics.
    pub valid_mask: Vec<bool>,
    /// LiDAR acquisition day of year.
    pub lidar_date: u16,
    pub geo: GeoInfo,
}

impl ReferenceRaster {
    pub fn resolution(&self) -> f64 {
        self.geo.pixel_size
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        check_len("reference heights", n, self.heights.len())?;
        check_len("reference mask", n, self.valid_mask.len())?;
        if !(1..=366).contains(&self.lidar_date) {
            return Err(Error::DateOutOfRange {
                doy: i64::from(self.lidar_date),
            });
        }
        for (i, (&h, &v)) in self.heights.iter().zip(&self.valid_mask).enumerate() {
            if !h.is_finite() {
                return Err(Error::NonFinite { what: "reference height", index: i });
            }
            if h < 0.0 || (v && h < MIN_VEGETATION_HEIGHT) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "reference pixel {i}: height {h} with valid={v}"
                )));
            }
        }
        Ok(())
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<ReferenceRaster> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::WindowOutOfBounds {
                row: row as i64,
                col: col as i64,
                size: h.max(w),
                height: self.height,
                width: self.width,
            });
        }
        let mut heights = Vec::with_capacity(h * w);
        let mut valid_mask = Vec::with_capacity(h * w);
        for y in row..row + h {
            let s = y * self.width + col;
            heights.extend_from_slice(&self.heights[s..s + w]);
            valid_mask.extend_from_slice(&self.valid_mask[s..s + w]);
        }
        Ok(ReferenceRaster {
            height: h,
            width: w,
            heights,
            valid_mask,
            lidar_date: self.lidar_date,
            geo: self.geo.offset(row, col, 1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointClass {
    Vegetation,
    Ground,
    Building,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    /// Height above ground, meters.
    pub z: f64,
    pub class: PointClass,
}

/// Closed ring of `(x, y)` vertices; the closing edge is implicit.
pub type Polygon = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloudSample {
    pub points: Vec<LidarPoint>,
    pub crop_parcels: Vec<Polygon>,
}

impl PointCloudSample {
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::NonFinite { what: "point cloud", index: i });
        }
        for (i, poly) in self.crop_parcels.iter().enumerate() {
            if !is_simple_polygon(poly) {
                return Err(Error::InvalidPolygon { index: i });
            }
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in map units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Extent {
    fn grid_len(span: f64, resolution: f64) -> Result<usize> {
        let n = span / resolution;
        let rounded = libm::round(n);
        if (n - rounded).abs() > 1e-6 {
            return Err(Error::MisalignedExtent { resolution });
        }
        Ok(rounded as usize)
    }
}

/// Percentile with linear interpolation between the closest order
/// statistics (rank `p/100 * (n-1)`). `sorted` must be ascending and non-empty.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Grids vegetation points into 95th-percentile heights.
///
/// Pixels are half-open: a point on the right or bottom edge of the extent
/// is outside it. Pixels without vegetation, or whose p95 is below 1.5 m,
/// get height 0 and are invalid; pixels whose center lies in a crop parcel
/// and whose p95 is below 5 m are excluded the same way.
pub fn rasterize_p95(cloud: &PointCloudSample, resolution: f64, extent: Extent, lidar_date: u16, crs: &str) -> Result<ReferenceRaster> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("resolution must be positive, got {resolution}")));
    }
    if !(extent.x_max > extent.x_min && extent.y_max > extent.y_min) {
        return Err(Error::EmptyExtent);
    }
    cloud.validate()?;
    let width = Extent::grid_len(extent.x_max - extent.x_min, resolution)?;
    let height = Extent::grid_len(extent.y_max - extent.y_min, resolution)?;
    if width == 0 || height == 0 {
        return Err(Error::EmptyExtent);
    }

    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); width * height];
    for p in &cloud.points {
        if p.class != PointClass::Vegetation {
            continue;
        }
        let cx = libm::floor((p.x - extent.x_min) / resolution);
        let cy = libm::floor((extent.y_max - p.y) / resolution);
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            continue;
        }
        buckets[cy as usize * width + cx as usize].push(p.z);
    }

    let mut heights = vec![0.0; width * height];
    let mut valid_mask = vec![false; width * height];
    for (i, bucket) in buckets.iter_mut().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        bucket.sort_by(f64::total_cmp);
        let p95 = percentile_sorted(bucket, 95.0);
        if p95 < MIN_VEGETATION_HEIGHT {
            continue;
        }
        if p95 < CROP_HEIGHT_LIMIT {
            let cx = extent.x_min + ((i % width) as f64 + 0.5) * resolution;
            let cy = extent.y_max - ((i / width) as f64 + 0.5) * resolution;
            if cloud.crop_parcels.iter().any(|poly| point_in_polygon(cx, cy, poly)) {
                continue;
            }
        }
        heights[i] = p95;
        valid_mask[i] = true;
    }

    Ok(ReferenceRaster {
        height,
        width,
        heights,
        valid_mask,
        lidar_date,
        geo: GeoInfo {
            origin_x: extent.x_min,
            origin_y: extent.y_max,
            pixel_size: resolution,
            crs: crs.into(),
        },
    })
}

/// Even-odd ray casting.
pub fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn orientation(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orientation(c, d, a);
    let d2 = orientation(c, d, b);
    let d3 = orientation(a, b, c);
    let d4 = orientation(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        orientation(p, q, r) == 0.0
            && r.0 >= p.0.min(q.0)
            && r.0 <= p.0.max(q.0)
            && r.1 >= p.1.min(q.1)
            && r.1 <= p.1.max(q.1)
    };
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// At least three vertices, all finite, and no two non-adjacent edges touching.
pub fn is_simple_polygon(poly: &[(f64, f64)]) -> bool {
    let n = poly.len();
    if n < 3 || poly.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return false;
    }
    for i in 0..n {
        let a = (poly[i], poly[(i + 1) % n]);
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let b = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a.0, a.1, b.0, b.1) {
                return false;
            }
        }
    }
    true
}

/// One acquisition before quality filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateImage {
    pub year: i32,
    pub doy: u16,
    pub cloud_fraction: f64,
    pub missing_fraction: f64,
    /// `10 x H x W` reflectances.
    pub bands: Vec<f32>,
    /// `H x W`, 1 = cloud.
    pub cloud: Vec<u8>,
    pub angles: AngleVector,
}

/// Keeps clean in-season acquisitions of the LiDAR year and builds the
/// patch. Same-day duplicates keep the least cloudy image.
pub fn filter_series(
    candidates: &[CandidateImage],
    lidar_year: i32,
    height: usize,
    width: usize,
    geo: GeoInfo,
) -> Result<SitsPatch> {
    let mut kept: Vec<&CandidateImage> = candidates
        .iter()
        .filter(|c| {
            c.year == lidar_year
                && calendar::in_season(c.year, c.doy)
                && c.cloud_fraction <= MAX_CLOUD_FRACTION
                && c.missing_fraction <= MAX_MISSING_FRACTION
        })
        .collect();
    kept.sort_by(|a, b| a.doy.cmp(&b.doy).then(a.cloud_fraction.total_cmp(&b.cloud_fraction)));
    kept.dedup_by_key(|c| c.doy);
    if kept.len() < MIN_OBSERVATIONS {
        return Err(Error::TooFewObservations {
            found: kept.len(),
            required: MIN_OBSERVATIONS,
        });
    }
    let n = height * width;
    let mut bands = Vec::with_capacity(kept.len() * SPECTRAL_BANDS * n);
    let mut cloud = Vec::with_capacity(kept.len() * n);
    for c in &kept {
        check_len("candidate bands", SPECTRAL_BANDS * n, c.bands.len())?;
        check_len("candidate cloud mask", n, c.cloud.len())?;
        bands.extend_from_slice(&c.bands);
        cloud.extend_from_slice(&c.cloud);
    }
    SitsPatch::new(
        height,
        width,
        bands,
        cloud,
        kept.iter().map(|c| c.angles).collect(),
        kept.iter().map(|c| c.doy).collect(),
        geo,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::encode_angles;

    fn geo() -> GeoInfo {
        GeoInfo {
            origin_x: 0.0,
            origin_y: 100.0,
            pixel_size: 10.0,
            crs: "EPSG:2154".into(),
        }
    }

    fn candidate(doy: u16, cloud: f64, missing: f64) -> CandidateImage {
        CandidateImage {
            year: 2023,
            doy,
            cloud_fraction: cloud,
            missing_fraction: missing,
            bands: vec![0.1; SPECTRAL_BANDS * 4],
            cloud: vec![0; 4],
            angles: encode_angles(0.5, 2.0, 0.1, 1.0).unwrap(),
        }
    }

    fn veg(x: f64, y: f64, z: f64) -> LidarPoint {
        LidarPoint {
            x,
            y,
            z,
            class: PointClass::Vegetation,
        }
    }

    #[test]
    fn p95_of_one_to_hundred() {
        let pts = (1..=100).map(|z| veg(5.0, 5.0, f64::from(z))).collect();
        let cloud = PointCloudSample {
            points: pts,
            crop_parcels: vec![],
        };
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 10.0,
            y_max: 10.0,
        };
        let r = rasterize_p95(&cloud, 10.0, ext, 180, "EPSG:2154").unwrap();
        assert!((r.heights[0] - 95.05).abs() < 1e-12);
        assert!(r.valid_mask[0]);
    }

    #[test]
    fn singleton_pixel() {
        let cloud = PointCloudSample {
            points: vec![veg(1.0, 1.0, 7.0)],
            crop_parcels: vec![],
        };
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 2.0,
            y_max: 2.0,
        };
        let r = rasterize_p95(&cloud, 2.0, ext, 180, "x").unwrap();
        assert_eq!(r.heights, vec![7.0]);
        assert_eq!(r.valid_mask, vec![true]);
    }

    #[test]
    fn crop_parcel_masks_low_vegetation() {
        let cloud = PointCloudSample {
            points: vec![veg(1.0, 1.0, 3.2), veg(3.0, 1.0, 3.2), veg(3.0, 3.0, 7.5), veg(1.0, 3.0, 1.0)],
            crop_parcels: vec![vec![(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)]],
        };
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 4.0,
            y_max: 4.0,
        };
        let r = rasterize_p95(&cloud, 2.0, ext, 180, "x").unwrap();
        // rows go north to south: row 0 holds y in [2, 4)
        assert_eq!(r.valid_mask, vec![false, true, false, false]);
        assert_eq!(r.heights, vec![0.0, 7.5, 0.0, 0.0]);
        r.validate().unwrap();
    }

    #[test]
    fn ground_points_ignored() {
        let mut p = veg(1.0, 1.0, 20.0);
        p.class = PointClass::Ground;
        let cloud = PointCloudSample {
            points: vec![p],
            crop_parcels: vec![],
        };
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 2.0,
            y_max: 2.0,
        };
        let r = rasterize_p95(&cloud, 2.0, ext, 180, "x").unwrap();
        assert_eq!(r.heights, vec![0.0]);
        assert!(!r.valid_mask[0]);
    }

    #[test]
    fn rasterize_errors() {
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 0.0,
            y_max: 2.0,
        };
        let empty = PointCloudSample::default();
        assert_eq!(rasterize_p95(&empty, 1.0, ext, 180, "x"), Err(Error::EmptyExtent));
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 2.5,
            y_max: 2.0,
        };
        assert!(matches!(rasterize_p95(&empty, 1.0, ext, 180, "x"), Err(Error::MisalignedExtent { .. })));
        let nan = PointCloudSample {
            points: vec![veg(0.5, 0.5, 1.0), veg(0.5, 0.5, f64::NAN)],
            crop_parcels: vec![],
        };
        let ext = Extent {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        };
        assert_eq!(
            rasterize_p95(&nan, 1.0, ext, 180, "x"),
            Err(Error::NonFinite { what: "point cloud", index: 1 })
        );
        let bowtie = PointCloudSample {
            points: vec![],
            crop_parcels: vec![vec![(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]],
        };
        assert_eq!(rasterize_p95(&bowtie, 1.0, ext, 180, "x"), Err(Error::InvalidPolygon { index: 0 }));
    }

    #[test]
    fn filter_drops_cloudy_image() {
        let c: Vec<_> = (0..8).map(|i| candidate(130 + 10 * i, if i == 3 { 0.6 } else { 0.1 }, 0.0)).collect();
        let p = filter_series(&c, 2023, 2, 2, geo()).unwrap();
        assert_eq!(p.len(), 7);
        assert!(!p.dates.contains(&160));
    }

    #[test]
    fn filter_keeps_clean_series() {
        let c: Vec<_> = (0..8).map(|i| candidate(130 + 10 * i, 0.0, 0.0)).collect();
        assert_eq!(filter_series(&c, 2023, 2, 2, geo()).unwrap().len(), 8);
    }

    #[test]
    fn filter_counts_both_thresholds() {
        let c: Vec<_> = (0..6)
            .map(|i| candidate(130 + 10 * i, 0.0, if i < 2 { 0.15 } else { 0.0 }))
            .collect();
        assert_eq!(
            filter_series(&c, 2023, 2, 2, geo()),
            Err(Error::TooFewObservations { found: 4, required: 5 })
        );
    }

    #[test]
    fn filter_applies_season_and_year() {
        let mut c: Vec<_> = (0..6).map(|i| candidate(130 + 10 * i, 0.0, 0.0)).collect();
        c[0].doy = 100;
        c[1].year = 2022;
        assert!(matches!(
            filter_series(&c, 2023, 2, 2, geo()),
            Err(Error::TooFewObservations { found: 4, .. })
        ));
    }

    #[test]
    fn patch_validation() {
        let c: Vec<_> = (0..5).map(|i| candidate(130 + 10 * i, 0.0, 0.0)).collect();
        let p = filter_series(&c, 2023, 2, 2, geo()).unwrap();
        let mut bad = p.clone();
        bad.dates[2] = 400;
        assert_eq!(bad.validate(), Err(Error::DateOutOfRange { doy: 400 }));
        let mut bad = p.clone();
        bad.dates.swap(1, 2);
        assert!(matches!(bad.validate(), Err(Error::DatesNotIncreasing { .. })));
        let short = p.select(&[0, 1, 2]);
        assert_eq!(short.validate(), Err(Error::TooFewObservations { found: 3, required: 5 }));
    }

    #[test]
    fn geo_offset() {
        let g = geo().offset(2, 3, 4);
        assert_eq!(g.origin_x, 30.0);
        assert_eq!(g.origin_y, 80.0);
        assert_eq!(g.pixel_size, 2.5);
    }
}
