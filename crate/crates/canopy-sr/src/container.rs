//! Binary patch container.
//!
//! All integers and floats little-endian.
//!
//! ```text
//! magic      4  b"CSRP"
//! version    u16
//! sections   u8   bit 0: image series, bit 1: reference raster
//! [series]
//!   height u32, width u32, count u32 (T)
//!   geo
//!   dates      T x u16 (day of year)
//!   angles     T x 6 x f32
//!   bands      T x 10 x height x width x f32 (reflectance)
//!   cloud      T x height x width x u8 (0 clear, 1 cloud)
//! [reference]
//!   height u32, width u32, lidar_date u16
//!   geo
//!   heights    height x width x f64 (meters)
//!   valid      height x width x u8 (0 or 1)
//! geo: origin_x f64, origin_y f64, pixel_size f64, crs_len u16, crs utf-8
//! ```
//!
//! Trailing bytes are rejected. Decoded values go through the same
//! validation as freshly built patches.

use std::fs;
use std::path::Path;

use canopy_core::config::SPECTRAL_BANDS;
use canopy_core::encoders::AngleVector;
use canopy_core::{GeoInfo, ReferenceRaster, SitsPatch};

use crate::error::{AppError, AppResult};

pub const MAGIC: [u8; 4] = *b"CSRP";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "csrp";

const HAS_SERIES: u8 = 1;
const HAS_REFERENCE: u8 = 2;

/// Contents of one container file. Training and evaluation need both
/// parts; prediction only the series.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFile {
    pub series: Option<SitsPatch>,
    pub reference: Option<ReferenceRaster>,
}

impl PatchFile {
    pub fn new(series: SitsPatch, reference: Option<ReferenceRaster>) -> Self {
        Self {
            series: Some(series),
            reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecodeError {
    #[error("field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error(transparent)]
    Invalid(#[from] canopy_core::Error),
}

fn field_err(field: &'static str, reason: impl Into<String>) -> DecodeError {
    DecodeError::Field {
        field,
        reason: reason.into(),
    }
}

pub fn encode(file: &PatchFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = file.series.as_ref().map_or(0, |_| HAS_SERIES) | file.reference.as_ref().map_or(0, |_| HAS_REFERENCE);
    out.push(flags);
    if let Some(p) = &file.series {
        put_u32(&mut out, p.height);
        put_u32(&mut out, p.width);
        put_u32(&mut out, p.dates.len());
        put_geo(&mut out, &p.geo);
        for d in &p.dates {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for a in &p.angles {
            for v in a.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &p.bands {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.cloud);
    }
    if let Some(r) = &file.reference {
        put_u32(&mut out, r.height);
        put_u32(&mut out, r.width);
        out.extend_from_slice(&r.lidar_date.to_le_bytes());
        put_geo(&mut out, &r.geo);
        for v in &r.heights {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(r.valid_mask.iter().map(|&v| u8::from(v)));
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("dimension fits in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_geo(out: &mut Vec<u8>, geo: &GeoInfo) {
    out.extend_from_slice(&geo.origin_x.to_le_bytes());
    out.extend_from_slice(&geo.origin_y.to_le_bytes());
    out.extend_from_slice(&geo.pixel_size.to_le_bytes());
    let crs = geo.crs.as_bytes();
    let len = u16::try_from(crs.len()).expect("CRS identifier shorter than 64 KiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(crs);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            field_err(
                field,
                format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
            )
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, DecodeError> {
        Ok(self.array::<1>(field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array(field)?))
    }

    fn u32(&mut self, field: &'static str) -> Result<usize, DecodeError> {
        Ok(u32::from_le_bytes(self.array(field)?) as usize)
    }

    fn f64(&mut self, field: &'static str) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array(field)?))
    }

    fn count(&self, dims: &[usize], field: &'static str) -> Result<usize, DecodeError> {
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| field_err(field, "size overflows"))
    }

    fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>, DecodeError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| field_err(field, "size overflows"))?, field)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>, DecodeError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| field_err(field, "size overflows"))?, field)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn flags(&mut self, n: usize, field: &'static str) -> Result<Vec<u8>, DecodeError> {
        let bytes = self.take(n, field)?;
        if let Some(i) = bytes.iter().position(|&b| b > 1) {
            return Err(field_err(field, format!("value {} at index {i} is not 0 or 1", bytes[i])));
        }
        Ok(bytes.to_vec())
    }

    fn geo(&mut self, prefix: Fields) -> Result<GeoInfo, DecodeError> {
        let origin_x = self.f64(prefix.origin_x)?;
        let origin_y = self.f64(prefix.origin_y)?;
        let pixel_size = self.f64(prefix.pixel_size)?;
        if !(pixel_size > 0.0 && pixel_size.is_finite()) || !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(field_err(prefix.pixel_size, "geo transform must be finite with a positive pixel size"));
        }
        let len = self.u16(prefix.crs)? as usize;
        let crs = std::str::from_utf8(self.take(len, prefix.crs)?)
            .map_err(|e| field_err(prefix.crs, e.to_string()))?
            .to_string();
        Ok(GeoInfo {
            origin_x,
            origin_y,
            pixel_size,
            crs,
        })
    }
}

#[derive(Clone, Copy)]
struct Fields {
    origin_x: &'static str,
    origin_y: &'static str,
    pixel_size: &'static str,
    crs: &'static str,
}

const SERIES_GEO: Fields = Fields {
    origin_x: "series.geo.origin_x",
    origin_y: "series.geo.origin_y",
    pixel_size: "series.geo.pixel_size",
    crs: "series.geo.crs",
};

const REFERENCE_GEO: Fields = Fields {
    origin_x: "reference.geo.origin_x",
    origin_y: "reference.geo.origin_y",
    pixel_size: "reference.geo.pixel_size",
    crs: "reference.geo.crs",
};

pub fn decode(buf: &[u8]) -> Result<PatchFile, DecodeError> {
    let mut r = Reader { buf, pos: 0 };
    if r.array::<4>("magic")? != MAGIC {
        return Err(field_err("magic", "not a patch container"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(field_err("version", format!("unsupported version {version} (expected {VERSION})")));
    }
    let flags = r.u8("sections")?;
    if flags & !(HAS_SERIES | HAS_REFERENCE) != 0 {
        return Err(field_err("sections", format!("unknown section bits {flags:#04x}")));
    }
    let series = if flags & HAS_SERIES != 0 {
        let height = r.u32("series.height")?;
        let width = r.u32("series.width")?;
        let t = r.u32("series.count")?;
        let geo = r.geo(SERIES_GEO)?;
        let mut dates = Vec::with_capacity(t.min(366));
        for _ in 0..t {
            dates.push(r.u16("series.dates")?);
        }
        let raw_angles = r.f32s(r.count(&[t, 6], "series.angles")?, "series.angles")?;
        let angles = raw_angles
            .chunks_exact(6)
            .map(|c| AngleVector(c.try_into().unwrap()))
            .collect();
        let bands = r.f32s(r.count(&[t, SPECTRAL_BANDS, height, width], "series.bands")?, "series.bands")?;
        let cloud = r.flags(r.count(&[t, height, width], "series.cloud")?, "series.cloud")?;
        Some(SitsPatch::new(height, width, bands, cloud, angles, dates, geo)?)
    } else {
        None
    };
    let reference = if flags & HAS_REFERENCE != 0 {
        let height = r.u32("reference.height")?;
        let width = r.u32("reference.width")?;
        let lidar_date = r.u16("reference.lidar_date")?;
        let geo = r.geo(REFERENCE_GEO)?;
        let n = r.count(&[height, width], "reference.heights")?;
        let heights = r.f64s(n, "reference.heights")?;
        let valid_mask = r.flags(n, "reference.valid")?.into_iter().map(|v| v == 1).collect();
        let raster = ReferenceRaster {
            height,
            width,
            heights,
            valid_mask,
            lidar_date,
            geo,
        };
        raster.validate()?;
        Some(raster)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(field_err("end", format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(PatchFile { series, reference })
}

pub fn save_patch(path: impl AsRef<Path>, file: &PatchFile) -> AppResult<()> {
    let path = path.as_ref();
    fs::write(path, encode(file)).map_err(|e| AppError::io(path, e))
}

pub fn load_patch(path: impl AsRef<Path>) -> AppResult<PatchFile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        DecodeError::Field { field, reason } => AppError::Parse {
            path: path.to_path_buf(),
            field,
            reason,
        },
        DecodeError::Invalid(inner) => AppError::Core(inner),
    })
}

/// Loads a container that must hold both the series and the reference.
pub fn load_scene(path: impl AsRef<Path>) -> AppResult<canopy_core::trainer::Scene> {
    let path = path.as_ref();
    let file = load_patch(path)?;
    match (file.series, file.reference) {
        (Some(patch), Some(reference)) => Ok(canopy_core::trainer::Scene { patch, reference }),
        (None, _) => Err(AppError::format(path, "container has no image series")),
        (_, None) => Err(AppError::format(path, "container has no reference raster")),
    }
}
