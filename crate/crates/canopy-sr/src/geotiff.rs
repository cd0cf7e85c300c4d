//! Single-band 32-bit float GeoTIFF rasters.
//!
//! Georeferencing uses ModelPixelScale (33550), ModelTiepoint (33922) and
//! a GeoKeyDirectory (34735) declaring a projected, pixel-is-area model.
//! `EPSG:<code>` identifiers go to ProjectedCSTypeGeoKey; anything else is
//! stored as a citation string in GeoAsciiParams (34737).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use canopy_core::GeoInfo;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{AppError, AppResult};

const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GT_CITATION: u16 = 1026;
const PROJECTED_CS_TYPE: u16 = 3072;
const MODEL_PROJECTED: u16 = 1;
const RASTER_PIXEL_IS_AREA: u16 = 1;

/// Row-major grid of values with its placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub geo: GeoInfo,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f64>, geo: GeoInfo) -> Self {
        assert_eq!(data.len(), height * width, "raster data length");
        Self {
            height,
            width,
            data,
            geo,
        }
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Option<Raster> {
        if row + h > self.height || col + w > self.width {
            return None;
        }
        let mut data = Vec::with_capacity(h * w);
        for y in row..row + h {
            data.extend_from_slice(&self.data[y * self.width + col..y * self.width + col + w]);
        }
        Some(Raster::new(h, w, data, self.geo.offset(row, col, 1)))
    }
}

fn epsg_code(crs: &str) -> Option<u16> {
    crs.trim().strip_prefix("EPSG:")?.parse().ok()
}

fn tiff_err(path: &Path, e: tiff::TiffError) -> AppError {
    AppError::format(path, format!("TIFF: {e}"))
}

pub fn write_geotiff(path: impl AsRef<Path>, raster: &Raster) -> AppResult<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = (raster.width as u32, raster.height as u32);
    let mut image = enc
        .new_image::<colortype::Gray32Float>(w, h)
        .map_err(|e| tiff_err(path, e))?;
    let g = &raster.geo;
    let mut keys: Vec<u16> = vec![1, 1, 0, 0];
    let mut push_key = |id: u16, loc: u16, count: u16, value: u16| keys.extend_from_slice(&[id, loc, count, value]);
    push_key(GT_MODEL_TYPE, 0, 1, MODEL_PROJECTED);
    push_key(GT_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA);
    let citation = match epsg_code(&g.crs) {
        Some(code) => {
            push_key(PROJECTED_CS_TYPE, 0, 1, code);
            None
        }
        None => {
            let text = format!("{}|", g.crs);
            push_key(GT_CITATION, Tag::GeoAsciiParamsTag.to_u16(), text.len() as u16, 0);
            Some(text)
        }
    };
    keys[3] = ((keys.len() - 4) / 4) as u16;
    {
        let dir = image.encoder();
        let wr = |e| tiff_err(path, e);
        dir.write_tag(Tag::ModelPixelScaleTag, &[g.pixel_size, g.pixel_size, 0.0][..])
            .map_err(wr)?;
        dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, g.origin_x, g.origin_y, 0.0][..])
            .map_err(wr)?;
        dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..]).map_err(wr)?;
        if let Some(text) = &citation {
            dir.write_tag(Tag::GeoAsciiParamsTag, text.as_str()).map_err(wr)?;
        }
    }
    let data: Vec<f32> = raster.data.iter().map(|&v| v as f32).collect();
    image.write_data(&data).map_err(|e| tiff_err(path, e))?;
    Ok(())
}

pub fn read_geotiff(path: impl AsRef<Path>) -> AppResult<Raster> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let scale = dec
        .get_tag_f64_vec(Tag::ModelPixelScaleTag)
        .map_err(|_| AppError::format(path, "missing ModelPixelScale tag"))?;
    let tie = dec
        .get_tag_f64_vec(Tag::ModelTiepointTag)
        .map_err(|_| AppError::format(path, "missing ModelTiepoint tag"))?;
    if scale.len() < 2 || tie.len() < 6 || (scale[0] - scale[1]).abs() > 1e-9 * scale[0].abs() {
        return Err(AppError::format(path, "unsupported georeferencing (needs square pixels)"));
    }
    let keys = dec.get_tag_u16_vec(Tag::GeoKeyDirectoryTag).unwrap_or_default();
    let ascii = match dec.find_tag(Tag::GeoAsciiParamsTag) {
        Ok(Some(v)) => v.into_string().unwrap_or_default(),
        _ => String::new(),
    };
    let mut crs = String::new();
    for k in keys.chunks_exact(4).skip(1) {
        if k[0] == PROJECTED_CS_TYPE && k[1] == 0 {
            crs = format!("EPSG:{}", k[3]);
        } else if k[0] == GT_CITATION && crs.is_empty() {
            let (off, n) = (k[3] as usize, k[2] as usize);
            crs = ascii.get(off..off + n).unwrap_or("").trim_end_matches('|').to_string();
        }
    }
    let data: Vec<f64> = match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::F32(v) => v.into_iter().map(f64::from).collect(),
        DecodingResult::F64(v) => v,
        _ => return Err(AppError::format(path, "expected a single-band float raster")),
    };
    if data.len() != (w as usize) * (h as usize) {
        return Err(AppError::format(path, "expected a single-band raster"));
    }
    // tiepoint maps raster (i, j) to model (x, y)
    let px = scale[0];
    Ok(Raster::new(
        h as usize,
        w as usize,
        data,
        GeoInfo {
            origin_x: tie[3] - tie[0] * px,
            origin_y: tie[4] + tie[1] * px,
            pixel_size: px,
            crs,
        },
    ))
}
