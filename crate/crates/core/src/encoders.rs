//! Date and acquisition-angle encodings.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::calendar::JULY_FIRST_DOY;
use crate::error::{Error, Result};

fn check_doy(doy: u16) -> Result<()> {
    if (1..=366).contains(&doy) {
        Ok(())
    } else {
        Err(Error::DateOutOfRange { doy: i64::from(doy) })
    }
}

/// Offset in days from January 1st.
pub fn normalize_doy_s2(doy: u16) -> Result<i32> {
    check_doy(doy)?;
    Ok(i32::from(doy) - 1)
}

/// Signed offset in days from July 1st (non-leap calendar).
pub fn normalize_doy_lidar(doy: u16) -> Result<i32> {
    check_doy(doy)?;
    Ok(i32::from(doy) - i32::from(JULY_FIRST_DOY))
}

/// Sinusoidal encoding of a day offset: interleaved `(sin, cos)` pairs with
/// wavelengths growing geometrically up to `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEncoding(pub Vec<f32>);

impl TemporalEncoding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

pub fn positional_encoding(offset: i32, dim: usize, tau: f64) -> Result<TemporalEncoding> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "encoding dimension must be even and positive, got {dim}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("tau must be positive, got {tau}")));
    }
    let t = f64::from(offset);
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let denom = libm::pow(tau, (2 * k) as f64 / dim as f64);
        let arg = t / denom;
        out.push(libm::sin(arg) as f32);
        out.push(libm::cos(arg) as f32);
    }
    Ok(TemporalEncoding(out))
}

/// `[cos θSz, cos θSa, sin θSa, cos θVz, cos θVa, sin θVa]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleVector(pub [f32; 6]);

/// Encodes sun zenith/azimuth and view zenith/azimuth (radians).
pub fn encode_angles(sun_zenith: f64, sun_azimuth: f64, view_zenith: f64, view_azimuth: f64) -> Result<AngleVector> {
    for (i, a) in [sun_zenith, sun_azimuth, view_zenith, view_azimuth].into_iter().enumerate() {
        if !a.is_finite() {
            return Err(Error::NonFinite { what: "acquisition angle", index: i });
        }
    }
    Ok(AngleVector([
        libm::cos(sun_zenith) as f32,
        libm::cos(sun_azimuth) as f32,
        libm::sin(sun_azimuth) as f32,
        libm::cos(view_zenith) as f32,
        libm::cos(view_azimuth) as f32,
        libm::sin(view_azimuth) as f32,
    ]))
}
