//! Grid resampling used for the bicubic baseline and spectral checks.

use alloc::{vec, vec::Vec};

use crate::error::{Error, Result};

fn check(img: &[f64], height: usize, width: usize) -> Result<()> {
    if img.len() != height * width || height == 0 || width == 0 {
        return Err(Error::Shape {
            context: "resample input",
            expected: height * width,
            found: img.len(),
        });
    }
    Ok(())
}

/// 2x2 block mean. Odd trailing rows / columns are dropped.
pub fn box_downsample(img: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    check(img, height, width)?;
    let (h, w) = (height / 2, width / 2);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let a = img[2 * y * width + 2 * x];
            let b = img[2 * y * width + 2 * x + 1];
            let c = img[(2 * y + 1) * width + 2 * x];
            let d = img[(2 * y + 1) * width + 2 * x + 1];
            out[y * w + x] = (a + b + c + d) / 4.0;
        }
    }
    Ok(out)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate along one axis.
/// Pixel centers are aligned (`src = (dst + 0.5) / r - 0.5`) and edges are
/// replicated.
fn taps(n: usize, r: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n * r)
        .map(|o| {
            let s = (o as f64 + 0.5) / r as f64 - 0.5;
            let base = libm::floor(s);
            let frac = s - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as i64 - 1;
                idx[k] = (base as i64 + off).clamp(0, n as i64 - 1) as usize;
                w[k] = cubic_weight(frac - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic upsampling by an integer factor.
pub fn bicubic_upsample(img: &[f64], height: usize, width: usize, r: usize) -> Result<Vec<f64>> {
    check(img, height, width)?;
    if r == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be positive".into()));
    }
    let ow = width * r;
    let oh = height * r;
    let tx = taps(width, r);
    let ty = taps(height, r);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for (x, (idx, w)) in tx.iter().enumerate() {
            rows[y * ow + x] = (0..4).map(|k| w[k] * img[y * width + idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (y, (idx, w)) in ty.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = (0..4).map(|k| w[k] * rows[idx[k] * ow + x]).sum();
        }
    }
    Ok(out)
}
