//! SVG figures of frequency attenuation profiles.

use std::path::Path;

use canopy_core::metrics::FapProfile;
use plotters::prelude::*;

use crate::error::{AppError, AppResult};

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One line per `(label, profile)` against normalized frequency.
pub fn plot_fap(path: &Path, title: &str, curves: &[(&str, &FapProfile)]) -> AppResult<()> {
    let err = |e: String| AppError::format(path, format!("plot: {e}"));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, c) in curves {
        for &v in &c.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        lo = -1.0;
        hi = 0.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0f64..1.0f64, (lo - pad)..(hi + pad))
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("normalized frequency f / f_N")
        .y_desc("log10 magnitude relative to lowest bin")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(
                c.freq.iter().copied().zip(c.values.iter().copied()),
                color.stroke_width(2),
            ))
            .map_err(|e| err(e.to_string()))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}
