//! Evaluation over a set of scenes and the report files it produces.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use canopy_core::datapipe::alignment;
use canopy_core::metrics::{fap_with_bins, BasicMetrics, BinAccumulator, FapProfile, HeightBin, MetricAccumulator};
use canopy_core::trainer::Scene;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::geotiff::Raster;
use crate::predict::HeightPredictor;

/// Mean FAP of predictions and of the matching references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FapSummary {
    /// Patches that contributed (square and at least 8 pixels wide).
    pub patches: usize,
    pub freq: Vec<f64>,
    pub prediction: Vec<f64>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub resolution_m: f64,
    pub patches: usize,
    pub metrics: BasicMetrics,
    pub bins: Vec<HeightBin>,
    pub fap: Option<FapSummary>,
}

/// Prediction over the reference extent of one scene.
pub fn predict_reference_area(predictor: &dyn HeightPredictor, scene: &Scene) -> AppResult<Raster> {
    let a = alignment(&scene.patch, &scene.reference)?;
    if a.factor != predictor.factor() {
        return Err(AppError::Config(format!(
            "reference is {}x finer than the imagery but the model upsamples {}x",
            a.factor,
            predictor.factor()
        )));
    }
    let full = predictor.predict(&scene.patch, scene.reference.lidar_date)?;
    let outside = || {
        AppError::Core(canopy_core::Error::WindowOutOfBounds {
            row: a.row,
            col: a.col,
            size: a.rows.max(a.cols),
            height: scene.patch.height,
            width: scene.patch.width,
        })
    };
    if a.row < 0 || a.col < 0 {
        return Err(outside());
    }
    let f = a.factor;
    full.crop(a.row as usize * f, a.col as usize * f, scene.reference.height, scene.reference.width)
        .ok_or_else(outside)
}

pub fn evaluate(predictor: &dyn HeightPredictor, scenes: &[Scene], fap_bins: usize) -> AppResult<EvalReport> {
    let mut acc = MetricAccumulator::default();
    let mut bins = BinAccumulator::new();
    let mut fap_pred: Vec<FapProfile> = Vec::new();
    let mut fap_ref: Vec<FapProfile> = Vec::new();
    let mut resolution = 0.0;
    for scene in scenes {
        let r = &scene.reference;
        resolution = r.resolution();
        let pred = predict_reference_area(predictor, scene)?;
        acc.extend(&pred.data, &r.heights, &r.valid_mask)?;
        bins.extend(&pred.data, &r.heights, &r.valid_mask)?;
        if r.height == r.width && r.height >= 8 {
            fap_pred.push(fap_with_bins(&pred.data, r.height, r.width, fap_bins)?);
            fap_ref.push(fap_with_bins(&r.heights, r.height, r.width, fap_bins)?);
        } else {
            log::warn!("skipping FAP for a {}x{} reference (needs a square of side >= 8)", r.height, r.width);
        }
    }
    let fap = mean_profiles(&fap_pred).zip(mean_profiles(&fap_ref)).map(|(p, r)| FapSummary {
        patches: fap_pred.len(),
        freq: p.freq,
        prediction: p.values,
        reference: r.values,
    });
    Ok(EvalReport {
        resolution_m: resolution,
        patches: scenes.len(),
        metrics: acc.finish()?,
        bins: bins.finish(),
        fap,
    })
}

/// Pointwise mean; profiles with a different bin layout than the first
/// are skipped.
pub fn mean_profiles(profiles: &[FapProfile]) -> Option<FapProfile> {
    let first = profiles.first()?;
    let mut sum = vec![0.0; first.values.len()];
    let mut n = 0usize;
    for p in profiles.iter().filter(|p| p.freq == first.freq) {
        for (s, v) in sum.iter_mut().zip(&p.values) {
            *s += v;
        }
        n += 1;
    }
    Some(FapProfile {
        freq: first.freq.clone(),
        values: sum.into_iter().map(|s| s / n as f64).collect(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "Evaluation at {} m over {} patches ({} valid pixels)", self.resolution_m, self.patches, m.count);
        let _ = writeln!(s);
        let _ = writeln!(s, "MAE   {:.4} m", m.mae);
        let _ = writeln!(s, "RMSE  {:.4} m", m.rmse);
        let _ = writeln!(s, "R2    {}", opt(m.r2));
        let _ = writeln!(s, "rMAE  {:.4}", m.rmae);
        let _ = writeln!(s, "bias  {:.4} m", m.bias);
        let _ = writeln!(s);
        let _ = writeln!(s, "Error (prediction - reference) by reference height:");
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "bin", "count", "fraction", "median", "q1", "q3", "whisk_lo", "whisk_hi"
        );
        for b in &self.bins {
            let st = b.stats;
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>9.4} {:>9} {:>9} {:>9} {:>9} {:>9}",
                b.label(),
                b.count,
                b.fraction,
                opt(st.map(|x| x.median)),
                opt(st.map(|x| x.q1)),
                opt(st.map(|x| x.q3)),
                opt(st.map(|x| x.whisker_lo)),
                opt(st.map(|x| x.whisker_hi)),
            );
        }
        if let Some(f) = &self.fap {
            let _ = writeln!(s);
            let _ = writeln!(s, "Frequency attenuation profile (log10, lowest bin = 0), mean of {} patches:", f.patches);
            let _ = writeln!(s, "{:>8} {:>11} {:>11}", "f/f_N", "prediction", "reference");
            for i in 0..f.freq.len() {
                let _ = writeln!(s, "{:>8.4} {:>11.5} {:>11.5}", f.freq[i], f.prediction[i], f.reference[i]);
            }
        }
        s
    }

    /// Writes `<stem>.txt`, `<stem>.json`, `<stem>_metrics.csv`,
    /// `<stem>_bins.csv` and, when available, `<stem>_fap.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> AppResult<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: String, bytes: Vec<u8>| -> AppResult<()> {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| AppError::io(&p, e))?;
            written.push(p);
            Ok(())
        };
        put(format!("{stem}.txt"), self.to_text().into_bytes())?;
        put(
            format!("{stem}.json"),
            serde_json::to_vec_pretty(self).expect("report serializes"),
        )?;
        let m = &self.metrics;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| AppError::format(dir, e.to_string());
        w.write_record(["resolution_m", "patches", "count", "mae", "rmse", "r2", "rmae", "bias"])
            .map_err(csv_err)?;
        w.write_record([
            self.resolution_m.to_string(),
            self.patches.to_string(),
            m.count.to_string(),
            m.mae.to_string(),
            m.rmse.to_string(),
            m.r2.map_or(String::new(), |v| v.to_string()),
            m.rmae.to_string(),
            m.bias.to_string(),
        ])
        .map_err(csv_err)?;
        put(format!("{stem}_metrics.csv"), w.into_inner().expect("in-memory writer"))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin", "lower", "upper", "count", "fraction", "median", "q1", "q3", "whisker_lo", "whisker_hi"])
            .map_err(csv_err)?;
        for b in &self.bins {
            let st = b.stats;
            let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                b.label(),
                b.lower.to_string(),
                cell(b.upper),
                b.count.to_string(),
                b.fraction.to_string(),
                cell(st.map(|x| x.median)),
                cell(st.map(|x| x.q1)),
                cell(st.map(|x| x.q3)),
                cell(st.map(|x| x.whisker_lo)),
                cell(st.map(|x| x.whisker_hi)),
            ])
            .map_err(csv_err)?;
        }
        put(format!("{stem}_bins.csv"), w.into_inner().expect("in-memory writer"))?;
        if let Some(f) = &self.fap {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["freq", "prediction", "reference"]).map_err(csv_err)?;
            for i in 0..f.freq.len() {
                w.write_record([f.freq[i].to_string(), f.prediction[i].to_string(), f.reference[i].to_string()])
                    .map_err(csv_err)?;
            }
            put(format!("{stem}_fap.csv"), w.into_inner().expect("in-memory writer"))?;
        }
        Ok(written)
    }
}
