//! File formats, run configuration, tiled inference, reports and the
//! command implementations behind the `canopy-sr` binary.
//!
//! * [`container`]: binary patch container (image series + reference raster).
//! * [`geotiff`]: single-band float GeoTIFF rasters.
//! * [`manifest`]: dataset manifests, one `path split` pair per line.
//! * [`runconfig`]: the TOML run configuration.
//! * [`checkpoint`]: versioned training checkpoints.
//! * [`predict`]: whole-patch and tiled inference, bicubic baseline.
//! * [`report`], [`plot`]: evaluation reports and FAP figures.
//! * [`commands`]: `synth`, `train`, `evaluate`, `predict`, `fap`, `config`.

pub mod checkpoint;
pub mod commands;
pub mod container;
pub mod error;
pub mod geotiff;
pub mod manifest;
pub mod plot;
pub mod predict;
pub mod report;
pub mod runconfig;

pub use error::{AppError, AppResult};
