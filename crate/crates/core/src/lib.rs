//! Joint canopy-height regression and super-resolution from multi-temporal
//! optical satellite patches.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. With `std`, per-sample forward/backward passes in the trainer
//! run on the rayon thread pool; results are identical either way because
//! reductions are performed in a fixed order.
//!
//! Layout:
//!
//! * [`datamodel`]: patches, reference rasters, point clouds, LiDAR p95 gridding
//!   and acquisition filtering.
//! * [`encoders`]: day-of-year offsets, sinusoidal date encoding, angle encoding.
//! * [`nn`]: feature maps, parameter layout and the convolution / norm layers
//!   with hand-written backward passes.
//! * [`backbone`], [`temporal`], [`superres`], [`model`]: the network.
//! * [`losses`], [`metrics`], [`resample`]: objectives and evaluation.
//! * [`datapipe`]: sampling, padding, windows, standardization and the
//!   synthetic scene generator.
//! * [`optim`], [`trainer`]: Adam, warm-restart cosine schedule and the
//!   accumulation-aware training loop.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod calendar;
pub mod config;
pub mod datamodel;
pub mod datapipe;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod superres;
pub mod temporal;
pub mod trainer;

pub use config::{
    AttentionConfig, BackboneConfig, HeadConfig, LossConfig, ModelConfig, Resolution,
    SamplerConfig, SamplingStrategy, SrConfig, TrainConfig,
};
pub use datamodel::{GeoInfo, ReferenceRaster, SitsPatch};
pub use error::{Error, Result};
pub use model::{CanopyModel, ModelInput};
