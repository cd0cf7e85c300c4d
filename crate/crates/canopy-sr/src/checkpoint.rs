//! Versioned training checkpoints.
//!
//! ```text
//! magic        8  b"CSRCKPT\0"
//! version      u32 LE
//! header_len   u64 LE
//! header       JSON (configuration, channel statistics, step, RNG
//!              position, optimizer counters, parameter layout)
//! params       n x f32 LE
//! adam.m       n x f32 LE
//! adam.v       n x f32 LE
//! ```

use std::fs;
use std::path::Path;

use canopy_core::datapipe::ChannelStats;
use canopy_core::nn::ParamLayout;
use canopy_core::optim::Adam;
use canopy_core::trainer::{RngState, TrainState, Trainer};
use canopy_core::CanopyModel;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::runconfig::RunConfig;

pub const MAGIC: [u8; 8] = *b"CSRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: RunConfig,
    pub stats: ChannelStats,
    pub step: u64,
    pub rng: RngState,
    pub best_val_mae: Option<f64>,
    pub stale_rounds: usize,
    pub adam_t: u64,
    pub layout: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

fn layout_entries(layout: &ParamLayout) -> Vec<ParamEntry> {
    layout
        .specs
        .iter()
        .map(|s| ParamEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
            offset: s.offset,
        })
        .collect()
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, trainer: &Trainer, state: &TrainState) -> Self {
        Self {
            header: Header {
                config: config.clone(),
                stats: trainer.stats.clone(),
                step: state.step,
                rng: RngState::capture(&state.rng),
                best_val_mae: state.best_val_mae,
                stale_rounds: state.stale_rounds,
                adam_t: state.adam.t,
                layout: layout_entries(&trainer.model.layout),
            },
            params: state.params.clone(),
            m: state.adam.m.clone(),
            v: state.adam.v.clone(),
        }
    }

    /// Training state for `trainer`, whose model must have the stored
    /// parameter layout.
    pub fn restore(&self, trainer: &Trainer) -> AppResult<TrainState> {
        self.check_layout(&trainer.model)?;
        let mut adam = Adam::new(self.params.len(), &trainer.train);
        adam.t = self.header.adam_t;
        adam.m.clone_from(&self.m);
        adam.v.clone_from(&self.v);
        Ok(TrainState {
            params: self.params.clone(),
            adam,
            step: self.header.step,
            rng: self.header.rng.restore(),
            best_val_mae: self.header.best_val_mae,
            stale_rounds: self.header.stale_rounds,
        })
    }

    pub fn model(&self) -> AppResult<CanopyModel> {
        let model = CanopyModel::new(&self.header.config.model)?;
        self.check_layout(&model)?;
        Ok(model)
    }

    fn check_layout(&self, model: &CanopyModel) -> AppResult<()> {
        if layout_entries(&model.layout) != self.header.layout || model.num_params() != self.params.len() {
            return Err(AppError::Config(
                "checkpoint parameter layout does not match the configured model".into(),
            ));
        }
        Ok(())
    }

    /// Named view of one parameter tensor.
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let e = self.header.layout.iter().find(|e| e.name == name)?;
        let n: usize = e.shape.iter().product();
        self.params.get(e.offset..e.offset + n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let n = self.params.len();
        let mut out = Vec::with_capacity(20 + header.len() + 12 * n);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for buf in [&self.params, &self.m, &self.v] {
            for x in buf.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> AppResult<Self> {
        let bad = |reason: String| AppError::format(path, reason);
        if bytes.len() < 20 || bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!(
                "checkpoint format version {version} is not supported by this build (expected {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let hlen = usize::try_from(hlen).map_err(|_| bad("header length overflows".into()))?;
        let body = bytes
            .get(20..)
            .and_then(|b| b.get(..hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let n: usize = header
            .layout
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let rest = &bytes[20 + hlen..];
        if rest.len() != 12 * n {
            return Err(bad(format!("expected {} bytes of tensors, found {}", 12 * n, rest.len())));
        }
        let floats = |k: usize| -> Vec<f32> {
            rest[4 * n * k..4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self {
            header,
            params: floats(0),
            m: floats(1),
            v: floats(2),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> AppResult<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| AppError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> AppResult<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => AppError::Usage(format!("checkpoint not found: {}", path.display())),
            _ => AppError::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use canopy_core::config::*;

    fn tiny() -> (RunConfig, Trainer) {
        let mut cfg = RunConfig::for_resolution(Resolution::M5);
        cfg.model.backbone = BackboneConfig {
            n_blocks: 1,
            layers_per_block: 1,
            growth: 4,
            feat_dim: 8,
            ..BackboneConfig::default()
        };
        cfg.model.attention = AttentionConfig {
            heads: 2,
            head_dim: 4,
            feat_out: 8,
            tau: 365.0,
        };
        cfg.model.head.mlp_sizes = vec![8, 8];
        let t = Trainer::new(&cfg.model, cfg.loss.clone(), cfg.train.clone(), cfg.sampler.clone(), ChannelStats::identity()).unwrap();
        (cfg, t)
    }

    #[test]
    fn round_trip_preserves_every_tensor() {
        let (cfg, t) = tiny();
        let mut state = t.init_state();
        state.adam.m[3] = 0.25;
        state.adam.v[5] = 1e-7;
        state.step = 17;
        let ck = Checkpoint::capture(&cfg, &t, &state);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        for e in &back.header.layout {
            let n: usize = e.shape.iter().product();
            assert_eq!(back.tensor(&e.name).unwrap(), &state.params[e.offset..e.offset + n]);
        }
        let restored = back.restore(&t).unwrap();
        assert_eq!(restored, state);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let (cfg, t) = tiny();
        let mut bytes = Checkpoint::capture(&cfg, &t, &t.init_state()).to_bytes();
        bytes[8] = 2;
        let err = Checkpoint::from_bytes(&bytes, Path::new("c.ckpt")).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn truncated_tensors_are_refused() {
        let (cfg, t) = tiny();
        let bytes = Checkpoint::capture(&cfg, &t, &t.init_state()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], Path::new("c")).is_err());
    }

    #[test]
    fn missing_file_is_a_clean_error() {
        let err = Checkpoint::load("/nonexistent/dir/x.ckpt").unwrap_err();
        assert!(err.to_string().contains("not found"));
    }
}
