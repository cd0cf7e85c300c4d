//! Run configuration: one TOML file holding every model, loss, training,
//! sampling, data and evaluation setting.
//!
//! Loading starts from the defaults of the requested `resolution`, lays
//! the user's table (and any `--set key=value` overrides) on top and then
//! deserializes strictly, so unknown keys are rejected by name. The
//! resolved configuration serializes back to a file that loads to the same
//! value.

use std::fs;
use std::path::Path;

use canopy_core::config::{LossConfig, ModelConfig, Resolution, SamplerConfig, TrainConfig};
use canopy_core::datapipe::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output resolution in meters: 10, 5 or 2.5.
    #[serde(with = "meters")]
    pub resolution: Resolution,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Patches written by `synth`.
    pub count: usize,
    /// How many of them go to the validation and test splits.
    pub val_count: usize,
    pub test_count: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 10,
            val_count: 2,
            test_count: 2,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Core side of an inference tile in 10 m pixels.
    pub tile: usize,
    pub fap_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tile: 64, fap_bins: 32 }
    }
}

mod meters {
    use canopy_core::config::Resolution;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Resolution, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(r.meters())
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Float(f64),
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Resolution, D::Error> {
        let m = match Raw::deserialize(d)? {
            Raw::Float(f) => f,
            Raw::Int(i) => i as f64,
            Raw::Text(t) => t.trim().parse().map_err(serde::de::Error::custom)?,
        };
        Resolution::from_meters(m).map_err(serde::de::Error::custom)
    }
}

impl RunConfig {
    pub fn for_resolution(resolution: Resolution) -> Self {
        let mut data = DataConfig::default();
        data.synth.resolution = resolution.meters();
        Self {
            resolution,
            model: ModelConfig::for_resolution(resolution),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        let r = self.resolution;
        if self.model.sr.factor != r.factor() {
            return Err(AppError::Config(format!(
                "model.sr.factor = {} contradicts resolution = {} m (factor {})",
                self.model.sr.factor,
                r.meters(),
                r.factor()
            )));
        }
        if (self.data.synth.resolution - r.meters()).abs() > 1e-9 {
            return Err(AppError::Config(format!(
                "data.synth.resolution = {} contradicts resolution = {}",
                self.data.synth.resolution,
                r.meters()
            )));
        }
        if self.data.val_count + self.data.test_count > self.data.count {
            return Err(AppError::Config("data.val_count + data.test_count exceeds data.count".into()));
        }
        if self.eval.tile == 0 || self.eval.fap_bins == 0 {
            return Err(AppError::Config("eval.tile and eval.fap_bins must be positive".into()));
        }
        let wrap = |e: canopy_core::Error| AppError::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.loss.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.sampler.validate().map_err(wrap)?;
        self.data.synth.validate().map_err(wrap)?;
        Ok(())
    }

    /// Parses a TOML document with `key.path=value` overrides applied on
    /// top. Values that are not valid TOML literals are taken as strings.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> AppResult<Self> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let resolution = match user.get("resolution") {
            Some(v) => v
                .clone()
                .try_into::<ResolutionOnly>()
                .map(|r| r.0)
                .map_err(|e| AppError::Config(format!("resolution: {e}")))?,
            None => Resolution::M2_5,
        };
        let mut merged = toml::Table::try_from(Self::for_resolution(resolution)).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, or the 2.5 m defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> AppResult<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => AppError::Usage(format!("config file not found: {}", p.display())),
                _ => AppError::io(p, e),
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides).map_err(|e| match (e, path) {
            (AppError::Config(m), Some(p)) => AppError::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// The resolved configuration with a comment above every section.
    pub fn to_template(&self) -> String {
        let mut out = String::from(
            "# canopy-sr run configuration.\n\
             # Every key is optional; omitted keys take the defaults shown here.\n\
             # `resolution` (10, 5 or 2.5 m) selects the model variant and must\n\
             # agree with model.sr.factor (1, 2 or 4) and data.synth.resolution.\n\n",
        );
        for line in self.to_toml_string().lines() {
            if let Some(c) = section_comment(line) {
                out.push_str(c);
                out.push('\n');
            }
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

fn section_comment(line: &str) -> Option<&'static str> {
    Some(match line.trim() {
        "[model.backbone]" => "# Residual dense backbone: n_blocks blocks of layers_per_block dense\n# layers adding `growth` channels each, feat_dim channels between blocks.",
        "[model.attention]" => "# Temporal attention: heads x head_dim must equal model.backbone.feat_dim.\n# tau scales the sinusoidal date encoding.",
        "[model.sr]" => "# Sub-pixel upsampling: factor 1 disables it. Sub-pixel groups start\n# identical plus relative noise init_noise_scale.",
        "[model.head]" => "# Per-pixel MLP widths; the first must equal attention.feat_out.",
        "[loss]" => "# total = height_weight * patch-balanced MAE + wgdl_weight * weighted\n# gradient difference loss. gdl_exponent is \"l1\" or \"l2\".",
        "[train]" => "# Adam with cosine annealing and warm restarts. cycle_len counts optimizer\n# steps; each restart scales the peak by restart_decay. Effective batch is\n# batch_size x accum_steps. patience = 0 disables early stopping.",
        "[sampler]" => "# Temporal sampling (t_min..t_max acquisitions) and training windows:\n# a window x window core plus `margin` pixels of context on every side.",
        "[data]" => "# Synthetic dataset written by `canopy-sr synth`.",
        "[data.synth]" => "# Synthetic scene generator; sizes in 10 m pixels unless noted.",
        "[eval]" => "# Inference tile core side (10 m pixels) and FAP radial bins.",
        _ => return None,
    })
}

#[derive(Deserialize)]
struct ResolutionOnly(#[serde(with = "meters")] Resolution);

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> AppResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(AppError::Usage(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
