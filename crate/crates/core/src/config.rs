//! Hyperparameters. `Default` impls and [`ModelConfig::for_resolution`]
//! carry the published defaults; anything the method leaves open is
//! documented on the field.

use alloc::{format, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of spectral bands kept per acquisition.
pub const SPECTRAL_BANDS: usize = 10;
/// Band names in channel order.
pub const BAND_NAMES: [&str; SPECTRAL_BANDS] = [
    "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12",
];
/// Encoded acquisition-angle channels.
pub const ANGLE_CHANNELS: usize = 6;
/// Spectral bands + cloud mask + angles.
pub const INPUT_CHANNELS: usize = SPECTRAL_BANDS + 1 + ANGLE_CHANNELS;
/// Channel index of the binary cloud mask.
pub const CLOUD_CHANNEL: usize = SPECTRAL_BANDS;

/// Output resolution of a model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    #[serde(rename = "10")]
    M10,
    #[serde(rename = "5")]
    M5,
    #[serde(rename = "2.5")]
    M2_5,
}

impl Resolution {
    pub const ALL: [Resolution; 3] = [Resolution::M10, Resolution::M5, Resolution::M2_5];

    pub fn meters(self) -> f64 {
        match self {
            Resolution::M10 => 10.0,
            Resolution::M5 => 5.0,
            Resolution::M2_5 => 2.5,
        }
    }

    /// Super-resolution factor relative to the 10 m input grid.
    pub fn factor(self) -> usize {
        match self {
            Resolution::M10 => 1,
            Resolution::M5 => 2,
            Resolution::M2_5 => 4,
        }
    }

    pub fn from_meters(m: f64) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| (r.meters() - m).abs() < 1e-9)
            .ok_or_else(|| Error::InvalidConfig(format!("unsupported resolution {m} m (10, 5 or 2.5)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub feat_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: INPUT_CHANNELS,
            n_blocks: 5,
            layers_per_block: 5,
            growth: 24,
            feat_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub feat_out: usize,
    /// Scaling constant of the sinusoidal date encoding.
    pub tau: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            head_dim: 16,
            feat_out: 64,
            tau: 365.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    pub factor: usize,
    pub init_noise_scale: f32,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            init_noise_scale: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Per-pixel MLP widths; the first entry is the input width and must
    /// equal the fused feature size. A final linear layer maps to one height.
    pub mlp_sizes: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mlp_sizes: vec![64, 128, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub sr: SrConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_resolution(Resolution::M2_5)
    }
}

impl ModelConfig {
    /// Published configuration of each resolution variant: the 10 m model
    /// has a smaller backbone and no super-resolution block.
    pub fn for_resolution(res: Resolution) -> Self {
        let (n_blocks, layers_per_block) = match res {
            Resolution::M10 => (4, 4),
            Resolution::M5 | Resolution::M2_5 => (5, 5),
        };
        Self {
            backbone: BackboneConfig {
                n_blocks,
                layers_per_block,
                ..BackboneConfig::default()
            },
            attention: AttentionConfig::default(),
            sr: SrConfig {
                factor: res.factor(),
                ..SrConfig::default()
            },
            head: HeadConfig::default(),
        }
    }

    /// Date-encoding width; equals the backbone feature size so encodings
    /// can be added to features.
    pub fn encoding_dim(&self) -> usize {
        self.backbone.feat_dim
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let a = &self.attention;
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if b.in_channels == 0 || b.n_blocks == 0 || b.layers_per_block == 0 || b.growth == 0 || b.feat_dim == 0 {
            return bad(format!("backbone sizes must be positive: {b:?}"));
        }
        if a.heads == 0 || a.head_dim == 0 || a.feat_out == 0 {
            return bad(format!("attention sizes must be positive: {a:?}"));
        }
        if a.heads * a.head_dim != b.feat_dim {
            return bad(format!(
                "heads ({}) x head_dim ({}) must equal feat_dim ({})",
                a.heads, a.head_dim, b.feat_dim
            ));
        }
        if b.feat_dim % 2 != 0 {
            return bad(format!("feat_dim {} must be even for the date encoding", b.feat_dim));
        }
        if !(a.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", a.tau));
        }
        let r = self.sr.factor;
        if r == 0 || !r.is_power_of_two() {
            return bad(format!("super-resolution factor {r} must be a power of two"));
        }
        if !(self.sr.init_noise_scale >= 0.0) {
            return bad("init_noise_scale must be non-negative".into());
        }
        match self.head.mlp_sizes.first() {
            Some(&first) if first == a.feat_out => {}
            _ => {
                return bad(format!(
                    "head mlp_sizes must start with feat_out ({})",
                    a.feat_out
                ))
            }
        }
        if self.head.mlp_sizes.iter().any(|&n| n == 0) {
            return bad("head widths must be positive".into());
        }
        Ok(())
    }

    /// Radius, in input pixels, of the region that influences one output
    /// pixel. Tiled inference needs at least this much context per side.
    pub fn receptive_radius(&self) -> usize {
        let b = &self.backbone;
        // two shallow 3x3 convs, one 3x3 per dense layer, the 3x3 after fusion
        let mut fine_steps = 0.0f64;
        let coarse = 2 + b.n_blocks * b.layers_per_block + 1;
        let r = self.sr.factor;
        if r > 1 {
            // first sub-pixel conv runs on the input grid
            fine_steps += 1.0;
            let mut scale = 1.0;
            let mut upsampled = 2;
            while upsampled < r {
                scale *= 0.5;
                fine_steps += scale;
                upsampled *= 2;
            }
            // final 3x3 at the output grid
            fine_steps += 1.0 / r as f64;
        }
        coarse + libm::ceil(fine_steps) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GdlExponent {
    L1,
    L2,
}

impl GdlExponent {
    pub fn power(self) -> u32 {
        match self {
            GdlExponent::L1 => 1,
            GdlExponent::L2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub height_weight: f64,
    pub wgdl_weight: f64,
    /// Floor of the gradient weights; not given by the method, 0.1 chosen.
    pub lambda_min: f64,
    pub gdl_exponent: GdlExponent,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            height_weight: 1.0,
            wgdl_weight: 1.0,
            lambda_min: 0.1,
            gdl_exponent: GdlExponent::L2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.height_weight >= 0.0 && self.wgdl_weight >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.height_weight == 0.0 && self.wgdl_weight == 0.0 {
            return Err(Error::InvalidConfig("loss weights cannot both be zero".into()));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_min must lie in (0, 1], got {}",
                self.lambda_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    EqualRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub t_max: usize,
    pub t_min: usize,
    /// Core window side in input pixels.
    pub window: usize,
    /// Border, in input pixels, run through the network and cropped away.
    pub margin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t_max: 12,
            t_min: 5,
            window: 64,
            margin: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::InvalidConfig(format!(
                "need 0 < t_min <= t_max, got {} / {}",
                self.t_min, self.t_max
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be positive".into()));
        }
        Ok(())
    }

    pub fn input_side(&self) -> usize {
        self.window + 2 * self.margin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    /// Peak learning-rate multiplier applied at every restart.
    pub restart_decay: f64,
    /// First cycle length in optimizer steps.
    pub cycle_len: u64,
    pub cycle_mult: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    /// Early stopping patience in validation rounds; 0 disables it.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 0.0,
            restart_decay: 0.25,
            cycle_len: 1000,
            cycle_mult: 1.0,
            batch_size: 32,
            accum_steps: 4,
            max_steps: 10_000,
            checkpoint_every: 500,
            validate_every: 250,
            patience: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum_steps == 0 || self.cycle_len == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, accum_steps and cycle_len must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= lr_min <= lr and lr > 0, got {} / {}",
                self.lr_min, self.lr
            )));
        }
        if !(self.restart_decay > 0.0 && self.cycle_mult >= 1.0) {
            return Err(Error::InvalidConfig(
                "restart_decay must be positive and cycle_mult >= 1".into(),
            ));
        }
        Ok(())
    }
}
