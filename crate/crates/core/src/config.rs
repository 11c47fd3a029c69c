//! Encoder configuration and the named ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloud::{Aabb, CropConfig, CropMode};
use crate::error::{Error, Result};
use crate::nn::WeightInit;
use crate::sampling::FpsMetric;

/// Tight workspace box of the synthetic table scenes (base frame, meters).
pub const DEFAULT_WORKSPACE: Aabb = Aabb {
    min: [-0.5, -0.5, -0.02],
    max: [0.5, 0.5, 0.6],
};

/// What fills the per-point feature block of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointFeatures {
    Backbone,
    Rgb,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Attention,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Backbone feature channels `d` (also the language embedding width).
    pub feature_dim: usize,
    /// Output width `d_e` of the value network and of `z`.
    pub embed_dim: usize,
    /// Key/query width `d_k`.
    pub key_dim: usize,
    /// Points kept by farthest-point sampling.
    pub num_points: usize,
    /// Fourier frequencies per coordinate.
    pub pe_frequencies: usize,
    pub crop: CropConfig,
    pub ee_frame: bool,
    pub point_features: PointFeatures,
    pub language: bool,
    pub positional_encoding: bool,
    pub fps_metric: FpsMetric,
    pub fps_random_start: bool,
    pub pooling: Pooling,
    pub proprioception: bool,
    pub finetune_backbone: bool,
    pub init: WeightInit,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            embed_dim: 256,
            key_dim: 256,
            num_points: 512,
            pe_frequencies: 10,
            crop: CropConfig::preset(CropMode::Tight, DEFAULT_WORKSPACE),
            ee_frame: true,
            point_features: PointFeatures::Backbone,
            language: true,
            positional_encoding: true,
            fps_metric: FpsMetric::Feature,
            fps_random_start: false,
            pooling: Pooling::Attention,
            proprioception: true,
            finetune_backbone: false,
            init: WeightInit::Orthogonal,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Reduced widths for desk-scale training experiments.
    pub fn toy() -> Self {
        Self {
            feature_dim: 16,
            embed_dim: 64,
            key_dim: 64,
            num_points: 64,
            ..Self::default()
        }
    }

    pub fn token_layout(&self) -> TokenLayout {
        TokenLayout {
            position: if self.positional_encoding {
                6 * self.pe_frequencies
            } else {
                3
            },
            features: match self.point_features {
                PointFeatures::Backbone => self.feature_dim,
                PointFeatures::Rgb => 3,
                PointFeatures::None => 0,
            },
            language: if self.language { self.feature_dim } else { 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("key_dim", self.key_dim),
            ("num_points", self.num_points),
            ("pe_frequencies", self.pe_frequencies),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be at least 1")));
            }
        }
        self.crop.validate()
    }

    /// Metric actually used by sampling; with no per-point features the
    /// sampler falls back to positions.
    pub fn effective_fps_metric(&self) -> FpsMetric {
        match self.point_features {
            PointFeatures::None => FpsMetric::Position,
            _ => self.fps_metric,
        }
    }
}

/// Column blocks of a token row: `[position | features | language]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub position: usize,
    pub features: usize,
    pub language: usize,
}

impl TokenLayout {
    pub fn width(&self) -> usize {
        self.position + self.features + self.language
    }

    pub fn language_range(&self) -> std::ops::Range<usize> {
        let start = self.position + self.features;
        start..start + self.language
    }

    pub fn feature_range(&self) -> std::ops::Range<usize> {
        self.position..self.position + self.features
    }
}

/// The ablation rows plus the full configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoEecf,
    NoEeCrop,
    NoImageFeatures,
    RgbCloud,
    NoLang,
    NoPe,
    PositionFps,
    NoAttention,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoEecf,
        Variant::NoEeCrop,
        Variant::NoImageFeatures,
        Variant::RgbCloud,
        Variant::NoLang,
        Variant::NoPe,
        Variant::PositionFps,
        Variant::NoAttention,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEecf => "no-eecf",
            Variant::NoEeCrop => "no-ee-crop",
            Variant::NoImageFeatures => "no-image-features",
            Variant::RgbCloud => "rgb-cloud",
            Variant::NoLang => "no-lang",
            Variant::NoPe => "no-pe",
            Variant::PositionFps => "position-fps",
            Variant::NoAttention => "no-attention",
        }
    }

    pub fn apply(&self, base: &EncoderConfig) -> EncoderConfig {
        let mut cfg = *base;
        match self {
            Variant::Full => {}
            Variant::NoEecf => cfg.ee_frame = false,
            Variant::NoEeCrop => cfg.crop.ee_zmin = None,
            Variant::NoImageFeatures => cfg.point_features = PointFeatures::None,
            Variant::RgbCloud => cfg.point_features = PointFeatures::Rgb,
            Variant::NoLang => cfg.language = false,
            Variant::NoPe => cfg.positional_encoding = false,
            Variant::PositionFps => cfg.fps_metric = FpsMetric::Position,
            Variant::NoAttention => cfg.pooling = Pooling::Max,
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "variant",
                name: s.to_string(),
            })
    }
}
