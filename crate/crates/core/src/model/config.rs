use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    DeskSmall,
    ExternalPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub input_side: usize,
}

impl BackboneConfig {
    pub fn desk_small() -> Self {
        BackboneConfig {
            kind: BackboneKind::DeskSmall,
            channels: 64,
            height: 8,
            width: 8,
            input_side: 64,
        }
    }

    /// Shape contract of the full-scale residual backbone.
    pub fn full_scale() -> Self {
        BackboneConfig {
            kind: BackboneKind::ExternalPretrained,
            channels: 2048,
            height: 7,
            width: 7,
            input_side: 224,
        }
    }

    /// Output widths of the four desk blocks: c/4, c/2, 3c/4, c.
    pub fn desk_widths(&self) -> [usize; 4] {
        let c = self.channels;
        [(c / 4).max(1), (c / 2).max(1), (3 * c / 4).max(1), c]
    }

    /// Strides of the four desk blocks. Three halvings take the input side to
    /// side/8; the last block keeps resolution.
    pub fn desk_strides(&self) -> [usize; 4] {
        [2, 2, 2, 1]
    }

    pub fn validate(&self, reduction: usize) -> Result<()> {
        if self.channels < reduction.max(1) {
            return Err(Error::Config(format!(
                "backbone channels {} below reduction ratio {reduction}",
                self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("feature map must be at least 1×1".into()));
        }
        if self.kind == BackboneKind::DeskSmall {
            let mut side = self.input_side;
            for s in self.desk_strides() {
                side = side.div_ceil(s);
            }
            if side != self.height || side != self.width {
                return Err(Error::Config(format!(
                    "desk backbone maps a {0}×{0} input to {side}×{side}, config says {1}×{2}",
                    self.input_side, self.height, self.width
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub reduction: usize,
    #[serde(default)]
    pub mlp_bias: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            reduction: 8,
            mlp_bias: false,
        }
    }
}

impl AttentionConfig {
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk_small(),
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention.reduction == 0 {
            return Err(Error::Config("reduction ratio must be at least 1".into()));
        }
        if self.attention.mlp_bias {
            return Err(Error::Config("channel-attention MLP is bias-free".into()));
        }
        self.backbone.validate(self.attention.reduction)
    }

    pub fn channels(&self) -> usize {
        self.backbone.channels
    }

    pub fn hidden(&self) -> usize {
        self.attention.hidden(self.backbone.channels)
    }
}
