//! The regression network: a VGG-style convolutional backbone, batch
//! normalization of its feature map, an attention gate whose pooled output is
//! rescaled by the pooled gate, two auxiliary neurons (age, gender) and a dense
//! head producing the normalized right and left angles.

mod bundle;
mod network;
mod pretrained;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{ModelBundle, BUNDLE_FORMAT_VERSION};
pub use network::{Network, TrainPass};
pub use pretrained::{load_pretrained_backbone, torchvision_vgg_key};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input side {side} is not divisible by {reduction} (backbone has {blocks} pooling stages)")]
    SideNotDivisible {
        side: usize,
        reduction: usize,
        blocks: usize,
    },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input {sample}: expected image shape {expected:?}, got {got:?}")]
    InputShape {
        sample: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("input {sample}: non-finite value in {what}")]
    NonFiniteInput { sample: usize, what: &'static str },
    #[error("input {sample}: auxiliary {what} = {value} outside [0, 1]")]
    AuxOutOfRange {
        sample: usize,
        what: &'static str,
        value: f64,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("forward pass produced a non-finite output")]
    NonFiniteOutput,
    #[error("bundle integrity: {0}")]
    Integrity(String),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt bundle file: {0}")]
    Corrupt(String),
    #[error("pretrained weights: {0}")]
    Pretrained(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One VGG block: `convs` 3×3 ReLU convolutions of `width` channels, then a 2×2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub convs: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    #[default]
    Random,
    /// A safetensors file; see [`load_pretrained_backbone`] for accepted names.
    Pretrained(PathBuf),
}

/// Per-channel affine applied to the tripled input before the backbone,
/// for backbones trained on color statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const IMAGENET: ChannelStats = ChannelStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub blocks: Vec<ConvBlock>,
    pub weights: WeightInit,
    pub trainable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_normalization: Option<ChannelStats>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::vgg16()
    }
}

impl BackboneSpec {
    /// The 13-convolution, 5-pool feature stack of VGG16.
    pub fn vgg16() -> Self {
        let blocks = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]
            .into_iter()
            .map(|(convs, width)| ConvBlock { convs, width })
            .collect();
        Self {
            blocks,
            weights: WeightInit::Random,
            trainable: true,
            input_normalization: None,
        }
    }

    pub fn custom(blocks: &[(usize, usize)]) -> Self {
        Self {
            blocks: blocks.iter().map(|&(convs, width)| ConvBlock { convs, width }).collect(),
            ..Self::vgg16()
        }
    }

    /// Keeps the first `n` blocks.
    pub fn truncated(mut self, n: usize) -> Self {
        self.blocks.truncate(n);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.width)
    }

    /// Total spatial downsampling factor.
    pub fn reduction(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn feature_side(&self, side: usize) -> usize {
        side / self.reduction()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionHeadSpec {
    /// Widths of the ReLU 1×1 convolutions before the single-channel sigmoid gate.
    pub attn_widths: Vec<usize>,
    pub dense_width: usize,
    pub dropout: f64,
    /// Weight of the previous running statistic in the batch-norm update.
    pub bn_momentum: f64,
}

impl Default for AttentionHeadSpec {
    fn default() -> Self {
        Self {
            attn_widths: vec![64, 16],
            dense_width: 1024,
            dropout: 0.5,
            bn_momentum: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_side: usize,
    pub backbone: BackboneSpec,
    pub head: AttentionHeadSpec,
    /// Seed for random parameter initialization.
    pub init_seed: u64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let arch = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.backbone.blocks.is_empty() {
            return arch("backbone needs at least one block");
        }
        if self.backbone.blocks.iter().any(|b| b.convs == 0 || b.width == 0) {
            return arch("every backbone block needs at least one conv of positive width");
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(self.backbone.reduction()) {
            return Err(ModelError::SideNotDivisible {
                side: self.input_side,
                reduction: self.backbone.reduction(),
                blocks: self.backbone.blocks.len(),
            });
        }
        if self.head.attn_widths.contains(&0) || self.head.dense_width == 0 {
            return arch("attention and dense widths must be positive");
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return arch("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.head.bn_momentum) {
            return arch("bn_momentum must lie in [0, 1)");
        }
        Ok(())
    }

    /// `(channels, height, width)` of the backbone output.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let s = self.backbone.feature_side(self.input_side);
        (self.backbone.out_channels(), s, s)
    }
}

/// Builds a network with freshly initialized (or pretrained) weights.
pub fn build(spec: NetworkSpec) -> Result<Network, ModelError> {
    let mut net = Network::new(spec)?;
    if let WeightInit::Pretrained(path) = &net.spec().backbone.weights {
        let path = path.clone();
        load_pretrained_backbone(&mut net, &path)?;
    }
    Ok(net)
}
