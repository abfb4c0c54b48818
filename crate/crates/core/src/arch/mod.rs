//! Architecture intermediate representation.
//!
//! A backbone is a stem (a flat list of layers) followed by stages. Each
//! stage repeats one block template; the first repeat may carry an extra
//! stride on its designated stride layer.

mod builtin;
mod config;
mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use builtin::{builtin, BUILTIN_NAMES};
pub use config::{parse_arch, serialize_arch};
pub use validate::{validate, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    #[serde(rename = "maxpool")]
    MaxPool,
}

/// One convolution or pooling layer.
///
/// `out_channels`, `has_norm` and `has_bias` are only meaningful for
/// convolutions; [`validate`] reports a pooling layer that sets them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_h: u32,
    pub kernel_w: u32,
    pub out_channels: Option<u32>,
    pub stride: u32,
    pub padding: u32,
    pub has_norm: bool,
    pub has_bias: bool,
}

impl LayerSpec {
    /// Square convolution with `floor(k/2)` padding, followed by a norm layer and no bias.
    pub fn conv(kernel: u32, out_channels: u32, stride: u32) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel_h: kernel,
            kernel_w: kernel,
            out_channels: Some(out_channels),
            stride,
            padding: kernel / 2,
            has_norm: true,
            has_bias: false,
        }
    }

    /// Square max pooling with `floor(k/2)` padding.
    pub fn max_pool(kernel: u32, stride: u32) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool,
            kernel_h: kernel,
            kernel_w: kernel,
            out_channels: None,
            stride,
            padding: kernel / 2,
            has_norm: false,
            has_bias: false,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.kind == LayerKind::Conv
    }

    pub fn with_stride(mut self, stride: u32) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shortcut {
    None,
    Identity,
    Projection,
}

/// A residual (or plain) block template.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub layers: Vec<LayerSpec>,
    pub shortcut: Shortcut,
}

impl BlockSpec {
    /// 1x1 reduce, 3x3, 1x1 expand.
    pub fn bottleneck(width: u32, expansion: u32, shortcut: Shortcut) -> Self {
        BlockSpec {
            layers: vec![
                LayerSpec::conv(1, width, 1),
                LayerSpec::conv(3, width, 1),
                LayerSpec::conv(1, width * expansion, 1),
            ],
            shortcut,
        }
    }

    /// Two 3x3 convolutions.
    pub fn basic(width: u32, shortcut: Shortcut) -> Self {
        BlockSpec {
            layers: vec![LayerSpec::conv(3, width, 1), LayerSpec::conv(3, width, 1)],
            shortcut,
        }
    }

    /// Index of the layer that receives the first-block stride: the first
    /// layer with a spatial kernel, or the first layer if all are pointwise.
    pub fn stride_layer(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kernel_h > 1 || l.kernel_w > 1)
            .unwrap_or(0)
    }

    /// Output channels given the block's input channels.
    pub fn out_channels(&self, in_channels: u32) -> u32 {
        self.layers.iter().fold(in_channels, |c, l| {
            l.out_channels.filter(|_| l.is_conv()).unwrap_or(c)
        })
    }

    /// Layers of repeat `index` with the stage's first-block stride applied.
    pub fn instantiate(&self, index: u32, first_block_stride: u32) -> Vec<LayerSpec> {
        let mut layers = self.layers.clone();
        if index == 0 && !layers.is_empty() {
            let at = self.stride_layer();
            layers[at].stride *= first_block_stride;
        }
        layers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StageSpec {
    pub name: String,
    pub block: BlockSpec,
    pub repeats: u32,
    pub first_block_stride: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: u32,
    pub stem: Vec<LayerSpec>,
    pub stages: Vec<StageSpec>,
}

impl ArchSpec {
    pub fn repeats(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.repeats).collect()
    }

    /// Copy of this architecture with per-stage repeat counts replaced.
    ///
    /// # Panics
    ///
    /// Panics if `repeats.len()` differs from the number of stages.
    pub fn with_repeats(&self, repeats: &[u32]) -> ArchSpec {
        assert_eq!(
            repeats.len(),
            self.stages.len(),
            "one repeat count per stage"
        );
        let mut arch = self.clone();
        for (stage, &r) in arch.stages.iter_mut().zip(repeats) {
            stage.repeats = r;
        }
        arch
    }
}

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid architecture: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown builtin architecture `{0}` (known: {known})", known = BUILTIN_NAMES.join(", "))]
    UnknownBuiltin(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
