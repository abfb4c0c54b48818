//! TOML config format for [`ArchSpec`].
//!
//! ```toml
//! name = "tiny"
//! in_channels = 3          # optional, default 3
//!
//! [[stem]]
//! kind = "conv"            # "conv" | "maxpool"
//! kernel_h = 3
//! kernel_w = 3
//! out_channels = 16        # conv only
//! stride = 2               # optional, default 1
//! padding = 1              # optional, default floor(min(kernel_h, kernel_w) / 2)
//! has_norm = true          # conv only, optional, default true
//! has_bias = false         # conv only, optional, default false
//!
//! [[stages]]
//! name = "stage1"
//! repeats = 2
//! first_block_stride = 2   # optional, default 1
//!
//! [stages.block]
//! shortcut = "projection"  # "none" | "identity" | "projection"
//!
//! [[stages.block.layers]]
//! kind = "conv"
//! kernel_h = 3
//! kernel_w = 3
//! out_channels = 16
//! ```
//!
//! Unknown keys are rejected. [`serialize_arch`] writes every field
//! explicitly in the order above, so serializing a parsed document and
//! parsing it again is byte-stable.

use serde::{Deserialize, Serialize};

use super::{validate, ArchError, ArchSpec, BlockSpec, LayerKind, LayerSpec, Shortcut, StageSpec};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchDoc {
    name: String,
    #[serde(default = "default_in_channels")]
    in_channels: u32,
    #[serde(default)]
    stem: Vec<LayerDoc>,
    stages: Vec<StageDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    name: String,
    repeats: u32,
    #[serde(default = "one")]
    first_block_stride: u32,
    block: BlockDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    shortcut: Shortcut,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    kind: LayerKind,
    kernel_h: u32,
    kernel_w: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<u32>,
    #[serde(default = "one")]
    stride: u32,
    #[serde(default)]
    padding: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    has_norm: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    has_bias: Option<bool>,
}

fn default_in_channels() -> u32 {
    3
}

fn one() -> u32 {
    1
}

impl From<LayerDoc> for LayerSpec {
    fn from(doc: LayerDoc) -> Self {
        let is_conv = doc.kind == LayerKind::Conv;
        LayerSpec {
            kind: doc.kind,
            kernel_h: doc.kernel_h,
            kernel_w: doc.kernel_w,
            out_channels: doc.out_channels,
            stride: doc.stride,
            padding: doc.padding.unwrap_or(doc.kernel_h.min(doc.kernel_w) / 2),
            has_norm: doc.has_norm.unwrap_or(is_conv),
            has_bias: doc.has_bias.unwrap_or(false),
        }
    }
}

impl From<&LayerSpec> for LayerDoc {
    fn from(layer: &LayerSpec) -> Self {
        let conv = layer.is_conv();
        LayerDoc {
            kind: layer.kind,
            kernel_h: layer.kernel_h,
            kernel_w: layer.kernel_w,
            out_channels: layer.out_channels,
            stride: layer.stride,
            padding: Some(layer.padding),
            has_norm: (conv || layer.has_norm).then_some(layer.has_norm),
            has_bias: (conv || layer.has_bias).then_some(layer.has_bias),
        }
    }
}

/// Parses and validates an architecture document.
pub fn parse_arch(text: &str) -> Result<ArchSpec, ArchError> {
    let doc: ArchDoc = toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((1, 1));
        ArchError::Syntax {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;

    let arch = ArchSpec {
        name: doc.name,
        in_channels: doc.in_channels,
        stem: doc.stem.into_iter().map(LayerSpec::from).collect(),
        stages: doc
            .stages
            .into_iter()
            .map(|s| StageSpec {
                name: s.name,
                repeats: s.repeats,
                first_block_stride: s.first_block_stride,
                block: BlockSpec {
                    shortcut: s.block.shortcut,
                    layers: s.block.layers.into_iter().map(LayerSpec::from).collect(),
                },
            })
            .collect(),
    };

    let violations = validate(&arch);
    if violations.is_empty() {
        Ok(arch)
    } else {
        Err(ArchError::Invalid(violations))
    }
}

/// Writes the canonical document for `arch`.
pub fn serialize_arch(arch: &ArchSpec) -> Result<String, ArchError> {
    let doc = ArchDoc {
        name: arch.name.clone(),
        in_channels: arch.in_channels,
        stem: arch.stem.iter().map(LayerDoc::from).collect(),
        stages: arch
            .stages
            .iter()
            .map(|s| StageDoc {
                name: s.name.clone(),
                repeats: s.repeats,
                first_block_stride: s.first_block_stride,
                block: BlockDoc {
                    shortcut: s.block.shortcut,
                    layers: s.block.layers.iter().map(LayerDoc::from).collect(),
                },
            })
            .collect(),
    };
    toml::to_string(&doc).map_err(|e| ArchError::Serialize(e.to_string()))
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}
