use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{ArchSpec, LayerKind, LayerSpec, Shortcut};

/// A broken invariant, located by a field path such as `stages[1].repeats`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every structural invariant. An empty list means the architecture is valid.
pub fn validate(arch: &ArchSpec) -> Vec<Violation> {
    let mut out = Vec::new();

    if arch.in_channels == 0 {
        out.push(Violation::new("in_channels", "must be at least 1"));
    }
    for (i, layer) in arch.stem.iter().enumerate() {
        check_layer(layer, &format!("stem[{i}]"), &mut out);
    }
    if arch.stages.is_empty() {
        out.push(Violation::new("stages", "at least one stage is required"));
    }

    let mut names = HashSet::new();
    for (s, stage) in arch.stages.iter().enumerate() {
        let path = format!("stages[{s}]");
        if stage.name.is_empty() {
            out.push(Violation::new(format!("{path}.name"), "must not be empty"));
        } else if stage.name == "stem" || !names.insert(stage.name.as_str()) {
            out.push(Violation::new(
                format!("{path}.name"),
                format!("stage name `{}` is reserved or duplicated", stage.name),
            ));
        }
        if stage.repeats == 0 {
            out.push(Violation::new(
                format!("{path}.repeats"),
                "must be at least 1",
            ));
        }
        if stage.first_block_stride == 0 {
            out.push(Violation::new(
                format!("{path}.first_block_stride"),
                "must be at least 1",
            ));
        }
        if stage.block.layers.is_empty() {
            out.push(Violation::new(
                format!("{path}.block.layers"),
                "a block needs at least one layer",
            ));
        }
        for (l, layer) in stage.block.layers.iter().enumerate() {
            check_layer(layer, &format!("{path}.block.layers[{l}]"), &mut out);
        }
    }

    // Everything below walks the main path and needs sane strides.
    if !out.is_empty() {
        return out;
    }

    let mut channels = arch.in_channels;
    let mut total: u64 = 1;
    for layer in &arch.stem {
        total *= u64::from(layer.stride);
        if let Some(c) = layer.out_channels {
            channels = c;
        }
    }
    for (s, stage) in arch.stages.iter().enumerate() {
        let block = &stage.block;
        let out_channels = block.out_channels(channels);
        for index in 0..stage.repeats {
            let layers = block.instantiate(index, stage.first_block_stride);
            let stride: u64 = layers.iter().map(|l| u64::from(l.stride)).product();
            let in_channels = if index == 0 { channels } else { out_channels };
            if block.shortcut == Shortcut::Identity && (in_channels != out_channels || stride != 1)
            {
                out.push(Violation::new(
                    format!("stages[{s}].block.shortcut"),
                    format!(
                        "identity shortcut on repeat {index} changes shape \
                         ({in_channels} -> {out_channels} channels, stride {stride}); use projection"
                    ),
                ));
                break;
            }
            total = total.saturating_mul(stride);
        }
        channels = out_channels;
    }
    if !total.is_power_of_two() {
        out.push(Violation::new(
            "stages",
            format!("total stride {total} is not a power of two"),
        ));
    }
    out
}

fn check_layer(layer: &LayerSpec, path: &str, out: &mut Vec<Violation>) {
    if layer.kernel_h == 0 || layer.kernel_w == 0 {
        out.push(Violation::new(
            format!("{path}.kernel"),
            "kernel dims must be at least 1",
        ));
    }
    if layer.stride == 0 {
        out.push(Violation::new(
            format!("{path}.stride"),
            "must be at least 1",
        ));
    }
    match layer.kind {
        LayerKind::Conv => match layer.out_channels {
            None => out.push(Violation::new(
                format!("{path}.out_channels"),
                "conv layers need out_channels",
            )),
            Some(0) => out.push(Violation::new(
                format!("{path}.out_channels"),
                "must be at least 1",
            )),
            Some(_) => {}
        },
        LayerKind::MaxPool => {
            if layer.out_channels.is_some() {
                out.push(Violation::new(
                    format!("{path}.out_channels"),
                    "maxpool layers carry no out_channels",
                ));
            }
            if layer.has_norm {
                out.push(Violation::new(
                    format!("{path}.has_norm"),
                    "maxpool layers carry no norm",
                ));
            }
            if layer.has_bias {
                out.push(Violation::new(
                    format!("{path}.has_bias"),
                    "maxpool layers carry no bias",
                ));
            }
        }
    }
}
