//! The six reference backbones: ResNet50, the deepest branch of HRNet32 and
//! HRNet18, and their bottom-heavy counterparts.

use super::{ArchError, ArchSpec, BlockSpec, LayerSpec, Shortcut, StageSpec};

pub const BUILTIN_NAMES: [&str; 6] = [
    "resnet50",
    "bh-resnet50",
    "hrnet32-deep",
    "bh-hrnet32-deep",
    "hrnet18-deep",
    "bh-hrnet18-deep",
];

pub fn builtin(name: &str) -> Result<ArchSpec, ArchError> {
    let arch = match name {
        "resnet50" => resnet(
            name,
            vec![LayerSpec::conv(7, 64, 2), LayerSpec::max_pool(3, 2)],
            [3, 4, 6, 3],
            [1, 2, 2, 2],
        ),
        "bh-resnet50" => resnet(
            name,
            vec![LayerSpec::conv(3, 64, 1), LayerSpec::max_pool(3, 2)],
            [7, 6, 2, 1],
            [2, 2, 2, 2],
        ),
        "hrnet32-deep" => hrnet(name, hrnet_stem(), [64, 64, 128, 256], [4, 4, 16, 12]),
        "bh-hrnet32-deep" => hrnet(name, bh_hrnet_stem(), [64, 64, 128, 256], [4, 4, 8, 3]),
        "hrnet18-deep" => hrnet(name, hrnet_stem(), [36, 64, 72, 144], [4, 4, 16, 12]),
        "bh-hrnet18-deep" => hrnet(name, bh_hrnet_stem(), [36, 36, 72, 144], [4, 4, 12, 6]),
        _ => return Err(ArchError::UnknownBuiltin(name.to_string())),
    };
    Ok(arch)
}

fn shortcut_for(in_channels: u32, out_channels: u32, stride: u32) -> Shortcut {
    if in_channels != out_channels || stride > 1 {
        Shortcut::Projection
    } else {
        Shortcut::Identity
    }
}

fn resnet(name: &str, stem: Vec<LayerSpec>, repeats: [u32; 4], strides: [u32; 4]) -> ArchSpec {
    let mut channels = 64;
    let stages = (0..4)
        .map(|i| {
            let width = 64 << i;
            let out = width * 4;
            let shortcut = shortcut_for(channels, out, strides[i]);
            channels = out;
            StageSpec {
                name: format!("stage{}", i + 1),
                block: BlockSpec::bottleneck(width, 4, shortcut),
                repeats: repeats[i],
                first_block_stride: strides[i],
            }
        })
        .collect();
    ArchSpec {
        name: name.to_string(),
        in_channels: 3,
        stem,
        stages,
    }
}

fn hrnet_stem() -> Vec<LayerSpec> {
    vec![LayerSpec::conv(3, 64, 2), LayerSpec::conv(3, 64, 2)]
}

fn bh_hrnet_stem() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(3, 64, 1),
        LayerSpec::conv(3, 64, 2),
        LayerSpec::max_pool(3, 2),
    ]
}

// Only the deepest branch is modelled; no stage carries a printed stride.
fn hrnet(name: &str, stem: Vec<LayerSpec>, widths: [u32; 4], repeats: [u32; 4]) -> ArchSpec {
    let mut channels = 64;
    let stages = (0..4)
        .map(|i| {
            let shortcut = shortcut_for(channels, widths[i], 1);
            channels = widths[i];
            StageSpec {
                name: format!("stage{}", i + 1),
                block: BlockSpec::basic(widths[i], shortcut),
                repeats: repeats[i],
                first_block_stride: 1,
            }
        })
        .collect();
    ArchSpec {
        name: name.to_string(),
        in_channels: 3,
        stem,
        stages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LayerKind;

    #[test]
    fn bh_resnet50_repeats() {
        assert_eq!(builtin("bh-resnet50").unwrap().repeats(), vec![7, 6, 2, 1]);
    }

    #[test]
    fn resnet50_stem() {
        let arch = builtin("resnet50").unwrap();
        let first = &arch.stem[0];
        assert_eq!((first.kernel_h, first.kernel_w), (7, 7));
        assert_eq!(first.out_channels, Some(64));
        assert_eq!(first.stride, 2);
        assert_eq!(arch.stem[1].kind, LayerKind::MaxPool);
        assert_eq!(
            arch.stages
                .iter()
                .map(|s| s.first_block_stride)
                .collect::<Vec<_>>(),
            [1, 2, 2, 2]
        );
    }

    #[test]
    fn bh_hrnet18_last_stage() {
        let stage = &builtin("bh-hrnet18-deep").unwrap().stages[3];
        assert_eq!(stage.repeats, 6);
        assert_eq!(stage.block.layers.len(), 2);
        for layer in &stage.block.layers {
            assert_eq!(
                (layer.kernel_h, layer.kernel_w, layer.out_channels),
                (3, 3, Some(144))
            );
        }
    }

    #[test]
    fn hrnet_widths_and_repeats() {
        let h18 = builtin("hrnet18-deep").unwrap();
        let widths: Vec<_> = h18
            .stages
            .iter()
            .map(|s| s.block.layers[0].out_channels.unwrap())
            .collect();
        assert_eq!(widths, [36, 64, 72, 144]);
        assert_eq!(h18.repeats(), [4, 4, 16, 12]);
        assert_eq!(builtin("bh-hrnet32-deep").unwrap().repeats(), [4, 4, 8, 3]);
        let bh18 = builtin("bh-hrnet18-deep").unwrap();
        assert_eq!(bh18.stages[1].block.layers[0].out_channels, Some(36));
        assert_eq!(bh18.stages[1].block.shortcut, Shortcut::Identity);
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(
            builtin("vgg16"),
            Err(ArchError::UnknownBuiltin(_))
        ));
    }
}
