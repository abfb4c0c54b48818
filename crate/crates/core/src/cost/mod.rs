//! Shape propagation and analytic cost accounting.
//!
//! One multiply-accumulate counts as one FLOP. Only convolutions cost
//! anything: pooling, normalization, activations and residual additions are
//! free. Parameters are conv weights plus optional bias plus two per output
//! channel for a following norm layer. All counts are exact integers.

mod export;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchSpec, LayerKind, LayerSpec, Shortcut};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl TensorShape {
    pub const fn new(channels: u32, height: u32, width: u32) -> Self {
        TensorShape {
            channels,
            height,
            width,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.height) * u64::from(self.width)
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for TensorShape {
    type Err = String;

    /// Parses `CxHxW`, e.g. `3x640x512`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let dims: Vec<u32> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad shape `{s}`: {e}"))?;
        match dims[..] {
            [c, h, w] if c >= 1 && h >= 1 && w >= 1 => Ok(TensorShape::new(c, h, w)),
            [_, _, _] => Err(format!(
                "bad shape `{s}`: every dimension must be at least 1"
            )),
            _ => Err(format!("bad shape `{s}`: expected CxHxW")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("layer {layer}: output would be empty for input {input} (kernel {kernel_h}x{kernel_w}, stride {stride}, padding {padding})")]
    Degenerate {
        layer: String,
        input: TensorShape,
        kernel_h: u32,
        kernel_w: u32,
        stride: u32,
        padding: u32,
    },
    #[error("invalid input shape {0}")]
    InvalidInput(TensorShape),
    #[error("{layer}: residual branch shape {main} does not match shortcut shape {shortcut}")]
    ShortcutMismatch {
        layer: String,
        main: TensorShape,
        shortcut: TensorShape,
    },
}

fn out_dim(input: u32, kernel: u32, stride: u32, padding: u32) -> Option<u32> {
    let span = i64::from(input) + 2 * i64::from(padding) - i64::from(kernel);
    if span < 0 || stride == 0 {
        return None;
    }
    Some((span / i64::from(stride) + 1) as u32)
}

/// Output shape of one layer, or `None` when a spatial dim would drop below 1.
fn try_propagate(layer: &LayerSpec, input: TensorShape) -> Option<TensorShape> {
    let height = out_dim(input.height, layer.kernel_h, layer.stride, layer.padding)?;
    let width = out_dim(input.width, layer.kernel_w, layer.stride, layer.padding)?;
    let channels = match layer.kind {
        LayerKind::Conv => layer.out_channels.unwrap_or(input.channels),
        LayerKind::MaxPool => input.channels,
    };
    Some(TensorShape::new(channels, height, width))
}

/// `out = floor((in + 2*pad - k) / stride) + 1` per spatial axis.
pub fn propagate_shape(layer: &LayerSpec, input: TensorShape) -> Result<TensorShape, CostError> {
    try_propagate(layer, input).ok_or_else(|| degenerate("layer".to_string(), layer, input))
}

fn degenerate(name: String, layer: &LayerSpec, input: TensorShape) -> CostError {
    CostError::Degenerate {
        layer: name,
        input,
        kernel_h: layer.kernel_h,
        kernel_w: layer.kernel_w,
        stride: layer.stride,
        padding: layer.padding,
    }
}

fn cost_of(layer: &LayerSpec, input: TensorShape, output: TensorShape) -> LayerCost {
    match layer.kind {
        LayerKind::MaxPool => LayerCost::default(),
        LayerKind::Conv => {
            let c_out = u64::from(output.channels);
            let weights = u64::from(layer.kernel_h)
                * u64::from(layer.kernel_w)
                * u64::from(input.channels)
                * c_out;
            let params = weights
                + if layer.has_bias { c_out } else { 0 }
                + if layer.has_norm { 2 * c_out } else { 0 };
            LayerCost {
                params,
                macs: weights * output.area(),
            }
        }
    }
}

/// Parameters and MACs of one layer applied to `input`.
pub fn layer_cost(layer: &LayerSpec, input: TensorShape) -> Result<LayerCost, CostError> {
    let output = propagate_shape(layer, input)?;
    Ok(cost_of(layer, input, output))
}

/// Where a layer sits in the unrolled network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerId {
    Stem(usize),
    Block {
        stage: usize,
        block: u32,
        layer: usize,
    },
    Projection {
        stage: usize,
        block: u32,
    },
}

impl LayerId {
    /// `None` for the stem, otherwise the stage index.
    pub(crate) fn stage(&self) -> Option<usize> {
        match *self {
            LayerId::Stem(_) => None,
            LayerId::Block { stage, .. } | LayerId::Projection { stage, .. } => Some(stage),
        }
    }

    pub(crate) fn label(&self, arch: &ArchSpec) -> String {
        match *self {
            LayerId::Stem(i) => format!("stem.{i}"),
            LayerId::Block {
                stage,
                block,
                layer,
            } => {
                format!("{}.b{block}.l{layer}", arch.stages[stage].name)
            }
            LayerId::Projection { stage, block } => {
                format!("{}.b{block}.proj", arch.stages[stage].name)
            }
        }
    }
}

fn projection(out_channels: u32, stride: u32) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv,
        kernel_h: 1,
        kernel_w: 1,
        out_channels: Some(out_channels),
        stride,
        padding: 0,
        has_norm: true,
        has_bias: false,
    }
}

/// Visits every costed layer of the unrolled network in execution order,
/// including implied projection shortcuts. Returns the final shape.
pub(crate) fn walk<F>(
    arch: &ArchSpec,
    input: TensorShape,
    mut visit: F,
) -> Result<TensorShape, CostError>
where
    F: FnMut(LayerId, &LayerSpec, TensorShape, LayerCost),
{
    if !input.is_valid() {
        return Err(CostError::InvalidInput(input));
    }
    let mut shape = input;
    let mut step = |id: LayerId, layer: &LayerSpec, input: TensorShape| {
        let out =
            try_propagate(layer, input).ok_or_else(|| degenerate(id.label(arch), layer, input))?;
        visit(id, layer, out, cost_of(layer, input, out));
        Ok::<_, CostError>(out)
    };

    for (i, layer) in arch.stem.iter().enumerate() {
        shape = step(LayerId::Stem(i), layer, shape)?;
    }
    for (s, stage) in arch.stages.iter().enumerate() {
        for b in 0..stage.repeats {
            let block_in = shape;
            let layers = stage.block.instantiate(b, stage.first_block_stride);
            for (l, layer) in layers.iter().enumerate() {
                shape = step(
                    LayerId::Block {
                        stage: s,
                        block: b,
                        layer: l,
                    },
                    layer,
                    shape,
                )?;
            }
            let shortcut_shape = match stage.block.shortcut {
                Shortcut::None => continue,
                Shortcut::Projection if b == 0 || block_in != shape => {
                    let stride = layers.iter().map(|l| l.stride).product();
                    let proj = projection(shape.channels, stride);
                    step(LayerId::Projection { stage: s, block: b }, &proj, block_in)?
                }
                _ => block_in,
            };
            if shortcut_shape != shape {
                return Err(CostError::ShortcutMismatch {
                    layer: format!("{}.b{b}", stage.name),
                    main: shape,
                    shortcut: shortcut_shape,
                });
            }
        }
    }
    Ok(shape)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub id: String,
    pub stage: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub out_shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub macs_share: f64,
    pub out_shape: TensorShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub gflops: f64,
}

/// Per-layer, per-stage and total costs of an architecture at one input size.
///
/// `per_stage[0]` is always the stem (possibly empty), followed by one entry per stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub arch: String,
    pub input_shape: TensorShape,
    pub per_layer: Vec<LayerReport>,
    pub per_stage: Vec<StageReport>,
    pub totals: Totals,
}

pub fn analyze(arch: &ArchSpec, input: TensorShape) -> Result<CostReport, CostError> {
    let mut per_layer = Vec::new();
    let mut per_stage: Vec<StageReport> = std::iter::once("stem")
        .chain(arch.stages.iter().map(|s| s.name.as_str()))
        .map(|name| StageReport {
            name: name.to_string(),
            params: 0,
            macs: 0,
            macs_share: 0.0,
            out_shape: input,
        })
        .collect();

    walk(arch, input, |id, layer, out, cost| {
        let slot = id.stage().map_or(0, |s| s + 1);
        let stage = &mut per_stage[slot];
        stage.params += cost.params;
        stage.macs += cost.macs;
        if !matches!(id, LayerId::Projection { .. }) {
            stage.out_shape = out;
        }
        per_layer.push(LayerReport {
            id: id.label(arch),
            stage: stage.name.clone(),
            kind: layer.kind,
            params: cost.params,
            macs: cost.macs,
            out_shape: out,
        });
    })?;

    let params = per_layer.iter().map(|l| l.params).sum();
    let macs: u64 = per_layer.iter().map(|l| l.macs).sum();
    for stage in &mut per_stage {
        stage.macs_share = share(stage.macs, macs);
    }
    Ok(CostReport {
        arch: arch.name.clone(),
        input_shape: input,
        per_layer,
        per_stage,
        totals: Totals {
            params,
            macs,
            gflops: macs as f64 / 1e9,
        },
    })
}

/// Analyzes several architectures at the same input size.
pub fn analyze_many(
    archs: &[ArchSpec],
    input: TensorShape,
    exec: Execution,
) -> Vec<Result<CostReport, CostError>> {
    exec.map(archs, |a| analyze(a, input))
}

fn share(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

/// Parameter and MAC totals only, plus MACs per stage slot (stem first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct CostSummary {
    pub params: u64,
    pub macs: u64,
    pub stage_macs: Vec<u64>,
}

pub(crate) fn summarize(arch: &ArchSpec, input: TensorShape) -> Result<CostSummary, CostError> {
    let mut summary = CostSummary {
        params: 0,
        macs: 0,
        stage_macs: vec![0; arch.stages.len() + 1],
    };
    walk(arch, input, |id, _, _, cost| {
        summary.params += cost.params;
        summary.macs += cost.macs;
        summary.stage_macs[id.stage().map_or(0, |s| s + 1)] += cost.macs;
    })?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageShare {
    pub name: String,
    pub macs_share: f64,
}

/// Fraction of total MACs spent in each stage, stem first.
pub fn stage_profile(report: &CostReport) -> Vec<StageShare> {
    report
        .per_stage
        .iter()
        .map(|s| StageShare {
            name: s.name.clone(),
            macs_share: s.macs_share,
        })
        .collect()
}

/// Main-path layers in execution order, tagged with their stage slot
/// (0 = stem, `i + 1` = stage `i`). Shortcut branches are excluded.
pub(crate) fn main_path(arch: &ArchSpec) -> impl Iterator<Item = (usize, LayerSpec)> + '_ {
    let stem = arch.stem.iter().cloned().map(|l| (0, l));
    let stages = arch.stages.iter().enumerate().flat_map(|(s, stage)| {
        (0..stage.repeats).flat_map(move |b| {
            stage
                .block
                .instantiate(b, stage.first_block_stride)
                .into_iter()
                .map(move |l| (s + 1, l))
        })
    });
    stem.chain(stages)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StrideLadder {
    pub total: u64,
    /// Cumulative stride after the stem and after each stage.
    pub cumulative: Vec<u64>,
}

pub fn total_stride(arch: &ArchSpec) -> StrideLadder {
    let mut cumulative = vec![1u64; arch.stages.len() + 1];
    let mut total = 1u64;
    for (slot, layer) in main_path(arch) {
        total = total.saturating_mul(u64::from(layer.stride));
        cumulative[slot] = total;
    }
    // Slots with no layers inherit the previous value.
    for i in 1..cumulative.len() {
        cumulative[i] = cumulative[i].max(cumulative[i - 1]);
    }
    StrideLadder { total, cumulative }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReceptiveField {
    pub boundary: String,
    pub rf: u64,
    pub jump: u64,
}

/// Receptive field at the end of the stem and of each stage, following the
/// main path with `rf += (k - 1) * jump; jump *= stride`.
pub fn receptive_field(arch: &ArchSpec) -> Vec<ReceptiveField> {
    let names: Vec<String> = std::iter::once("stem".to_string())
        .chain(arch.stages.iter().map(|s| s.name.clone()))
        .collect();
    let mut at = vec![(1u64, 1u64); names.len()];
    let (mut rf, mut jump) = (1u64, 1u64);
    let mut last_slot = 0;
    for (slot, layer) in main_path(arch) {
        for s in last_slot + 1..slot {
            at[s] = at[s - 1];
        }
        let k = u64::from(layer.kernel_h.max(layer.kernel_w));
        rf += (k - 1) * jump;
        jump *= u64::from(layer.stride);
        at[slot] = (rf, jump);
        last_slot = slot;
    }
    for s in last_slot + 1..at.len() {
        at[s] = at[s - 1];
    }
    names
        .into_iter()
        .zip(at)
        .map(|(boundary, (rf, jump))| ReceptiveField { boundary, rf, jump })
        .collect()
}

/// Stage shares, stride ladder and receptive fields of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Profile {
    pub arch: String,
    pub input_shape: TensorShape,
    pub stages: Vec<StageShare>,
    pub stride: StrideLadder,
    pub receptive_field: Vec<ReceptiveField>,
}

pub fn profile(arch: &ArchSpec, input: TensorShape) -> Result<Profile, CostError> {
    let report = analyze(arch, input)?;
    Ok(Profile {
        arch: arch.name.clone(),
        input_shape: input,
        stages: stage_profile(&report),
        stride: total_stride(arch),
        receptive_field: receptive_field(arch),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{builtin, BlockSpec, StageSpec, BUILTIN_NAMES};

    fn single(layers: Vec<LayerSpec>, shortcut: Shortcut) -> ArchSpec {
        ArchSpec {
            name: "single".into(),
            in_channels: 1,
            stem: vec![],
            stages: vec![StageSpec {
                name: "stage1".into(),
                block: BlockSpec { layers, shortcut },
                repeats: 1,
                first_block_stride: 1,
            }],
        }
    }

    fn pointwise() -> LayerSpec {
        let mut l = LayerSpec::conv(1, 1, 1);
        l.has_norm = false;
        l
    }

    #[test]
    fn propagate_examples() {
        let s = |c, h, w| TensorShape::new(c, h, w);
        assert_eq!(
            propagate_shape(&LayerSpec::conv(7, 64, 2), s(3, 640, 512)).unwrap(),
            s(64, 320, 256)
        );
        assert_eq!(
            propagate_shape(&LayerSpec::conv(1, 256, 1), s(64, 160, 128)).unwrap(),
            s(256, 160, 128)
        );
        assert_eq!(
            propagate_shape(&LayerSpec::max_pool(3, 2), s(64, 320, 256)).unwrap(),
            s(64, 160, 128)
        );
    }

    #[test]
    fn degenerate_output_is_error() {
        let mut l = LayerSpec::conv(7, 8, 1);
        l.padding = 0;
        let err = propagate_shape(&l, TensorShape::new(3, 4, 4)).unwrap_err();
        assert!(matches!(err, CostError::Degenerate { .. }));
    }

    #[test]
    fn degenerate_mid_network_names_layer() {
        let mut arch = builtin("resnet50").unwrap();
        arch.stem[0].padding = 0;
        let err = analyze(&arch, TensorShape::new(3, 5, 5)).unwrap_err();
        match err {
            CostError::Degenerate { layer, .. } => assert_eq!(layer, "stem.0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trivial_costs() {
        let one = TensorShape::new(1, 1, 1);
        assert_eq!(
            layer_cost(&pointwise(), one).unwrap(),
            LayerCost { params: 1, macs: 1 }
        );
        let pool = layer_cost(&LayerSpec::max_pool(3, 2), TensorShape::new(64, 32, 32)).unwrap();
        assert_eq!(pool, LayerCost::default());
        let report = analyze(&single(vec![pointwise()], Shortcut::None), one).unwrap();
        assert_eq!((report.totals.params, report.totals.macs), (1, 1));
    }

    #[test]
    fn bias_and_norm_params() {
        let mut l = LayerSpec::conv(3, 4, 1);
        l.has_bias = true;
        let c = layer_cost(&l, TensorShape::new(2, 8, 8)).unwrap();
        assert_eq!(c.params, 9 * 2 * 4 + 4 + 8);
    }

    #[test]
    fn single_stage_profile_is_one() {
        let report = analyze(
            &single(vec![pointwise()], Shortcut::None),
            TensorShape::new(1, 4, 4),
        )
        .unwrap();
        let profile = stage_profile(&report);
        assert_eq!(profile[0].name, "stem");
        assert_eq!(profile[0].macs_share, 0.0);
        assert_eq!(profile[1].macs_share, 1.0);
    }

    #[test]
    fn projection_is_costed_on_first_block_only() {
        let arch = builtin("resnet50").unwrap();
        let report = analyze(&arch, TensorShape::new(3, 224, 224)).unwrap();
        let projections: Vec<_> = report
            .per_layer
            .iter()
            .filter(|l| l.id.ends_with("proj"))
            .map(|l| l.id.as_str())
            .collect();
        assert_eq!(
            projections,
            [
                "stage1.b0.proj",
                "stage2.b0.proj",
                "stage3.b0.proj",
                "stage4.b0.proj"
            ]
        );
    }

    #[test]
    fn canonical_resnet50_at_224() {
        // Widely quoted figures for the ResNet50 trunk (no classifier): 23.5M params, 4.09 GMACs.
        let r = analyze(&builtin("resnet50").unwrap(), TensorShape::new(3, 224, 224)).unwrap();
        assert_eq!(r.totals.params, 23_508_032);
        assert!((r.totals.gflops - 4.09).abs() < 0.01, "{}", r.totals.gflops);
    }

    #[test]
    fn stride_ladders() {
        let r = total_stride(&builtin("resnet50").unwrap());
        assert_eq!((r.total, r.cumulative), (32, vec![4, 4, 8, 16, 32]));
        let bh = total_stride(&builtin("bh-resnet50").unwrap());
        assert_eq!((bh.total, bh.cumulative), (32, vec![2, 4, 8, 16, 32]));
        let one = total_stride(&single(vec![pointwise()], Shortcut::None));
        assert_eq!(one.total, 1);
    }

    #[test]
    fn paired_builtins_share_total_stride() {
        for pair in BUILTIN_NAMES.chunks(2) {
            let a = total_stride(&builtin(pair[0]).unwrap()).total;
            let b = total_stride(&builtin(pair[1]).unwrap()).total;
            assert_eq!(a, b, "{pair:?}");
        }
    }

    #[test]
    fn receptive_fields() {
        let one = single(vec![LayerSpec::conv(3, 1, 1)], Shortcut::None);
        assert_eq!(receptive_field(&one)[1].rf, 3);
        let two = single(
            vec![LayerSpec::conv(3, 1, 1), LayerSpec::conv(3, 1, 1)],
            Shortcut::None,
        );
        assert_eq!(receptive_field(&two)[1].rf, 5);
        let resnet = receptive_field(&builtin("resnet50").unwrap());
        assert_eq!(resnet[0].boundary, "stem");
        assert_eq!((resnet[0].rf, resnet[0].jump), (11, 4));
    }

    #[test]
    fn shape_parse() {
        assert_eq!(
            "3x640x512".parse::<TensorShape>().unwrap(),
            TensorShape::new(3, 640, 512)
        );
        assert!("3x0x5".parse::<TensorShape>().is_err());
        assert!("3x5".parse::<TensorShape>().is_err());
        assert!("axbxc".parse::<TensorShape>().is_err());
    }
}
