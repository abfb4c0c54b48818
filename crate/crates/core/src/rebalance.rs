//! Bottom-heavy synthesis.
//!
//! The stem gives up one downsampling step, which migrates into the first
//! stage (or into a trailing max pool for pool-less stems). Per-stage repeat
//! counts are then searched exhaustively: every vector whose MACs are within
//! the parity tolerance of the base is feasible, and the winner maximizes the
//! share of MACs spent up to and including the stage where the feature map
//! is halved for the third time.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::arch::{validate, ArchSpec, LayerKind, LayerSpec, Shortcut, Violation};
use crate::cost::{
    main_path, summarize, total_stride, CostError, CostSummary, StrideLadder, TensorShape,
};
use crate::exec::Execution;

pub const DEFAULT_TOLERANCE: f64 = 0.02;
pub const DEFAULT_BOUNDS: (u32, u32) = (1, 16);
const MAX_CANDIDATES: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum RebalanceError {
    #[error("invalid architecture: {0:?}")]
    InvalidArch(Vec<Violation>),
    #[error("stem has no strided convolution to relax")]
    NoStridedStemConv,
    #[error("only {found} downsampling step(s) on the main path; the pivot needs three")]
    TooFewDownsamplings { found: u32 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(
        "no repeat vector meets the {:.2}% parity tolerance; closest is {:?} at {:.3}%",
        tolerance * 100.0, closest.repeats, closest.parity_error * 100.0
    )]
    Infeasible { closest: Candidate, tolerance: f64 },
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Boundary after which compute counts as "late".
///
/// The early region is the stem plus `stages[..early_stages]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Pivot {
    pub early_stages: usize,
    pub cumulative_stride: u64,
}

/// Locates the stage in which the third halving of spatial resolution happens.
pub fn find_pivot(arch: &ArchSpec) -> Result<Pivot, RebalanceError> {
    let mut halvings = 0;
    let mut stride = 1u64;
    for (slot, layer) in main_path(arch) {
        if layer.stride == 0 {
            continue;
        }
        halvings += layer.stride.trailing_zeros();
        stride *= u64::from(layer.stride);
        if halvings >= 3 {
            return Ok(Pivot {
                early_stages: slot,
                cumulative_stride: stride,
            });
        }
    }
    Err(RebalanceError::TooFewDownsamplings { found: halvings })
}

/// Removes one downsampling step from the stem without changing the total stride.
///
/// The first strided stem conv becomes a 3x3 stride-1 conv. If the stem
/// already has a max pool, the removed stride moves into the first stage's
/// first block; otherwise a 3x3 max pool carrying it is appended to the stem.
pub fn transform_stem(arch: &ArchSpec) -> Result<ArchSpec, RebalanceError> {
    let at = arch
        .stem
        .iter()
        .position(|l| l.is_conv() && l.stride >= 2)
        .ok_or(RebalanceError::NoStridedStemConv)?;
    let mut out = arch.clone();
    let removed = out.stem[at].stride;
    let relaxed = LayerSpec {
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
        ..out.stem[at].clone()
    };
    out.stem[at] = relaxed;

    let has_pool = out.stem.iter().any(|l| l.kind == LayerKind::MaxPool);
    if has_pool && !out.stages.is_empty() {
        let first = &mut out.stages[0];
        first.first_block_stride *= removed;
        if first.block.shortcut == Shortcut::Identity {
            first.block.shortcut = Shortcut::Projection;
        }
    } else {
        out.stem.push(LayerSpec::max_pool(3, removed));
    }
    if !out.name.starts_with("bh-") {
        out.name = format!("bh-{}", out.name);
    }
    Ok(out)
}

/// Search problem. Build with [`RebalanceProblem::new`] and adjust fields.
#[derive(Debug, Clone)]
pub struct RebalanceProblem {
    pub base: ArchSpec,
    pub input_shape: TensorShape,
    pub parity_tolerance: f64,
    /// Inclusive `(lo, hi)` per stage.
    pub repeat_bounds: Vec<(u32, u32)>,
    /// Number of early stages; derived with [`find_pivot`] when `None`.
    pub pivot: Option<usize>,
    /// Keep every feasible candidate in the result.
    pub collect_feasible: bool,
}

impl RebalanceProblem {
    pub fn new(base: ArchSpec, input_shape: TensorShape) -> Self {
        let repeat_bounds = vec![DEFAULT_BOUNDS; base.stages.len()];
        RebalanceProblem {
            base,
            input_shape,
            parity_tolerance: DEFAULT_TOLERANCE,
            repeat_bounds,
            pivot: None,
            collect_feasible: false,
        }
    }

    pub fn with_bounds(mut self, lo: u32, hi: u32) -> Self {
        self.repeat_bounds = vec![(lo, hi); self.base.stages.len()];
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.parity_tolerance = tolerance;
        self
    }

    fn check(&self) -> Result<(), RebalanceError> {
        let violations = validate(&self.base);
        if !violations.is_empty() {
            return Err(RebalanceError::InvalidArch(violations));
        }
        let bad = |m: String| Err(RebalanceError::InvalidProblem(m));
        if !(self.parity_tolerance > 0.0 && self.parity_tolerance <= 0.2) {
            return bad(format!(
                "parity tolerance {} is outside (0, 0.2]",
                self.parity_tolerance
            ));
        }
        if self.repeat_bounds.len() != self.base.stages.len() {
            return bad(format!(
                "{} repeat bounds given for {} stages",
                self.repeat_bounds.len(),
                self.base.stages.len()
            ));
        }
        for (i, &(lo, hi)) in self.repeat_bounds.iter().enumerate() {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "stage {i}: bounds [{lo}, {hi}] are empty or include 0"
                ));
            }
        }
        if let Some(p) = self.pivot {
            if p > self.base.stages.len() {
                return bad(format!("pivot {p} is beyond the last stage"));
            }
        }
        if self.search_size() > MAX_CANDIDATES {
            return bad(format!(
                "{} candidates is too many to enumerate",
                self.search_size()
            ));
        }
        Ok(())
    }

    /// Number of repeat vectors inside the bounds.
    pub fn search_size(&self) -> u64 {
        self.repeat_bounds
            .iter()
            .map(|&(lo, hi)| u64::from(hi.saturating_sub(lo)) + 1)
            .fold(1u64, |a, b| a.saturating_mul(b))
    }

    /// Repeat vector number `index` in lexicographic order (stage 0 most significant).
    fn decode(&self, mut index: u64) -> Vec<u32> {
        let mut repeats = vec![0; self.repeat_bounds.len()];
        for (slot, &(lo, hi)) in repeats.iter_mut().zip(&self.repeat_bounds).rev() {
            let radix = u64::from(hi - lo) + 1;
            *slot = lo + (index % radix) as u32;
            index /= radix;
        }
        repeats
    }
}

/// One evaluated repeat vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub repeats: Vec<u32>,
    pub params: u64,
    pub macs: u64,
    pub early_macs: u64,
    pub parity_error: f64,
    pub early_share: f64,
}

impl Candidate {
    fn from_summary(
        repeats: Vec<u32>,
        summary: &CostSummary,
        early_stages: usize,
        base_macs: u64,
    ) -> Self {
        let early_macs: u64 = summary.stage_macs[..=early_stages].iter().sum();
        Candidate {
            repeats,
            params: summary.params,
            macs: summary.macs,
            early_macs,
            parity_error: summary.macs.abs_diff(base_macs) as f64 / base_macs as f64,
            early_share: early_macs as f64 / summary.macs as f64,
        }
    }

    /// Exact comparison of early shares by cross-multiplication.
    fn cmp_early_share(&self, other: &Candidate) -> Ordering {
        let lhs = u128::from(self.early_macs) * u128::from(other.macs);
        let rhs = u128::from(other.early_macs) * u128::from(self.macs);
        lhs.cmp(&rhs)
    }

    /// Total preference order: higher early share, then fewer params, then
    /// lexicographically larger repeats.
    fn preference(&self, other: &Candidate) -> Ordering {
        self.cmp_early_share(other)
            .then_with(|| other.params.cmp(&self.params))
            .then_with(|| self.repeats.cmp(&other.repeats))
    }

    /// Total closeness order for infeasibility reports: smaller MAC gap, then smaller repeats.
    fn closeness(&self, other: &Candidate, base_macs: u64) -> Ordering {
        other
            .macs
            .abs_diff(base_macs)
            .cmp(&self.macs.abs_diff(base_macs))
            .then_with(|| other.repeats.cmp(&self.repeats))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RebalanceResult {
    #[serde(rename = "bh_config", serialize_with = "as_config")]
    pub bh_arch: ArchSpec,
    pub repeats: Vec<u32>,
    pub parity_error: f64,
    pub early_share: f64,
    pub params: u64,
    pub macs: u64,
    pub base_params: u64,
    pub base_macs: u64,
    /// Early share of the untouched base, measured at its own pivot.
    pub base_early_share: f64,
    pub pivot: Pivot,
    pub candidates_examined: u64,
    pub feasible_count: u64,
    pub feasible: Option<Vec<Candidate>>,
}

#[derive(Default)]
struct Acc {
    examined: u64,
    feasible_count: u64,
    best: Option<Candidate>,
    closest: Option<Candidate>,
    feasible: Vec<Candidate>,
}

fn pick(
    a: Option<Candidate>,
    b: Option<Candidate>,
    better: impl Fn(&Candidate, &Candidate) -> Ordering,
) -> Option<Candidate> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if better(&a, &b) == Ordering::Less {
            b
        } else {
            a
        }),
        (a, b) => a.or(b),
    }
}

/// Context shared by every candidate evaluation.
struct Search<'a> {
    problem: &'a RebalanceProblem,
    template: ArchSpec,
    early_stages: usize,
    base_macs: u64,
}

impl Search<'_> {
    fn evaluate(&self, repeats: Vec<u32>) -> Result<Candidate, CostError> {
        let arch = self.template.with_repeats(&repeats);
        let summary = summarize(&arch, self.problem.input_shape)?;
        Ok(Candidate::from_summary(
            repeats,
            &summary,
            self.early_stages,
            self.base_macs,
        ))
    }
}

fn prepare(problem: &RebalanceProblem) -> Result<(Search<'_>, CostSummary, Pivot), RebalanceError> {
    problem.check()?;
    let base = summarize(&problem.base, problem.input_shape)?;
    if base.macs == 0 {
        return Err(RebalanceError::InvalidProblem(
            "base architecture has no MACs".into(),
        ));
    }
    let template = transform_stem(&problem.base)?;
    let pivot = match problem.pivot {
        Some(early_stages) => Pivot {
            early_stages,
            cumulative_stride: total_stride(&template).cumulative[early_stages],
        },
        None => find_pivot(&template)?,
    };
    let search = Search {
        problem,
        template,
        early_stages: pivot.early_stages,
        base_macs: base.macs,
    };
    Ok((search, base, pivot))
}

/// Scores an arbitrary repeat vector against the problem (stem-transformed base, same pivot).
pub fn evaluate_candidate(
    problem: &RebalanceProblem,
    repeats: &[u32],
) -> Result<Candidate, RebalanceError> {
    let (search, _, _) = prepare(problem)?;
    if repeats.len() != problem.base.stages.len() || repeats.contains(&0) {
        return Err(RebalanceError::InvalidProblem(format!(
            "repeat vector {repeats:?} does not fit {} stages",
            problem.base.stages.len()
        )));
    }
    Ok(search.evaluate(repeats.to_vec())?)
}

pub fn rebalance(problem: &RebalanceProblem) -> Result<RebalanceResult, RebalanceError> {
    rebalance_with(problem, Execution::default())
}

/// Exhaustive search over every repeat vector inside the bounds.
pub fn rebalance_with(
    problem: &RebalanceProblem,
    exec: Execution,
) -> Result<RebalanceResult, RebalanceError> {
    let (search, base, pivot) = prepare(problem)?;
    let tolerance = problem.parity_tolerance;
    let base_macs = base.macs;
    let collect = problem.collect_feasible;

    let acc = exec.map_reduce(
        problem.search_size(),
        || Ok(Acc::default()),
        |index| {
            let c = search.evaluate(problem.decode(index))?;
            let feasible = c.parity_error <= tolerance;
            Ok(Acc {
                examined: 1,
                feasible_count: u64::from(feasible),
                best: feasible.then(|| c.clone()),
                feasible: if feasible && collect {
                    vec![c.clone()]
                } else {
                    Vec::new()
                },
                closest: Some(c),
            })
        },
        |a: Result<Acc, CostError>, b| {
            let (a, mut b) = (a?, b?);
            let mut feasible = a.feasible;
            feasible.append(&mut b.feasible);
            Ok(Acc {
                examined: a.examined + b.examined,
                feasible_count: a.feasible_count + b.feasible_count,
                best: pick(a.best, b.best, Candidate::preference),
                closest: pick(a.closest, b.closest, |x, y| x.closeness(y, base_macs)),
                feasible,
            })
        },
    )?;

    let Some(best) = acc.best else {
        let closest = acc.closest.expect("search space is never empty");
        return Err(RebalanceError::Infeasible { closest, tolerance });
    };

    let base_early_share = match find_pivot(&problem.base) {
        Ok(p) => base.stage_macs[..=p.early_stages].iter().sum::<u64>() as f64 / base_macs as f64,
        Err(_) => {
            base.stage_macs[..=pivot.early_stages].iter().sum::<u64>() as f64 / base_macs as f64
        }
    };
    let mut feasible = acc.feasible;
    feasible.sort_by(|a, b| a.repeats.cmp(&b.repeats));

    Ok(RebalanceResult {
        bh_arch: search.template.with_repeats(&best.repeats),
        repeats: best.repeats,
        parity_error: best.parity_error,
        early_share: best.early_share,
        params: best.params,
        macs: best.macs,
        base_params: base.params,
        base_macs,
        base_early_share,
        pivot,
        candidates_examined: acc.examined,
        feasible_count: acc.feasible_count,
        feasible: collect.then_some(feasible),
    })
}

impl RebalanceResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rebalance result serializes")
    }

    /// Feasible candidates when collected, otherwise just the winner.
    pub fn to_csv(&self) -> String {
        let winner = [Candidate {
            repeats: self.repeats.clone(),
            params: self.params,
            macs: self.macs,
            early_macs: 0,
            parity_error: self.parity_error,
            early_share: self.early_share,
        }];
        let rows = self.feasible.as_deref().unwrap_or(&winner);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "repeats",
            "params",
            "macs",
            "early_share",
            "parity_error",
            "winner",
        ])
        .expect("in-memory write");
        for c in rows {
            w.write_record([
                join(&c.repeats),
                c.params.to_string(),
                c.macs.to_string(),
                format!("{:.12}", c.early_share),
                format!("{:.12}", c.parity_error),
                u8::from(c.repeats == self.repeats).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {}", "result", self.bh_arch.name);
        let _ = writeln!(out, "{:<22} {}", "repeats", join(&self.repeats));
        let _ = writeln!(
            out,
            "{:<22} {} stage(s) + stem (cumulative stride {})",
            "early region", self.pivot.early_stages, self.pivot.cumulative_stride
        );
        let _ = writeln!(
            out,
            "{:<22} {:.2}M -> {:.2}M",
            "params",
            self.base_params as f64 / 1e6,
            self.params as f64 / 1e6
        );
        let _ = writeln!(
            out,
            "{:<22} {:.2} -> {:.2}",
            "GFLOPs",
            self.base_macs as f64 / 1e9,
            self.macs as f64 / 1e9
        );
        let _ = writeln!(
            out,
            "{:<22} {:.4}%",
            "parity error",
            self.parity_error * 100.0
        );
        let _ = writeln!(
            out,
            "{:<22} {:.4} -> {:.4}",
            "early share", self.base_early_share, self.early_share
        );
        let _ = writeln!(
            out,
            "{:<22} {} examined, {} feasible",
            "candidates", self.candidates_examined, self.feasible_count
        );
        out
    }
}

fn as_config<S: serde::Serializer>(arch: &ArchSpec, s: S) -> Result<S::Ok, S::Error> {
    let text = crate::arch::serialize_arch(arch).map_err(serde::ser::Error::custom)?;
    s.serialize_str(&text)
}

fn join(values: &[u32]) -> String {
    values
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDelta {
    pub name: String,
    pub base_share: f64,
    pub variant_share: f64,
    pub delta: f64,
}

/// Side-by-side costs of two architectures at one input size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub base: String,
    pub variant: String,
    pub input_shape: TensorShape,
    pub base_params: u64,
    pub variant_params: u64,
    pub delta_params: i64,
    pub base_gflops: f64,
    pub variant_gflops: f64,
    pub delta_gflops: f64,
    pub stages: Vec<StageDelta>,
    pub base_ladder: StrideLadder,
    pub variant_ladder: StrideLadder,
}

pub fn compare(
    base: &ArchSpec,
    variant: &ArchSpec,
    input: TensorShape,
) -> Result<Comparison, CostError> {
    let a = crate::cost::analyze(base, input)?;
    let b = crate::cost::analyze(variant, input)?;
    let len = a.per_stage.len().max(b.per_stage.len());
    let stages = (0..len)
        .map(|i| {
            let name = a
                .per_stage
                .get(i)
                .or_else(|| b.per_stage.get(i))
                .map(|s| s.name.clone())
                .unwrap_or_default();
            let base_share = a.per_stage.get(i).map_or(0.0, |s| s.macs_share);
            let variant_share = b.per_stage.get(i).map_or(0.0, |s| s.macs_share);
            StageDelta {
                name,
                base_share,
                variant_share,
                delta: variant_share - base_share,
            }
        })
        .collect();
    Ok(Comparison {
        base: base.name.clone(),
        variant: variant.name.clone(),
        input_shape: input,
        base_params: a.totals.params,
        variant_params: b.totals.params,
        delta_params: b.totals.params as i64 - a.totals.params as i64,
        base_gflops: a.totals.gflops,
        variant_gflops: b.totals.gflops,
        delta_gflops: (b.totals.macs as f64 - a.totals.macs as f64) / 1e9,
        stages,
        base_ladder: total_stride(base),
        variant_ladder: total_stride(variant),
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stage", "base_share", "variant_share", "delta"])
            .expect("in-memory write");
        for s in &self.stages {
            w.write_record([
                s.name.clone(),
                format!("{:.6}", s.base_share),
                format!("{:.6}", s.variant_share),
                format!("{:+.6}", s.delta),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} vs {} @ {}",
            self.base, self.variant, self.input_shape
        );
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>9} {:>9}",
            "stage", "base", "variant", "delta"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:<10} {:>8.2}% {:>8.2}% {:>+8.2}%",
                s.name,
                s.base_share * 100.0,
                s.variant_share * 100.0,
                s.delta * 100.0
            );
        }
        let ladder = |l: &StrideLadder| {
            l.cumulative
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(
            out,
            "stride     {} -> {}",
            ladder(&self.base_ladder),
            ladder(&self.variant_ladder)
        );
        let _ = writeln!(
            out,
            "params     {:.2}M -> {:.2}M ({:+.2}M)",
            self.base_params as f64 / 1e6,
            self.variant_params as f64 / 1e6,
            self.delta_params as f64 / 1e6
        );
        let _ = writeln!(
            out,
            "GFLOPs     {:.2} -> {:.2} ({:+.2})",
            self.base_gflops, self.variant_gflops, self.delta_gflops
        );
        out
    }
}
