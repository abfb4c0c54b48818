//! Size-stratified detection evaluation.
//!
//! Objects are bucketed by absolute size `sqrt(w * h)` into half-open
//! intervals `[lo, hi)`. For each interval, predictions are greedily matched
//! to in-interval ground truth in descending score order; a prediction that
//! finds no in-interval match but overlaps an out-of-interval object at the
//! IoU threshold is dropped instead of counted as a false positive. AP uses
//! all-points interpolation; mAP is the mean over categories that have
//! in-interval ground truth.
//!
//! Predictions are ordered by score (descending), then by image, category,
//! box coordinates and finally input position. The first five keys make the
//! result independent of input order; the last only separates exact
//! duplicates, which are interchangeable.

mod coco;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

pub use coco::{parse_results, CocoAnnotation, CocoCategory, CocoDataset, CocoImage, CocoResult};

/// Axis-aligned box: top-left corner plus width and height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn scale(&self, k: f64) -> BBox {
        BBox::new(self.x * k, self.y * k, self.w * k, self.h * k)
    }

    /// Overlapping region, if it has positive area.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    fn key_cmp(&self, other: &BBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

/// Absolute object size: the square root of the box area.
pub fn object_size(b: &BBox) -> f64 {
    b.area().sqrt()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let Some(inter) = a.intersect(b) else {
        return 0.0;
    };
    let i = inter.area();
    let union = a.area() + b.area() - i;
    if union <= 0.0 {
        0.0
    } else {
        (i / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Total order used for ranking: score descending, then identity.
pub(crate) fn rank_cmp(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.category_id.cmp(&b.category_id))
        .then_with(|| a.bbox.key_cmp(&b.bbox))
}

/// Named absolute-size range `[lo, hi)`; `hi` may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeInterval {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl SizeInterval {
    pub fn new(name: &str, lo: f64, hi: f64) -> Self {
        SizeInterval {
            name: name.to_string(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, size: f64) -> bool {
        self.lo <= size && size < self.hi
    }

    fn is_valid(&self) -> bool {
        self.lo >= 0.0 && self.lo < self.hi && !self.lo.is_nan()
    }
}

/// tiny, tiny1, tiny2, tiny3, small and all.
pub fn default_intervals() -> Vec<SizeInterval> {
    vec![
        SizeInterval::new("tiny", 2.0, 20.0),
        SizeInterval::new("tiny1", 2.0, 8.0),
        SizeInterval::new("tiny2", 8.0, 12.0),
        SizeInterval::new("tiny3", 12.0, 20.0),
        SizeInterval::new("small", 20.0, 32.0),
        SizeInterval::new("all", 2.0, f64::INFINITY),
    ]
}

/// Parses `name:lo:hi[,name:lo:hi...]`; `hi` may be `inf`.
pub fn parse_intervals(spec: &str) -> Result<Vec<SizeInterval>, EvalError> {
    spec.split(',')
        .map(|part| {
            let fields: Vec<&str> = part.trim().split(':').collect();
            let bad = || EvalError::BadInterval(part.trim().to_string());
            let [name, lo, hi] = fields[..] else {
                return Err(bad());
            };
            let lo = f64::from_str(lo).map_err(|_| bad())?;
            let hi = match hi {
                "inf" | "∞" => f64::INFINITY,
                v => f64::from_str(v).map_err(|_| bad())?,
            };
            let interval = SizeInterval::new(name, lo, hi);
            if name.is_empty() || !interval.is_valid() {
                return Err(bad());
            }
            Ok(interval)
        })
        .collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("IoU threshold {0} must lie strictly between 0 and 1")]
    IouThreshold(f64),
    #[error("ground truth #{0} has an invalid box")]
    InvalidGroundTruth(usize),
    #[error("prediction #{0} has an invalid box")]
    InvalidPrediction(usize),
    #[error("prediction #{index} has score {score} outside [0, 1]")]
    InvalidScore { index: usize, score: f64 },
    #[error("bad size interval `{0}` (expected name:lo:hi with 0 <= lo < hi)")]
    BadInterval(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryAp {
    pub category_id: u64,
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalResult {
    pub name: String,
    pub lo: f64,
    /// `None` for an unbounded interval.
    pub hi: Option<f64>,
    /// `None` when no category has ground truth in this interval.
    pub ap: Option<f64>,
    pub n_gt: usize,
    /// Predictions scored as true or false positives (ignored ones excluded).
    pub n_pred: usize,
    pub per_category: Vec<CategoryAp>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub iou_threshold: f64,
    pub per_interval: Vec<IntervalResult>,
}

impl EvalResult {
    pub fn interval(&self, name: &str) -> Option<&IntervalResult> {
        self.per_interval.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval result serializes")
    }

    /// One row per interval; empty `ap` when the interval has no ground truth.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["interval", "lo", "hi", "iou", "ap", "n_gt", "n_pred"])
            .expect("in-memory write");
        for r in &self.per_interval {
            w.write_record([
                r.name.clone(),
                r.lo.to_string(),
                r.hi.map_or_else(|| "inf".to_string(), |h| h.to_string()),
                self.iou_threshold.to_string(),
                r.ap.map_or_else(String::new, |ap| format!("{ap:.6}")),
                r.n_gt.to_string(),
                r.n_pred.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = (self.iou_threshold * 100.0).round();
        let _ = writeln!(
            out,
            "{:<10} {:>12} {:>9} {:>8} {:>8}",
            "interval",
            "range",
            format!("mAP@{pct}"),
            "n_gt",
            "n_pred"
        );
        for r in &self.per_interval {
            let range = match r.hi {
                Some(hi) => format!("[{}, {})", r.lo, hi),
                None => format!("[{}, inf)", r.lo),
            };
            let ap =
                r.ap.map_or_else(|| "-".to_string(), |ap| format!("{:.2}", ap * 100.0));
            let _ = writeln!(
                out,
                "{:<10} {:>12} {:>9} {:>8} {:>8}",
                r.name, range, ap, r.n_gt, r.n_pred
            );
        }
        out
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Area under the all-points interpolated precision/recall curve.
///
/// `hits` are true-positive flags in rank order.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Ground truth and predictions of one (image, category) pair.
struct Group<'a> {
    category_id: u64,
    gts: Vec<&'a GroundTruth>,
    preds: Vec<&'a Prediction>,
}

/// Matched predictions of one group: (prediction, is true positive).
fn match_group<'a>(
    group: &Group<'a>,
    interval: &SizeInterval,
    threshold: f64,
) -> Vec<(&'a Prediction, bool)> {
    let inside: Vec<bool> = group
        .gts
        .iter()
        .map(|g| interval.contains(object_size(&g.bbox)))
        .collect();
    let mut taken = vec![false; group.gts.len()];
    let mut out = Vec::with_capacity(group.preds.len());
    for &pred in &group.preds {
        let mut best: Option<(usize, f64)> = None;
        let mut overlaps_ignored = false;
        for (g, gt) in group.gts.iter().enumerate() {
            let v = iou(&pred.bbox, &gt.bbox);
            if v < threshold {
                continue;
            }
            if !inside[g] {
                overlaps_ignored = true;
            } else if !taken[g] && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                out.push((pred, true));
            }
            None if overlaps_ignored => {}
            None => out.push((pred, false)),
        }
    }
    out
}

pub fn evaluate(
    preds: &[Prediction],
    gts: &[GroundTruth],
    intervals: &[SizeInterval],
    iou_threshold: f64,
) -> Result<EvalResult, EvalError> {
    evaluate_with(preds, gts, intervals, iou_threshold, Execution::default())
}

pub fn evaluate_with(
    preds: &[Prediction],
    gts: &[GroundTruth],
    intervals: &[SizeInterval],
    iou_threshold: f64,
    exec: Execution,
) -> Result<EvalResult, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::IouThreshold(iou_threshold));
    }
    if let Some(i) = gts.iter().position(|g| !g.bbox.is_valid()) {
        return Err(EvalError::InvalidGroundTruth(i));
    }
    for (index, p) in preds.iter().enumerate() {
        if !p.bbox.is_valid() {
            return Err(EvalError::InvalidPrediction(index));
        }
        if !(0.0..=1.0).contains(&p.score) {
            return Err(EvalError::InvalidScore {
                index,
                score: p.score,
            });
        }
    }
    if let Some(bad) = intervals.iter().find(|i| !i.is_valid()) {
        return Err(EvalError::BadInterval(bad.name.clone()));
    }

    // Ranked once; the sort is stable so exact duplicates keep input order.
    let mut ranked: Vec<&Prediction> = preds.iter().collect();
    ranked.sort_by(|a, b| rank_cmp(a, b));

    let mut by_key: BTreeMap<(u64, u64), Group> = BTreeMap::new();
    for gt in gts {
        by_key
            .entry((gt.image_id, gt.category_id))
            .or_insert_with(|| Group {
                category_id: gt.category_id,
                gts: Vec::new(),
                preds: Vec::new(),
            })
            .gts
            .push(gt);
    }
    for &p in &ranked {
        by_key
            .entry((p.image_id, p.category_id))
            .or_insert_with(|| Group {
                category_id: p.category_id,
                gts: Vec::new(),
                preds: Vec::new(),
            })
            .preds
            .push(p);
    }
    let groups: Vec<Group> = by_key.into_values().collect();

    let per_interval = exec.map(intervals, |interval| {
        let mut hits: BTreeMap<u64, Vec<(&Prediction, bool)>> = BTreeMap::new();
        let mut n_gt: BTreeMap<u64, usize> = BTreeMap::new();
        for group in &groups {
            let count = group
                .gts
                .iter()
                .filter(|g| interval.contains(object_size(&g.bbox)))
                .count();
            if count > 0 {
                *n_gt.entry(group.category_id).or_default() += count;
            }
            hits.entry(group.category_id)
                .or_default()
                .extend(match_group(group, interval, iou_threshold));
        }
        let n_pred = hits.values().map(Vec::len).sum();
        let per_category: Vec<CategoryAp> = n_gt
            .iter()
            .map(|(&category_id, &n)| {
                let mut matched = hits.remove(&category_id).unwrap_or_default();
                matched.sort_by(|a, b| rank_cmp(a.0, b.0));
                let flags: Vec<bool> = matched.iter().map(|m| m.1).collect();
                CategoryAp {
                    category_id,
                    ap: average_precision(&flags, n),
                    n_gt: n,
                }
            })
            .collect();
        let ap = (!per_category.is_empty())
            .then(|| per_category.iter().map(|c| c.ap).sum::<f64>() / per_category.len() as f64);
        IntervalResult {
            name: interval.name.clone(),
            lo: interval.lo,
            hi: interval.hi.is_finite().then_some(interval.hi),
            ap,
            n_gt: per_category.iter().map(|c| c.n_gt).sum(),
            n_pred,
            per_category,
        }
    });

    Ok(EvalResult {
        iou_threshold,
        per_interval,
    })
}
