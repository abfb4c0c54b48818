//! Test-only oracles. Nothing here calls into the code paths they check.
#![allow(dead_code)]

pub mod recount;

use bhkit_core::eval::{BBox, GroundTruth, Prediction, SizeInterval};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Instance {
    pub preds: Vec<Prediction>,
    pub gts: Vec<GroundTruth>,
    pub intervals: Vec<SizeInterval>,
    pub threshold: f64,
}

/// Small instance with heavy overlap, coarse scores (ties) and 1-3 intervals.
pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let n_gt = rng.gen_range(0..=6);
    let n_pred = rng.gen_range(0..=8);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            image_id: rng.gen_range(1..=2),
            category_id: rng.gen_range(1..=2),
            bbox: BBox::new(
                f64::from(rng.gen_range(0..20)),
                f64::from(rng.gen_range(0..20)),
                f64::from(rng.gen_range(1..=24)),
                f64::from(rng.gen_range(1..=24)),
            ),
        })
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            let score = f64::from(rng.gen_range(1..=5)) / 5.0;
            if !gts.is_empty() && rng.gen_bool(0.7) {
                let g = gts[rng.gen_range(0..gts.len())];
                let j = |r: &mut R| f64::from(r.gen_range(-2..=2));
                Prediction {
                    image_id: g.image_id,
                    category_id: if rng.gen_bool(0.9) {
                        g.category_id
                    } else {
                        3 - g.category_id
                    },
                    bbox: BBox::new(
                        g.bbox.x + j(rng),
                        g.bbox.y + j(rng),
                        (g.bbox.w + j(rng)).max(1.0),
                        (g.bbox.h + j(rng)).max(1.0),
                    ),
                    score,
                }
            } else {
                Prediction {
                    image_id: rng.gen_range(1..=2),
                    category_id: rng.gen_range(1..=2),
                    bbox: BBox::new(
                        f64::from(rng.gen_range(0..20)),
                        f64::from(rng.gen_range(0..20)),
                        f64::from(rng.gen_range(1..=24)),
                        f64::from(rng.gen_range(1..=24)),
                    ),
                    score,
                }
            }
        })
        .collect();
    let n_int = rng.gen_range(1..=3);
    let intervals = (0..n_int)
        .map(|i| {
            let lo = f64::from(rng.gen_range(0..=14));
            let hi = if rng.gen_bool(0.25) {
                f64::INFINITY
            } else {
                lo + f64::from(rng.gen_range(1..=16))
            };
            SizeInterval {
                name: format!("i{i}"),
                lo,
                hi,
            }
        })
        .collect();
    let threshold = *[0.3, 0.5, 0.7].choose(rng).unwrap();
    Instance {
        preds,
        gts,
        intervals,
        threshold,
    }
}

fn area_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

fn in_interval(b: &BBox, interval: &SizeInterval) -> bool {
    let size = (b.w * b.h).sqrt();
    interval.lo <= size && size < interval.hi
}

/// mAP of one interval when predictions are processed in `order`.
/// `None` when no category has in-interval ground truth.
pub fn oracle_map(inst: &Instance, interval: &SizeInterval, order: &[usize]) -> Option<f64> {
    let mut categories: Vec<u64> = inst
        .gts
        .iter()
        .filter(|g| in_interval(&g.bbox, interval))
        .map(|g| g.category_id)
        .collect();
    categories.sort_unstable();
    categories.dedup();
    if categories.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &cat in &categories {
        let n = inst
            .gts
            .iter()
            .filter(|g| g.category_id == cat && in_interval(&g.bbox, interval))
            .count();
        let mut used = vec![false; inst.gts.len()];
        let mut flags = Vec::new();
        for &i in order {
            let p = &inst.preds[i];
            if p.category_id != cat {
                continue;
            }
            let mut best: Option<usize> = None;
            let mut ignored = false;
            for (g, gt) in inst.gts.iter().enumerate() {
                if gt.image_id != p.image_id || gt.category_id != cat {
                    continue;
                }
                let v = area_iou(&p.bbox, &gt.bbox);
                if v < inst.threshold {
                    continue;
                }
                if !in_interval(&gt.bbox, interval) {
                    ignored = true;
                    continue;
                }
                if used[g] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => v > area_iou(&p.bbox, &inst.gts[b].bbox),
                };
                if better {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                used[g] = true;
                flags.push(true);
            } else if !ignored {
                flags.push(false);
            }
        }
        // Pointwise: every true positive adds 1/n recall at the best precision
        // reachable at or beyond its rank.
        let precision_at =
            |j: usize| flags[..=j].iter().filter(|&&f| f).count() as f64 / (j + 1) as f64;
        let mut ap = 0.0;
        for k in 0..flags.len() {
            if flags[k] {
                let best = (k..flags.len()).map(precision_at).fold(0.0, f64::max);
                ap += best / n as f64;
            }
        }
        total += ap;
    }
    Some(total / categories.len() as f64)
}

/// The documented ranking: score descending, image, category, x, y, w, h, input position.
pub fn canonical_order(inst: &Instance) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..inst.preds.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&inst.preds[a], &inst.preds[b]);
        q.score
            .partial_cmp(&p.score)
            .unwrap()
            .then(p.image_id.cmp(&q.image_id))
            .then(p.category_id.cmp(&q.category_id))
            .then(p.bbox.x.partial_cmp(&q.bbox.x).unwrap())
            .then(p.bbox.y.partial_cmp(&q.bbox.y).unwrap())
            .then(p.bbox.w.partial_cmp(&q.bbox.w).unwrap())
            .then(p.bbox.h.partial_cmp(&q.bbox.h).unwrap())
            .then(a.cmp(&b))
    });
    idx
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Every ordering consistent with descending score, or `None` when there are
/// more than `limit` of them.
pub fn score_consistent_orders(inst: &Instance, limit: usize) -> Option<Vec<Vec<usize>>> {
    let mut idx: Vec<usize> = (0..inst.preds.len()).collect();
    idx.sort_by(|&a, &b| {
        inst.preds[b]
            .score
            .partial_cmp(&inst.preds[a].score)
            .unwrap()
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if inst.preds[g[0]].score == inst.preds[i].score => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let count: usize = groups
        .iter()
        .map(|g| (1..=g.len()).product::<usize>())
        .product();
    if count > limit {
        return None;
    }
    let mut orders = vec![Vec::new()];
    for g in &groups {
        let perms = permutations(g);
        orders = orders
            .into_iter()
            .flat_map(|prefix| {
                perms.iter().map(move |p| {
                    let mut o = prefix.clone();
                    o.extend_from_slice(p);
                    o
                })
            })
            .collect();
    }
    Some(orders)
}
