//! Overlapping tile plans for large images.
//!
//! Tile origins sit at multiples of `tile - overlap` along each axis. When
//! the next aligned tile would run past the edge, a final tile is placed
//! flush with the edge instead. Images smaller than a tile get one tile the
//! size of the image on that axis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{iou, BBox, CocoAnnotation, CocoDataset, CocoImage, GroundTruth, Prediction};
use crate::exec::Execution;

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("overlap {overlap} must be smaller than the tile ({tile_w}x{tile_h})")]
    OverlapTooLarge {
        overlap: u32,
        tile_w: u32,
        tile_h: u32,
    },
    #[error("image and tile dimensions must be at least 1")]
    EmptyDimension,
    #[error("predictions reference unknown tile {0}")]
    UnknownTile(usize),
    #[error("retention {0} must lie in (0, 1]")]
    Retention(f64),
    #[error("NMS IoU {0} must lie in (0, 1]")]
    NmsIou(f64),
    #[error("annotation refers to image {0}, which the dataset does not list")]
    UnknownImage(u64),
    #[error("result refers to tile image {0}, which the manifest does not list")]
    UnknownTileImage(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    pub x0: u32,
    pub y0: u32,
}

/// Tiles sorted by `(y0, x0)` with ids in that order. `tile_w`/`tile_h` are
/// the effective sizes after clamping to the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub image_w: u32,
    pub image_h: u32,
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap: u32,
    pub tiles: Vec<Tile>,
}

fn origins(image: u32, tile: u32, overlap: u32) -> Vec<u32> {
    if tile >= image {
        return vec![0];
    }
    let step = tile - overlap;
    let mut out = Vec::new();
    let mut x = 0;
    while x + tile <= image {
        out.push(x);
        x += step;
    }
    let last = image - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn plan_tiles(
    image_w: u32,
    image_h: u32,
    tile_w: u32,
    tile_h: u32,
    overlap: u32,
) -> Result<TilePlan, TileError> {
    if image_w == 0 || image_h == 0 || tile_w == 0 || tile_h == 0 {
        return Err(TileError::EmptyDimension);
    }
    if overlap >= tile_w.min(tile_h) {
        return Err(TileError::OverlapTooLarge {
            overlap,
            tile_w,
            tile_h,
        });
    }
    let tw = tile_w.min(image_w);
    let th = tile_h.min(image_h);
    let xs = origins(image_w, tw, overlap);
    let ys = origins(image_h, th, overlap);
    let tiles = ys
        .iter()
        .flat_map(|&y0| xs.iter().map(move |&x0| (x0, y0)))
        .enumerate()
        .map(|(id, (x0, y0))| Tile { id, x0, y0 })
        .collect();
    Ok(TilePlan {
        image_w,
        image_h,
        tile_w: tw,
        tile_h: th,
        overlap,
        tiles,
    })
}

impl TilePlan {
    pub fn tile_box(&self, tile: &Tile) -> BBox {
        BBox::new(
            f64::from(tile.x0),
            f64::from(tile.y0),
            f64::from(self.tile_w),
            f64::from(self.tile_h),
        )
    }

    pub fn tile(&self, id: usize) -> Option<&Tile> {
        self.tiles.get(id).filter(|t| t.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tile plan serializes")
    }
}

/// Ground truth of one tile, in tile-local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TileAnnotations {
    pub tile: Tile,
    pub gts: Vec<GroundTruth>,
}

/// Clips every box to every tile; keeps the clipped box when it retains at
/// least `retention` of the original area.
pub fn remap_ground_truth(
    gts: &[GroundTruth],
    plan: &TilePlan,
    retention: f64,
) -> Result<Vec<TileAnnotations>, TileError> {
    remap_ground_truth_with(gts, plan, retention, Execution::default())
}

pub fn remap_ground_truth_with(
    gts: &[GroundTruth],
    plan: &TilePlan,
    retention: f64,
    exec: Execution,
) -> Result<Vec<TileAnnotations>, TileError> {
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(TileError::Retention(retention));
    }
    Ok(exec.map(&plan.tiles, |tile| {
        let rect = plan.tile_box(tile);
        let (dx, dy) = (-rect.x, -rect.y);
        let gts = gts
            .iter()
            .filter_map(|g| {
                let clipped = g.bbox.intersect(&rect)?;
                (clipped.area() / g.bbox.area() >= retention).then(|| GroundTruth {
                    bbox: clipped.translate(dx, dy),
                    ..*g
                })
            })
            .collect();
        TileAnnotations { tile: *tile, gts }
    }))
}

/// Greedy NMS within each category; keeps boxes in descending score order
/// (ties by input position) and drops any box whose IoU with a kept box
/// exceeds `nms_iou`.
pub fn nms(preds: &[Prediction], nms_iou: f64) -> Vec<Prediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let p = &preds[i];
        let suppressed = kept.iter().any(|&k| {
            preds[k].category_id == p.category_id
                && preds[k].image_id == p.image_id
                && iou(&preds[k].bbox, &p.bbox) > nms_iou
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| preds[i]).collect()
}

/// Moves per-tile predictions back to image coordinates and suppresses
/// cross-tile duplicates.
pub fn merge_predictions(
    per_tile: &BTreeMap<usize, Vec<Prediction>>,
    plan: &TilePlan,
    nms_iou: f64,
) -> Result<Vec<Prediction>, TileError> {
    if !(nms_iou > 0.0 && nms_iou <= 1.0) {
        return Err(TileError::NmsIou(nms_iou));
    }
    let mut all = Vec::new();
    for (&id, preds) in per_tile {
        let tile = plan.tile(id).ok_or(TileError::UnknownTile(id))?;
        let (dx, dy) = (f64::from(tile.x0), f64::from(tile.y0));
        all.extend(preds.iter().map(|p| Prediction {
            bbox: p.bbox.translate(dx, dy),
            ..*p
        }));
    }
    Ok(nms(&all, nms_iou))
}

/// One tile of one source image, written as its own COCO file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTile {
    /// Image id used inside the tile's COCO file and in detections on it.
    pub tile_image_id: u64,
    pub image_id: u64,
    pub tile_id: usize,
    pub x0: u32,
    pub y0: u32,
    pub file: String,
}

/// Links tile files back to their source images and origins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap: u32,
    pub retention: f64,
    pub plans: BTreeMap<u64, TilePlan>,
    pub tiles: Vec<ManifestTile>,
}

impl TileManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiledDataset {
    pub manifest: TileManifest,
    /// `(file name, contents)` in manifest order.
    pub files: Vec<(String, CocoDataset)>,
}

/// Plans every image of `dataset` and remaps its annotations into one COCO
/// file per tile. Tile image ids are assigned from 1 in (image id, tile id) order.
pub fn tile_dataset(
    dataset: &CocoDataset,
    tile_w: u32,
    tile_h: u32,
    overlap: u32,
    retention: f64,
) -> Result<TiledDataset, TileError> {
    let mut images: Vec<&CocoImage> = dataset.images.iter().collect();
    images.sort_by_key(|i| i.id);
    let gts = dataset.ground_truth();
    if let Some(g) = gts.iter().find(|g| dataset.image(g.image_id).is_none()) {
        return Err(TileError::UnknownImage(g.image_id));
    }

    let mut plans = BTreeMap::new();
    let mut tiles = Vec::new();
    let mut files = Vec::new();
    for image in images {
        let plan = plan_tiles(image.width, image.height, tile_w, tile_h, overlap)?;
        let own: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| g.image_id == image.id)
            .copied()
            .collect();
        for remapped in remap_ground_truth(&own, &plan, retention)? {
            let tile = remapped.tile;
            let tile_image_id = tiles.len() as u64 + 1;
            let file = format!("image{}_tile{}.json", image.id, tile.id);
            let annotations = remapped
                .gts
                .iter()
                .enumerate()
                .map(|(i, g)| CocoAnnotation {
                    id: Some(i as u64 + 1),
                    image_id: tile_image_id,
                    ..CocoAnnotation::from(g)
                })
                .collect();
            let coco = CocoDataset {
                images: vec![CocoImage {
                    id: tile_image_id,
                    width: plan.tile_w,
                    height: plan.tile_h,
                    file_name: image
                        .file_name
                        .as_ref()
                        .map(|f| format!("{f}@{},{}", tile.x0, tile.y0)),
                }],
                annotations,
                categories: dataset.categories.clone(),
            };
            tiles.push(ManifestTile {
                tile_image_id,
                image_id: image.id,
                tile_id: tile.id,
                x0: tile.x0,
                y0: tile.y0,
                file: file.clone(),
            });
            files.push((file, coco));
        }
        plans.insert(image.id, plan);
    }
    Ok(TiledDataset {
        manifest: TileManifest {
            tile_w,
            tile_h,
            overlap,
            retention,
            plans,
            tiles,
        },
        files,
    })
}

/// Maps detections made on tile images back to their source images and
/// suppresses cross-tile duplicates. Output is grouped by source image id.
pub fn merge_tile_results(
    manifest: &TileManifest,
    preds: &[Prediction],
    nms_iou: f64,
) -> Result<Vec<Prediction>, TileError> {
    let by_tile_image: BTreeMap<u64, &ManifestTile> = manifest
        .tiles
        .iter()
        .map(|t| (t.tile_image_id, t))
        .collect();
    let mut per_image: BTreeMap<u64, BTreeMap<usize, Vec<Prediction>>> = BTreeMap::new();
    for p in preds {
        let t = by_tile_image
            .get(&p.image_id)
            .ok_or(TileError::UnknownTileImage(p.image_id))?;
        per_image
            .entry(t.image_id)
            .or_default()
            .entry(t.tile_id)
            .or_default()
            .push(Prediction {
                image_id: t.image_id,
                ..*p
            });
    }
    let mut out = Vec::new();
    for (image_id, per_tile) in &per_image {
        let plan = manifest
            .plans
            .get(image_id)
            .ok_or(TileError::UnknownImage(*image_id))?;
        out.extend(merge_predictions(per_tile, plan, nms_iou)?);
    }
    Ok(out)
}
