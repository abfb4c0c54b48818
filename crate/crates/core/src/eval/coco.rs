//! COCO-style JSON: ground-truth datasets and detection result lists.
//!
//! Unknown fields are tolerated since real COCO files carry plenty of them.

use serde::{Deserialize, Serialize};

use super::{BBox, GroundTruth, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

/// One entry of a detection results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn bbox(b: [f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[2], b[3])
}

fn raw(b: &BBox) -> [f64; 4] {
    [b.x, b.y, b.w, b.h]
}

impl CocoDataset {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: bbox(a.bbox),
            })
            .collect()
    }

    pub fn image(&self, id: u64) -> Option<&CocoImage> {
        self.images.iter().find(|i| i.id == id)
    }
}

impl From<&GroundTruth> for CocoAnnotation {
    fn from(g: &GroundTruth) -> Self {
        CocoAnnotation {
            id: None,
            image_id: g.image_id,
            category_id: g.category_id,
            bbox: raw(&g.bbox),
        }
    }
}

impl From<&CocoResult> for Prediction {
    fn from(r: &CocoResult) -> Self {
        Prediction {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox: bbox(r.bbox),
            score: r.score,
        }
    }
}

impl From<&Prediction> for CocoResult {
    fn from(p: &Prediction) -> Self {
        CocoResult {
            image_id: p.image_id,
            category_id: p.category_id,
            bbox: raw(&p.bbox),
            score: p.score,
        }
    }
}

pub fn parse_results(text: &str) -> serde_json::Result<Vec<Prediction>> {
    let raw: Vec<CocoResult> = serde_json::from_str(text)?;
    Ok(raw.iter().map(Prediction::from).collect())
}
