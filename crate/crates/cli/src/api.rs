//! JSON bodies shared by the HTTP service and `search --json`, so both
//! print hits field for field the same way.

use ovis_core::eval::BBox;
use ovis_core::index::{Hit, InstanceRef};
use ovis_core::store::ImageRecord;
use ovis_core::{QueryResult, SimilarityMeasure};
use serde::{Deserialize, Serialize};

/// Scores go out with 6 decimal digits.
pub fn round_score(score: f64) -> f64 {
    (score * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiHit {
    pub rank: usize,
    pub instance_id: u32,
    pub image_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl From<&Hit> for ApiHit {
    fn from(h: &Hit) -> Self {
        Self {
            rank: h.rank,
            instance_id: h.instance_id,
            image_id: h.image_id,
            bbox: h.bbox,
            score: round_score(h.score),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query: String,
    pub measure: String,
    pub tokens: Vec<String>,
    /// Some word of the query fell back to `[UNK]`.
    pub unk_flag: bool,
    /// Fewer than k instances exist.
    pub truncated: bool,
    pub hits: Vec<ApiHit>,
}

impl SearchResponse {
    pub fn new(result: &QueryResult, measure: SimilarityMeasure) -> Self {
        Self {
            query: result.query.clone(),
            measure: measure.name().to_string(),
            tokens: result.tokens.clone(),
            unk_flag: result.unk_flag,
            truncated: result.truncated,
            hits: result.hits.iter().map(ApiHit::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResponse {
    pub instance_id: u32,
    pub image_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f32>,
    /// `/media/{image_id}` when the image has media.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_url: Option<String>,
}

impl InstanceResponse {
    pub fn new(r: &InstanceRef, image: Option<&ImageRecord>) -> Self {
        Self {
            instance_id: r.instance_id,
            image_id: r.image_id,
            bbox: r.bbox,
            width: image.and_then(|i| i.width),
            height: image.and_then(|i| i.height),
            media_url: image
                .and_then(|i| i.media.as_ref())
                .map(|_| format!("/media/{}", r.image_id)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    /// CRC-32 of the checkpoint, 8 hex digits.
    pub index_fingerprint: String,
    pub n_instances: usize,
    pub measures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub fn fingerprint_hex(fp: u32) -> String {
    format!("{fp:08x}")
}
