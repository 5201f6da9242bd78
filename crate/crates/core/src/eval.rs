//! Detection-style retrieval evaluation: IoU matching, AP@k, mAP@k and
//! prec@k at several IoU thresholds, plus an error decomposition that
//! splits the AP shortfall into ordering, localisation and background
//! components.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const LOW_IOU: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("box has non-positive extent: {0:?}")]
    NonPositiveExtent(BBox),
    #[error("query {0:?} has results but no ground truth entry")]
    UnknownQuery(String),
    #[error("duplicate ground truth region for query {query:?} in image {image_id}")]
    DuplicateRegion { query: String, image_id: u32 },
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Pixel box with top-left origin, serialised as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    pub fn has_positive_extent(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn within(&self, width: f32, height: f32) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, EvalError> {
    for bx in [a, b] {
        if !bx.has_positive_extent() {
            return Err(EvalError::NonPositiveExtent(*bx));
        }
    }
    let ix = ((a.x + a.w).min(b.x + b.w) as f64 - a.x.max(b.x) as f64).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) as f64 - a.y.max(b.y) as f64).max(0.0);
    let inter = ix * iy;
    Ok(inter / (a.area() + b.area() - inter))
}

/// A returned instance, reduced to what matching needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtRegion {
    pub image_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Positive regions per query. Queries may have no positives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    queries: BTreeMap<String, Vec<GtRegion>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtLine {
    query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<u32>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a query, possibly without positives.
    pub fn add_query(&mut self, query: &str) {
        self.queries.entry(query.to_string()).or_default();
    }

    pub fn add(&mut self, query: &str, region: GtRegion) -> Result<(), EvalError> {
        if !region.bbox.has_positive_extent() {
            return Err(EvalError::NonPositiveExtent(region.bbox));
        }
        let list = self.queries.entry(query.to_string()).or_default();
        if list.contains(&region) {
            return Err(EvalError::DuplicateRegion {
                query: query.to_string(),
                image_id: region.image_id,
            });
        }
        list.push(region);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&[GtRegion]> {
        self.queries.get(query).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &[GtRegion])> {
        self.queries.iter().map(|(q, r)| (q.as_str(), r.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// One JSON object per line: `{"query", "image_id", "box": [x, y, w, h]}`.
    /// A line without `image_id` declares a query with no positives.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, EvalError> {
        let mut gt = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: GtLine =
                serde_json::from_str(&line).map_err(|source| EvalError::Parse { line: i + 1, source })?;
            match (parsed.image_id, parsed.bbox) {
                (Some(image_id), Some(bbox)) => gt.add(&parsed.query, GtRegion { image_id, bbox })?,
                _ => gt.add_query(&parsed.query),
            }
        }
        Ok(gt)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), EvalError> {
        for (q, regions) in &self.queries {
            if regions.is_empty() {
                let line = GtLine {
                    query: q.clone(),
                    image_id: None,
                    bbox: None,
                };
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
            }
            for r in regions {
                let line = GtLine {
                    query: q.clone(),
                    image_id: Some(r.image_id),
                    bbox: Some(r.bbox),
                };
                writeln!(out, "{}", serde_json::to_string(&line)?)?;
            }
        }
        Ok(())
    }
}

/// Outcome of matching one ranked hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    TruePositive,
    /// False positive in an image that does contain ground truth.
    IouFailure,
    /// False positive in an image with no ground truth for the query.
    Background,
}

impl MatchOutcome {
    pub fn is_tp(self) -> bool {
        self == Self::TruePositive
    }
}

/// Greedy matching in rank order: each hit takes the unmatched ground-truth
/// box in its image with the highest IoU, provided it reaches `threshold`.
pub fn match_detections(hits: &[Detection], gt: &[GtRegion], threshold: f64) -> Vec<MatchOutcome> {
    let mut used = vec![false; gt.len()];
    let gt_images: HashSet<u32> = gt.iter().map(|g| g.image_id).collect();
    hits.iter()
        .map(|hit| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gt.iter().enumerate() {
                if used[gi] || g.image_id != hit.image_id {
                    continue;
                }
                let v = iou(&hit.bbox, &g.bbox).unwrap_or(0.0);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    MatchOutcome::TruePositive
                }
                None if gt_images.contains(&hit.image_id) => MatchOutcome::IouFailure,
                None => MatchOutcome::Background,
            }
        })
        .collect()
}

/// `sum_{r <= k} precision(r) * rel(r) / min(k, gt_count)`; zero when there
/// is no ground truth.
pub fn average_precision_at_k(flags: &[bool], gt_count: usize, k: usize) -> f64 {
    let denom = k.min(gt_count);
    if denom == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut acc = 0.0;
    for (r, &rel) in flags.iter().take(k).enumerate() {
        if rel {
            tp += 1;
            acc += tp as f64 / (r + 1) as f64;
        }
    }
    acc / denom as f64
}

/// True positives among the top `k` over `min(k, hits returned)`.
pub fn precision_at_k(flags: &[bool], k: usize) -> f64 {
    let n = flags.len().min(k);
    if n == 0 {
        return 0.0;
    }
    flags.iter().take(k).filter(|&&f| f).count() as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub iou_thresholds: Vec<f64>,
    pub low_iou: f64,
}

impl EvalConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            iou_thresholds: DEFAULT_THRESHOLDS.to_vec(),
            low_iou: LOW_IOU,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.k == 0 {
            return Err(EvalError::Config("k must be >= 1".into()));
        }
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::Config("at least one IoU threshold required".into()));
        }
        for &t in self.iou_thresholds.iter().chain(std::iter::once(&self.low_iou)) {
            if !(t > 0.0 && t <= 1.0) {
                return Err(EvalError::Config(format!("threshold {t} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub map: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub gt_count: usize,
    pub hits: usize,
    /// AP@k per threshold, in config order.
    pub ap: Vec<f64>,
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub per_threshold: Vec<ThresholdMetrics>,
    pub map_all: f64,
    pub prec_all: f64,
    pub per_query: Vec<QueryMetrics>,
    /// Queries without positives; they count as AP 0.
    pub zero_gt_queries: Vec<String>,
}

impl EvalReport {
    /// Aggregates per-threshold values: `map_all` and `prec_all` are their
    /// arithmetic means.
    pub fn from_thresholds(k: usize, per_threshold: Vec<ThresholdMetrics>) -> Self {
        let n = per_threshold.len().max(1) as f64;
        let map_all = per_threshold.iter().map(|t| t.map).sum::<f64>() / n;
        let prec_all = per_threshold.iter().map(|t| t.precision).sum::<f64>() / n;
        Self {
            k,
            per_threshold,
            map_all,
            prec_all,
            per_query: Vec::new(),
            zero_gt_queries: Vec::new(),
        }
    }

    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|t| (t.threshold - threshold).abs() < 1e-9)
            .map(|t| t.map)
    }

    /// Long-format CSV: `query,threshold,ap,precision`, per query then the
    /// aggregate rows under query `*`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "query,threshold,ap,precision")?;
        for q in &self.per_query {
            for (i, t) in self.per_threshold.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{:.6},{:.6}",
                    csv_field(&q.query),
                    t.threshold,
                    q.ap[i],
                    q.precision[i]
                )?;
            }
        }
        for t in &self.per_threshold {
            writeln!(out, "*,{},{:.6},{:.6}", t.threshold, t.map, t.precision)?;
        }
        writeln!(out, "*,all,{:.6},{:.6}", self.map_all, self.prec_all)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// mAP@k and prec@k per threshold over every ground-truth query; queries
/// without results score zero.
pub fn map_and_precision(
    results: &BTreeMap<String, Vec<Detection>>,
    gt: &GroundTruthSet,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    if let Some(q) = results.keys().find(|q| gt.get(q).is_none()) {
        return Err(EvalError::UnknownQuery(q.clone()));
    }
    let nt = config.iou_thresholds.len();
    let mut per_query = Vec::with_capacity(gt.len());
    let mut zero_gt = Vec::new();
    for (query, regions) in gt.queries() {
        let hits = results.get(query).map(Vec::as_slice).unwrap_or(&[]);
        let top = &hits[..hits.len().min(config.k)];
        let mut ap = Vec::with_capacity(nt);
        let mut precision = Vec::with_capacity(nt);
        for &t in &config.iou_thresholds {
            let flags: Vec<bool> = match_detections(top, regions, t).iter().map(|o| o.is_tp()).collect();
            ap.push(average_precision_at_k(&flags, regions.len(), config.k));
            precision.push(precision_at_k(&flags, config.k));
        }
        if regions.is_empty() {
            zero_gt.push(query.to_string());
        }
        per_query.push(QueryMetrics {
            query: query.to_string(),
            gt_count: regions.len(),
            hits: top.len(),
            ap,
            precision,
        });
    }
    let nq = per_query.len().max(1) as f64;
    let per_threshold = config
        .iou_thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| ThresholdMetrics {
            threshold: t,
            map: per_query.iter().map(|q| q.ap[i]).sum::<f64>() / nq,
            precision: per_query.iter().map(|q| q.precision[i]).sum::<f64>() / nq,
        })
        .collect();
    let mut report = EvalReport::from_thresholds(config.k, per_threshold);
    report.per_query = per_query;
    report.zero_gt_queries = zero_gt;
    Ok(report)
}

/// AP and the components of its shortfall; the four fields sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub ap: f64,
    pub e_ord: f64,
    pub e_iou: f64,
    pub e_bg: f64,
}

/// Decomposes `1 - AP@k`:
/// `e_ord` is the gain from stably moving true positives ahead of false
/// positives, `e_iou` the further gain from re-matching that list at
/// `low_iou`, and `e_bg` whatever remains.
pub fn error_analysis(hits: &[Detection], gt: &[GtRegion], threshold: f64, k: usize, low_iou: f64) -> ErrorBreakdown {
    let top = &hits[..hits.len().min(k)];
    let outcomes = match_detections(top, gt, threshold);
    let flags: Vec<bool> = outcomes.iter().map(|o| o.is_tp()).collect();
    let ap = average_precision_at_k(&flags, gt.len(), k);

    let mut reordered: Vec<Detection> = Vec::with_capacity(top.len());
    reordered.extend(top.iter().zip(&flags).filter(|(_, &f)| f).map(|(d, _)| *d));
    reordered.extend(top.iter().zip(&flags).filter(|(_, &f)| !f).map(|(d, _)| *d));
    let mut sorted_flags = flags.clone();
    sorted_flags.sort_by(|a, b| b.cmp(a));
    let ap_ord = average_precision_at_k(&sorted_flags, gt.len(), k);

    let relaxed: Vec<bool> = match_detections(&reordered, gt, low_iou)
        .iter()
        .map(|o| o.is_tp())
        .collect();
    let ap_iou = average_precision_at_k(&relaxed, gt.len(), k);

    let e_ord = ap_ord - ap;
    let e_iou = ap_iou - (ap + e_ord);
    let e_bg = 1.0 - (ap + e_ord + e_iou);
    ErrorBreakdown { ap, e_ord, e_iou, e_bg }
}
