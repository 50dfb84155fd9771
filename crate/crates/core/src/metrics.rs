//! Classification metrics and the localization curve used for evaluation.
//!
//! Image-level scores come from the heatmap maximum. Localization is
//! reported as fracture recall against the mean false-positive area ratio
//! per image, with an ambiguity band around each annotation excluded from
//! the false-positive count.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::losses::cell_center;
use crate::tensor::Tensor;
use std::fmt::Write as _;

/// Image-level abnormality score: the heatmap maximum.
pub fn image_score(heatmap: &Tensor<f32>) -> Result<f32> {
    let data = heatmap.data();
    if data.is_empty() {
        return Err(Error::Contract("empty heatmap has no score".into()));
    }
    Ok(data.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)))
}

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "length",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank statistic: the probability that a
/// random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {pos} positive / {neg} negative"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));
    // Average rank within each tie group (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision over the descending-score sweep, with all tied scores
/// entering as one group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _neg) = split_classes(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

// ---------------------------------------------------------------------------
// Modified FROC
// ---------------------------------------------------------------------------

/// One image prepared for the localization sweep: the heatmap value at each
/// annotation's nearest cell, and the negative-region cells (farther than
/// the ambiguity radius from every annotation). Cells inside the ambiguity
/// band are in neither set and never counted.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    point_vals: Vec<f32>,
    neg_vals: Vec<f32>,
    pub label: bool,
}

impl EvalRecord {
    /// `points` are in crop pixel coordinates; the heatmap lattice sits at
    /// `stride` over the same crop. `ambiguous_radius_px` is measured in
    /// crop pixels between cell centers and annotation points.
    pub fn new(
        heatmap: &Tensor<f32>,
        points: &[Point],
        stride: usize,
        ambiguous_radius_px: f64,
    ) -> Result<EvalRecord> {
        let s = heatmap.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::dim("heatmap", format!("expected (1,1,h,w), got {s}")));
        }
        if s.h == 0 || s.w == 0 {
            return Err(Error::Contract("empty heatmap".into()));
        }
        if stride == 0 {
            return Err(Error::Contract("stride must be positive".into()));
        }
        if ambiguous_radius_px < 0.0 {
            return Err(Error::Config("ambiguity radius must be non-negative".into()));
        }
        let data = heatmap.data();
        let sf = stride as f64;
        let half = (sf - 1.0) / 2.0;
        let nearest = |v: f64, len: usize| -> usize {
            (((v - half) / sf).round().max(0.0) as usize).min(len - 1)
        };
        let point_vals: Vec<f32> =
            points.iter().map(|p| data[nearest(p.y, s.h) * s.w + nearest(p.x, s.w)]).collect();
        let r2 = ambiguous_radius_px * ambiguous_radius_px;
        let mut neg_vals = Vec::new();
        for i in 0..s.h {
            for j in 0..s.w {
                let c = cell_center(i, j, stride);
                let near = points.iter().any(|p| (p.x - c.x).powi(2) + (p.y - c.y).powi(2) <= r2);
                if !near {
                    neg_vals.push(data[i * s.w + j]);
                }
            }
        }
        Ok(EvalRecord { point_vals, neg_vals, label: !points.is_empty() })
    }

    pub fn heat_score(&self) -> f32 {
        // Convenience for tests; evaluation uses image_score on the full map.
        self.neg_vals.iter().chain(self.point_vals.iter()).fold(f32::NEG_INFINITY, |a, &b| a.max(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrocPoint {
    pub threshold: f64,
    pub recall: f64,
    pub fp_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct FrocCurve {
    /// Sorted by descending threshold; recall and FP ratio are then
    /// non-decreasing along the vector.
    pub points: Vec<FrocPoint>,
    /// Images with an empty negative region, excluded from the FP mean.
    pub skipped_images: usize,
}

/// Sweep the given thresholds (deduplicated, descending). Per threshold:
/// recall is the fraction of all annotation points across the dataset whose
/// nearest-cell value is at or above it; the FP ratio is the mean over
/// images of the fraction of negative-region cells at or above it.
pub fn modified_froc(records: &[EvalRecord], thresholds: &[f64]) -> Result<FrocCurve> {
    if records.is_empty() {
        return Err(Error::Metric("no records to evaluate".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Contract("threshold list is empty".into()));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Contract("thresholds must lie in [0, 1]".into()));
    }
    let total_points: usize = records.iter().map(|r| r.point_vals.len()).sum();
    if total_points == 0 {
        return Err(Error::Metric("no annotation points in any record".into()));
    }
    let mut ts: Vec<f64> = thresholds.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let counted = records.iter().filter(|r| !r.neg_vals.is_empty()).count();
    let skipped = records.len() - counted;
    if counted == 0 {
        return Err(Error::Metric("every image has an empty negative region".into()));
    }
    let mut points = Vec::with_capacity(ts.len());
    for &t in &ts {
        let tf = t as f32;
        let recalled: usize =
            records.iter().map(|r| r.point_vals.iter().filter(|&&v| v >= tf).count()).sum();
        let mut fp_sum = 0.0f64;
        for r in records {
            if r.neg_vals.is_empty() {
                continue;
            }
            let hits = r.neg_vals.iter().filter(|&&v| v >= tf).count();
            fp_sum += hits as f64 / r.neg_vals.len() as f64;
        }
        points.push(FrocPoint {
            threshold: t,
            recall: recalled as f64 / total_points as f64,
            fp_ratio: fp_sum / counted as f64,
        });
    }
    Ok(FrocCurve { points, skipped_images: skipped })
}

/// Recall at a target FP ratio, linearly interpolated along the curve and
/// clamped at its endpoints.
pub fn recall_at_fp(curve: &FrocCurve, fp_target: f64) -> f64 {
    let pts = &curve.points;
    assert!(!pts.is_empty(), "curve has no points");
    // Points are in descending-threshold order, so fp is non-decreasing.
    if fp_target <= pts[0].fp_ratio {
        return pts[0].recall;
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if fp_target <= b.fp_ratio {
            if b.fp_ratio == a.fp_ratio {
                return b.recall;
            }
            let t = (fp_target - a.fp_ratio) / (b.fp_ratio - a.fp_ratio);
            return a.recall + t * (b.recall - a.recall);
        }
    }
    pts[pts.len() - 1].recall
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub auc: f64,
    pub ap: f64,
    pub recall_fp1: f64,
    pub recall_fp10: f64,
    pub curve: FrocCurve,
}

/// Compute every reported metric from prepared records. Image-level scores
/// are the per-record heatmap maxima provided in `scores` (kept separate so
/// the caller scores the full map, not just counted cells).
pub fn evaluate(
    records: &[EvalRecord],
    scores: &[f64],
    thresholds: &[f64],
) -> Result<MetricsReport> {
    if scores.len() != records.len() {
        return Err(Error::dim(
            "records",
            format!("{} scores vs {} records", scores.len(), records.len()),
        ));
    }
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let auc = auc(scores, &labels)?;
    let ap = average_precision(scores, &labels)?;
    let curve = modified_froc(records, thresholds)?;
    Ok(MetricsReport {
        auc,
        ap,
        recall_fp1: recall_at_fp(&curve, 0.01),
        recall_fp10: recall_at_fp(&curve, 0.10),
        curve,
    })
}

impl MetricsReport {
    /// Tab-delimited table of the four headline metrics followed by the
    /// full curve, one `threshold recall fp_ratio` row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "auc\t{:.6}", self.auc);
        let _ = writeln!(s, "ap\t{:.6}", self.ap);
        let _ = writeln!(s, "recall_fp1\t{:.6}", self.recall_fp1);
        let _ = writeln!(s, "recall_fp10\t{:.6}", self.recall_fp10);
        if self.curve.skipped_images > 0 {
            let _ = writeln!(
                s,
                "# warning: {} image(s) with empty negative region excluded from FP mean",
                self.curve.skipped_images
            );
        }
        let _ = writeln!(s, "# froc: threshold\trecall\tfp_ratio");
        for p in &self.curve.points {
            let _ = writeln!(s, "{:.6}\t{:.6}\t{:.6}", p.threshold, p.recall, p.fp_ratio);
        }
        s
    }
}
