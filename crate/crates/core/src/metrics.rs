//! Co-saliency evaluation measures and dataset-level reports.
//!
//! Per image: IoU of the map thresholded at λ, MAE of the soft map, the
//! F-measure and enhanced-alignment curves over `n` uniform thresholds in
//! `[0, 1)`, and the structure measure. Dataset aggregates are the success
//! rate (IoU > 0.5), means of IoU / MAE / S-measure, and the maxima of the
//! image-averaged F and E curves. Curve binarization at threshold `t` keeps
//! pixels with `pred > t`.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{list_groups, list_images, stem};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, load_gray, load_mask, write_atomic};
use crate::segmentation::{binarize, BinarySaliencyMap, SoftSaliencyMap};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const PER_IMAGE_CSV: &str = "per_image.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const SUMMARY_JSON: &str = "summary.json";

const EPS: f64 = f64::EPSILON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Threshold for the IoU / success-rate binarization.
    pub lambda: f64,
    pub beta_sq: f64,
    pub n_thresholds: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta_sq: 0.3,
            n_thresholds: 256,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::out_of_range("threshold", self.lambda, "[0, 1]"));
        }
        if !(self.beta_sq.is_finite() && self.beta_sq > 0.0) {
            return Err(Error::Config(format!("beta_sq must be positive, got {}", self.beta_sq)));
        }
        if self.n_thresholds == 0 {
            return Err(Error::Config("n_thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// `k / n` for `k = 0..n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / n as f64).collect()
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction is {}×{}, ground truth {}×{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

/// `|pred ∧ gt| / |pred ∨ gt|`, 1 when both are empty.
pub fn iou(pred: &BinarySaliencyMap, gt: &BinarySaliencyMap) -> Result<f64> {
    same_shape(pred.dim(), gt.dim())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of IoUs strictly above 0.5.
pub fn success_rate(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Validation("success rate of an empty list".into()));
    }
    Ok(ious.iter().filter(|&&v| v > 0.5).count() as f64 / ious.len() as f64)
}

pub fn mae(pred: &SoftSaliencyMap, gt: &BinarySaliencyMap) -> Result<f64> {
    same_shape(pred.dim(), gt.dim())?;
    let n = pred.values().len();
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Per-threshold counts of predicted-positive pixels split by ground truth.
struct ThresholdCounts {
    /// `tp[k]`: foreground pixels with `pred > t_k`.
    tp: Vec<usize>,
    /// `fp[k]`: background pixels with `pred > t_k`.
    fp: Vec<usize>,
    fg: usize,
    total: usize,
}

impl ThresholdCounts {
    fn new(pred: ArrayView2<f64>, gt: ArrayView2<bool>, n: usize) -> Self {
        let thr = thresholds(n);
        // hist[k]: pixels whose largest threshold strictly exceeded is t_k
        let mut fg_hist = vec![0usize; n];
        let mut bg_hist = vec![0usize; n];
        let mut fg = 0;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            fg += g as usize;
            if p <= 0.0 {
                continue;
            }
            let mut bin = ((p * n as f64).floor() as usize).min(n - 1);
            while bin + 1 < n && thr[bin + 1] < p {
                bin += 1;
            }
            while bin > 0 && thr[bin] >= p {
                bin -= 1;
            }
            if g {
                fg_hist[bin] += 1;
            } else {
                bg_hist[bin] += 1;
            }
        }
        let suffix = |h: Vec<usize>| {
            let mut acc = 0;
            let mut out: Vec<usize> = h
                .into_iter()
                .rev()
                .map(|c| {
                    acc += c;
                    acc
                })
                .collect();
            out.reverse();
            out
        };
        Self {
            tp: suffix(fg_hist),
            fp: suffix(bg_hist),
            fg,
            total: pred.len(),
        }
    }
}

fn f_from_counts(tp: usize, fp: usize, fg: usize, beta_sq: f64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if fg == 0 { 0.0 } else { tp as f64 / fg as f64 };
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// Enhanced alignment of a binary prediction with `pos` positives, `tp` of which are foreground.
fn e_from_counts(tp: usize, pos: usize, fg: usize, total: usize) -> f64 {
    let n = total as f64;
    if fg == 0 {
        return 1.0 - pos as f64 / n;
    }
    if fg == total {
        return pos as f64 / n;
    }
    let (mp, mg) = (pos as f64 / n, fg as f64 / n);
    let enhanced = |p: f64, g: f64| {
        let (a, b) = (p - mp, g - mg);
        let xi = 2.0 * a * b / (a * a + b * b);
        (xi + 1.0).powi(2) / 4.0
    };
    let fp = pos - tp;
    let fneg = fg - tp;
    let tn = total - pos - fneg;
    (tp as f64 * enhanced(1.0, 1.0)
        + fp as f64 * enhanced(1.0, 0.0)
        + fneg as f64 * enhanced(0.0, 1.0)
        + tn as f64 * enhanced(0.0, 0.0))
        / n
}

pub fn f_measure_curve(pred: &SoftSaliencyMap, gt: &BinarySaliencyMap, beta_sq: f64, n_thresholds: usize) -> Result<Vec<f64>> {
    same_shape(pred.dim(), gt.dim())?;
    if n_thresholds == 0 {
        return Err(Error::Config("n_thresholds must be positive".into()));
    }
    let c = ThresholdCounts::new(pred.values().view(), gt.values().view(), n_thresholds);
    Ok((0..n_thresholds).map(|k| f_from_counts(c.tp[k], c.fp[k], c.fg, beta_sq)).collect())
}

/// Maximum over thresholds of `(1+β²)PR / (β²P + R)`; 0 when the ground truth is empty.
pub fn max_f_measure(pred: &SoftSaliencyMap, gt: &BinarySaliencyMap, beta_sq: f64, n_thresholds: usize) -> Result<f64> {
    Ok(f_measure_curve(pred, gt, beta_sq, n_thresholds)?.into_iter().fold(0.0, f64::max))
}

pub fn e_measure_curve(pred: &SoftSaliencyMap, gt: &BinarySaliencyMap, n_thresholds: usize) -> Result<Vec<f64>> {
    same_shape(pred.dim(), gt.dim())?;
    if n_thresholds == 0 {
        return Err(Error::Config("n_thresholds must be positive".into()));
    }
    let c = ThresholdCounts::new(pred.values().view(), gt.values().view(), n_thresholds);
    Ok((0..n_thresholds)
        .map(|k| e_from_counts(c.tp[k], c.tp[k] + c.fp[k], c.fg, c.total))
        .collect())
}

pub fn e_measure_max(pred: &SoftSaliencyMap, gt: &BinarySaliencyMap, n_thresholds: usize) -> Result<f64> {
    Ok(e_measure_curve(pred, gt, n_thresholds)?.into_iter().fold(0.0, f64::max))
}

/// Structure measure: `0.5·S_object + 0.5·S_region`, clamped to `[0, 1]`.
pub fn s_measure(pred: &SoftSaliencyMap, gt: &BinarySaliencyMap) -> Result<f64> {
    same_shape(pred.dim(), gt.dim())?;
    let p = pred.values();
    let g = gt.values();
    let fg_ratio = g.iter().filter(|&&v| v).count() as f64 / g.len() as f64;
    let score = if fg_ratio == 0.0 {
        1.0 - p.mean().unwrap_or(0.0)
    } else if fg_ratio == 1.0 {
        p.mean().unwrap_or(0.0)
    } else {
        0.5 * s_object(p.view(), g.view(), fg_ratio) + 0.5 * s_region(p.view(), g.view())
    };
    Ok(score.clamp(0.0, 1.0))
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(p: ArrayView2<f64>, g: ArrayView2<bool>, fg_ratio: f64) -> f64 {
    let fg = p.iter().zip(g.iter()).filter(|(_, &m)| m).map(|(&v, _)| v);
    let bg = p.iter().zip(g.iter()).filter(|(_, &m)| !m).map(|(&v, _)| 1.0 - v);
    fg_ratio * object_score(fg) + (1.0 - fg_ratio) * object_score(bg)
}

/// Split point `(cols_left, rows_top)`: the rounded 1-based foreground centroid.
fn centroid_split(g: ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = g.dim();
    let total = g.iter().filter(|&&v| v).count();
    if total == 0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((y, x), &v) in g.indexed_iter() {
        if v {
            sx += (x + 1) as f64;
            sy += (y + 1) as f64;
        }
    }
    ((sx / total as f64).round() as usize, (sy / total as f64).round() as usize)
}

fn region_ssim(p: ArrayView2<f64>, g: ArrayView2<bool>) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = p.sum() / nf;
    let y = g.iter().filter(|&&v| v).count() as f64 / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&pv, &gv) in p.iter().zip(g.iter()) {
        let dx = pv - x;
        let dy = if gv { 1.0 } else { 0.0 } - y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let norm = nf - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / norm, syy / norm, sxy / norm);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: ArrayView2<f64>, g: ArrayView2<bool>) -> f64 {
    let (h, w) = g.dim();
    let (cx, cy) = centroid_split(g);
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = (cx * (h - cy)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (s![..cy, ..cx], w1),
        (s![..cy, cx..], w2),
        (s![cy.., ..cx], w3),
        (s![cy.., cx..], w4),
    ];
    quads
        .into_iter()
        .map(|(sl, weight)| {
            let (pq, gq) = (p.slice(sl), g.slice(sl));
            if pq.is_empty() {
                0.0
            } else {
                weight * region_ssim(pq, gq)
            }
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub image_id: String,
    pub group: String,
    pub iou: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
    pub flags: Vec<String>,
}

impl PerImageRow {
    pub fn max_f(&self) -> f64 {
        self.f_curve.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_e(&self) -> f64 {
        self.e_curve.iter().cloned().fold(0.0, f64::max)
    }
}

pub const FLAG_EMPTY_GT: &str = "empty-gt";
pub const FLAG_MISSING_PREDICTION: &str = "missing-prediction";
pub const FLAG_RESIZED: &str = "resized-prediction";

/// All per-image measures for one prediction.
pub fn evaluate_image(
    image_id: &str,
    group: &str,
    pred: &SoftSaliencyMap,
    gt: &BinarySaliencyMap,
    cfg: &MetricConfig,
) -> Result<PerImageRow> {
    cfg.validate()?;
    let mut flags = Vec::new();
    if gt.count() == 0 {
        flags.push(FLAG_EMPTY_GT.to_string());
    }
    Ok(PerImageRow {
        image_id: image_id.to_string(),
        group: group.to_string(),
        iou: iou(&binarize(pred, cfg.lambda)?, gt)?,
        mae: mae(pred, gt)?,
        s_measure: s_measure(pred, gt)?,
        f_curve: f_measure_curve(pred, gt, cfg.beta_sq, cfg.n_thresholds)?,
        e_curve: e_measure_curve(pred, gt, cfg.n_thresholds)?,
        flags,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub sr: f64,
    pub iou: f64,
    pub mae: f64,
    pub max_f: f64,
    pub e_max: f64,
    pub s_measure: f64,
}

/// Means of per-image curve maxima, reported alongside the primary aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageMaxMeans {
    pub max_f: f64,
    pub e_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub config: MetricConfig,
    pub per_image: Vec<PerImageRow>,
    pub aggregate: Aggregates,
    pub per_image_max: PerImageMaxMeans,
    pub missing_predictions: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_curve(curves: &[&[f64]]) -> Vec<f64> {
    let len = curves[0].len();
    (0..len).map(|k| mean(curves.iter().map(|c| c[k]))).collect()
}

impl MetricReport {
    /// Aggregates the rows; every aggregate is a deterministic fold in row order.
    pub fn from_rows(per_image: Vec<PerImageRow>, config: MetricConfig, missing_predictions: Vec<String>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Validation("no images to aggregate".into()));
        }
        let len = per_image[0].f_curve.len();
        if per_image.iter().any(|r| r.f_curve.len() != len || r.e_curve.len() != len) {
            return Err(Error::Shape("per-image curves have differing lengths".into()));
        }
        let ious: Vec<f64> = per_image.iter().map(|r| r.iou).collect();
        let f_curves: Vec<&[f64]> = per_image.iter().map(|r| r.f_curve.as_slice()).collect();
        let e_curves: Vec<&[f64]> = per_image.iter().map(|r| r.e_curve.as_slice()).collect();
        let aggregate = Aggregates {
            sr: success_rate(&ious)?,
            iou: mean(ious.iter().copied()),
            mae: mean(per_image.iter().map(|r| r.mae)),
            max_f: mean_curve(&f_curves).into_iter().fold(0.0, f64::max),
            e_max: mean_curve(&e_curves).into_iter().fold(0.0, f64::max),
            s_measure: mean(per_image.iter().map(|r| r.s_measure)),
        };
        let per_image_max = PerImageMaxMeans {
            max_f: mean(per_image.iter().map(PerImageRow::max_f)),
            e_max: mean(per_image.iter().map(PerImageRow::max_e)),
        };
        Ok(Self {
            config,
            per_image,
            aggregate,
            per_image_max,
            missing_predictions,
        })
    }

    pub fn flagged(&self) -> Vec<(String, String, Vec<String>)> {
        self.per_image
            .iter()
            .filter(|r| !r.flags.is_empty())
            .map(|r| (r.group.clone(), r.image_id.clone(), r.flags.clone()))
            .collect()
    }

    pub fn summary_json(&self, run_config: Option<&serde_json::Value>) -> serde_json::Value {
        let flagged: Vec<serde_json::Value> = self
            .flagged()
            .into_iter()
            .map(|(g, id, flags)| serde_json::json!({"group": g, "image_id": id, "flags": flags}))
            .collect();
        let mut v = serde_json::json!({
            "format_version": REPORT_FORMAT_VERSION,
            "config": self.config,
            "image_count": self.per_image.len(),
            "aggregates": self.aggregate,
            "per_image_max_mean": self.per_image_max,
            "missing_predictions": self.missing_predictions,
            "flagged_images": flagged,
        });
        if let Some(rc) = run_config {
            v["run_config"] = rc.clone();
        }
        v
    }

    /// Writes `per_image.csv`, `curves.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path, run_config: Option<&serde_json::Value>) -> Result<()> {
        let mut per = csv::Writer::from_writer(Vec::new());
        per.write_record(["image_id", "group", "iou", "mae", "s_measure"])?;
        for r in &self.per_image {
            per.write_record([
                r.image_id.clone(),
                r.group.clone(),
                r.iou.to_string(),
                r.mae.to_string(),
                r.s_measure.to_string(),
            ])?;
        }
        write_atomic(&dir.join(PER_IMAGE_CSV), &per.into_inner().map_err(|e| Error::io("csv", e.into_error()))?)?;

        let n = self.config.n_thresholds;
        let mut curves = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = ["image_id".to_string(), "group".to_string()]
            .into_iter()
            .chain((0..n).map(|k| format!("f@{k}")))
            .chain((0..n).map(|k| format!("e@{k}")))
            .collect();
        curves.write_record(&header)?;
        for r in &self.per_image {
            let rec: Vec<String> = [r.image_id.clone(), r.group.clone()]
                .into_iter()
                .chain(r.f_curve.iter().map(f64::to_string))
                .chain(r.e_curve.iter().map(f64::to_string))
                .collect();
            curves.write_record(&rec)?;
        }
        write_atomic(&dir.join(CURVES_CSV), &curves.into_inner().map_err(|e| Error::io("csv", e.into_error()))?)?;

        let summary = serde_json::to_string_pretty(&self.summary_json(run_config))?;
        write_atomic(&dir.join(SUMMARY_JSON), summary.as_bytes())
    }
}

/// Reads the rows back from a report directory written by [`MetricReport::write`].
pub fn read_rows(dir: &Path) -> Result<Vec<PerImageRow>> {
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Validation(format!("bad number `{s}` in report: {e}")))
    };
    let mut rows = Vec::new();
    let mut per = csv::Reader::from_path(dir.join(PER_IMAGE_CSV))?;
    for rec in per.records() {
        let rec = rec?;
        rows.push(PerImageRow {
            image_id: rec[0].to_string(),
            group: rec[1].to_string(),
            iou: parse(&rec[2])?,
            mae: parse(&rec[3])?,
            s_measure: parse(&rec[4])?,
            f_curve: vec![],
            e_curve: vec![],
            flags: vec![],
        });
    }
    let mut curves = csv::Reader::from_path(dir.join(CURVES_CSV))?;
    for (row, rec) in rows.iter_mut().zip(curves.records()) {
        let rec = rec?;
        if rec[0] != row.image_id || rec[1] != row.group {
            return Err(Error::Validation(format!("curves row for {}/{} out of order", &rec[1], &rec[0])));
        }
        let values = rec.iter().skip(2).map(parse).collect::<Result<Vec<_>>>()?;
        let n = values.len() / 2;
        row.f_curve = values[..n].to_vec();
        row.e_curve = values[n..].to_vec();
    }
    Ok(rows)
}

/// Scores a prediction tree against a ground-truth tree.
///
/// Predictions are grayscale PNGs at `pred_root/<group>/<stem>.png`. A missing
/// prediction is scored as all-zero and flagged; predictions whose size differs
/// from the mask are bilinearly resized to it.
pub fn evaluate_dataset(pred_root: &Path, gt_root: &Path, cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for group_dir in list_groups(gt_root)? {
        let group = group_dir.file_name().unwrap().to_string_lossy().into_owned();
        for mask_path in list_images(&group_dir)? {
            let id = stem(&mask_path.file_name().unwrap().to_string_lossy());
            let pred_path = pred_root.join(&group).join(format!("{id}.png"));
            jobs.push((group.clone(), id, mask_path, pred_path));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Validation(format!("no ground-truth masks under {}", gt_root.display())));
    }
    let rows: Vec<(PerImageRow, bool)> = jobs
        .par_iter()
        .map(|(group, id, mask_path, pred_path)| -> Result<(PerImageRow, bool)> {
            let gt = BinarySaliencyMap::new(load_mask(mask_path)?);
            let (h, w) = gt.dim();
            let mut extra = Vec::new();
            let missing = !pred_path.is_file();
            let pred = if missing {
                extra.push(FLAG_MISSING_PREDICTION.to_string());
                Array2::zeros((h, w))
            } else {
                let p = load_gray(pred_path)?;
                if p.dim() != (h, w) {
                    extra.push(FLAG_RESIZED.to_string());
                    bilinear_resize(p.view(), h, w).mapv(|v| v.clamp(0.0, 1.0))
                } else {
                    p
                }
            };
            let mut row = evaluate_image(id, group, &SoftSaliencyMap::new(pred)?, &gt, cfg)?;
            row.flags.extend(extra);
            Ok((row, missing))
        })
        .collect::<Result<_>>()?;
    let missing = rows
        .iter()
        .filter(|(_, m)| *m)
        .map(|(r, _)| format!("{}/{}", r.group, r.image_id))
        .collect();
    MetricReport::from_rows(rows.into_iter().map(|(r, _)| r).collect(), cfg.clone(), missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bin(v: Array2<bool>) -> BinarySaliencyMap {
        BinarySaliencyMap::new(v)
    }

    fn soft(v: Array2<f64>) -> SoftSaliencyMap {
        SoftSaliencyMap::new(v).unwrap()
    }

    fn as_soft(b: &BinarySaliencyMap) -> SoftSaliencyMap {
        soft(b.values().mapv(|v| if v { 1.0 } else { 0.0 }))
    }

    fn left_half() -> BinarySaliencyMap {
        bin(Array2::from_shape_fn((4, 4), |(_, x)| x < 2))
    }

    fn top_half() -> BinarySaliencyMap {
        bin(Array2::from_shape_fn((4, 4), |(y, _)| y < 2))
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&top_half(), &top_half()).unwrap(), 1.0);
        let bottom = bin(top_half().values().mapv(|v| !v));
        assert_eq!(iou(&top_half(), &bottom).unwrap(), 0.0);
        assert!((iou(&left_half(), &top_half()).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        let empty = bin(Array2::from_elem((4, 4), false));
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        let small = bin(Array2::from_elem((2, 2), false));
        assert!(matches!(iou(&empty, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn success_rate_is_strict() {
        assert!((success_rate(&[0.6, 0.4, 0.51]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(success_rate(&[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(success_rate(&[0.5]).unwrap(), 0.0);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn mae_cases() {
        let gt = top_half();
        assert_eq!(mae(&as_soft(&gt), &gt).unwrap(), 0.0);
        let ones = bin(Array2::from_elem((4, 4), true));
        assert_eq!(mae(&soft(Array2::zeros((4, 4))), &ones).unwrap(), 1.0);
        let zeros = bin(Array2::from_elem((4, 4), false));
        assert_eq!(mae(&soft(Array2::from_elem((4, 4), 0.25)), &zeros).unwrap(), 0.25);
    }

    #[test]
    fn max_f_cases() {
        let gt = top_half();
        assert!((max_f_measure(&as_soft(&gt), &gt, 0.3, 256).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(max_f_measure(&soft(Array2::zeros((4, 4))), &gt, 0.3, 256).unwrap(), 0.0);
        let empty = bin(Array2::from_elem((4, 4), false));
        assert_eq!(max_f_measure(&as_soft(&gt), &empty, 0.3, 256).unwrap(), 0.0);
    }

    /// Direct sweep of F over every threshold with a fresh binarization each time.
    fn f_sweep_oracle(pred: &Array2<f64>, gt: &Array2<bool>, beta_sq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let t = k as f64 / n as f64;
                let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
                for (p, g) in pred.iter().zip(gt) {
                    let b = *p > t;
                    if b && *g {
                        tp += 1.0;
                    }
                    if b {
                        pp += 1.0;
                    }
                    if *g {
                        gp += 1.0;
                    }
                }
                let prec = if pp > 0.0 { tp / pp } else { 0.0 };
                let rec = if gp > 0.0 { tp / gp } else { 0.0 };
                if beta_sq * prec + rec == 0.0 {
                    0.0
                } else {
                    (1.0 + beta_sq) * prec * rec / (beta_sq * prec + rec)
                }
            })
            .collect()
    }

    #[test]
    fn max_f_matches_threshold_sweep_on_ramp() {
        let ramp = Array2::from_shape_fn((4, 4), |(y, x)| (15 - (y * 4 + x)) as f64 / 15.0);
        let gt = top_half();
        let curve = f_measure_curve(&soft(ramp.clone()), &gt, 0.3, 256).unwrap();
        let oracle = f_sweep_oracle(&ramp, gt.values(), 0.3, 256);
        for (a, b) in curve.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let best = oracle.iter().cloned().fold(0.0, f64::max);
        assert!((max_f_measure(&soft(ramp), &gt, 0.3, 256).unwrap() - best).abs() < 1e-12);
        // The ramp orders top-half pixels first, so some threshold separates them exactly.
        assert!((best - 1.0).abs() < 1e-12);
    }

    #[test]
    fn e_measure_perfect_and_complement() {
        let gt = top_half();
        assert!((e_measure_max(&as_soft(&gt), &gt, 256).unwrap() - 1.0).abs() < 1e-12);
        // The complement has φ_pred = −φ_gt everywhere, so alignment −1 and enhanced 0.
        let comp = bin(gt.values().mapv(|v| !v));
        let curve = e_measure_curve(&as_soft(&comp), &gt, 256).unwrap();
        assert!(curve.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn e_measure_degenerate_gt() {
        let p = soft(array![[0.0, 1.0], [1.0, 1.0]]);
        let all = bin(Array2::from_elem((2, 2), true));
        let none = bin(Array2::from_elem((2, 2), false));
        let c_all = e_measure_curve(&p, &all, 4).unwrap();
        let c_none = e_measure_curve(&p, &none, 4).unwrap();
        assert_eq!(c_all[0], 0.75);
        assert_eq!(c_none[0], 0.25);
        assert_eq!(e_measure_curve(&soft(Array2::zeros((2, 2))), &all, 4).unwrap()[0], 0.0);
    }

    #[test]
    fn s_measure_degenerate_and_perfect() {
        let gt = top_half();
        assert!((s_measure(&as_soft(&gt), &gt).unwrap() - 1.0).abs() < 1e-6);
        let none = bin(Array2::from_elem((4, 4), false));
        assert_eq!(s_measure(&soft(Array2::zeros((4, 4))), &none).unwrap(), 1.0);
        let all = bin(Array2::from_elem((4, 4), true));
        assert_eq!(s_measure(&soft(Array2::from_elem((4, 4), 0.3)), &all).unwrap(), 0.3);
    }

    #[test]
    fn thresholds_are_uniform_in_unit_interval() {
        let t = thresholds(256);
        assert_eq!(t.len(), 256);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[128], 0.5);
        assert!(t[255] < 1.0);
    }

    #[test]
    fn report_of_perfect_predictions() {
        let gt = top_half();
        let cfg = MetricConfig::default();
        let rows = (0..3)
            .map(|i| evaluate_image(&format!("{i}"), "g", &as_soft(&gt), &gt, &cfg).unwrap())
            .collect();
        let r = MetricReport::from_rows(rows, cfg, vec![]).unwrap();
        let a = &r.aggregate;
        assert_eq!((a.sr, a.iou, a.mae), (1.0, 1.0, 0.0));
        assert!((a.max_f - 1.0).abs() < 1e-12 && (a.e_max - 1.0).abs() < 1e-12);
        assert!((a.s_measure - 1.0).abs() < 1e-6);
    }
}
