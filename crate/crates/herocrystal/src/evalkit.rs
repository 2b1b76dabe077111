//! Evaluation: all-point interpolated AP/mAP at IoU 0.5, the per-source
//! TP/FN/FP pseudo-label breakdown, and SSIM/PSNR leakage banding.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{match_detections, iou, BoundingBox, Category, Detection, MatchOutcome, SceneImage};

/// One evaluated scene: predictions plus ground truth.
#[derive(Debug, Clone)]
pub struct EvalScene {
    pub preds: Vec<Detection>,
    pub truths: Vec<(Category, BoundingBox)>,
}

/// Score-sorted sweep events with the running precision/recall arrays.
#[derive(Debug, Clone, Serialize)]
pub struct PRCurve {
    /// (score, is_tp) sorted by descending score.
    pub events: Vec<(f64, bool)>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub gt_count: usize,
}

/// Build the precision/recall sweep for one category.
pub fn pr_curve(scenes: &[EvalScene], category: Category, iou_thresh: f64) -> PRCurve {
    let mut events: Vec<(f64, bool)> = Vec::new();
    let mut gt_count = 0usize;
    for scene in scenes {
        let truths: Vec<(Category, BoundingBox)> = scene
            .truths
            .iter()
            .filter(|(c, _)| *c == category)
            .cloned()
            .collect();
        gt_count += truths.len();
        let mut preds: Vec<Detection> = scene.preds.iter().filter(|d| d.category == category).cloned().collect();
        preds.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        for (pi, outcome) in match_detections(&preds, &truths, iou_thresh) {
            events.push((preds[pi].score, matches!(outcome, MatchOutcome::Matched(_))));
        }
    }
    // global sweep order: descending score, stable for determinism
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut precision = Vec::with_capacity(events.len());
    let mut recall = Vec::with_capacity(events.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &events {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 });
    }
    PRCurve { events, precision, recall, gt_count }
}

/// All-point interpolated area under the precision-recall curve.
///
/// `None` when the category has no ground truth (undefined AP, excluded from
/// the mean).
pub fn average_precision(scenes: &[EvalScene], category: Category, iou_thresh: f64) -> Option<f64> {
    let curve = pr_curve(scenes, category, iou_thresh);
    if curve.gt_count == 0 {
        return None;
    }
    // precision envelope: max precision at recall >= r
    let n = curve.events.len();
    let mut envelope = curve.precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        let r = curve.recall[i];
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    Some(ap)
}

/// Arithmetic mean over the defined class APs.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::config("mean AP over zero defined classes"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Full per-class evaluation at the standard threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    /// AP per registry class name; absent classes (no ground truth) are null.
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    pub map: f64,
    pub iou_thresh: f64,
}

pub fn evaluate(scenes: &[EvalScene], classes: &[Category], iou_thresh: f64) -> Result<EvalSummary> {
    let mut per_class_ap = BTreeMap::new();
    let mut values = Vec::new();
    for cat in classes {
        let ap = average_precision(scenes, *cat, iou_thresh);
        // predictions exist for this class but no ground truth: undefined;
        // ground truth with no predictions yields a defined AP of zero
        per_class_ap.insert(cat.name().to_string(), ap);
        values.push(ap);
    }
    let map = mean_ap(&values)?;
    Ok(EvalSummary { per_class_ap, map, iou_thresh })
}

/// Per-class bins of the multi-source detection partition.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub gt_total: usize,
    /// Detected by every source.
    pub tp_all: usize,
    /// Missed by every source.
    pub fn_all: usize,
    /// `fn_ksrc[k-1]`: missed by exactly k sources (k = 1..N-1).
    pub fn_ksrc: Vec<usize>,
    /// `tp_ksrc[k-1]`: detected by exactly k sources (k = 1..N-1); the same
    /// partition cells as `fn_ksrc` read from the other side.
    pub tp_ksrc: Vec<usize>,
    /// `fp_ksrc[k-1]`: unmatched predictions on which exactly k sources agree
    /// (IoU > 0 overlap of same-class unmatched predictions across sources).
    pub fp_ksrc: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceBreakdown {
    pub n_sources: usize,
    pub per_class: BTreeMap<String, ClassBreakdown>,
}

impl SourceBreakdown {
    /// Total ground-truth objects across classes.
    pub fn gt_total(&self) -> usize {
        self.per_class.values().map(|c| c.gt_total).sum()
    }

    /// Overall fraction of ground truth missed by every source.
    pub fn fn_all_proportion(&self) -> f64 {
        let gt = self.gt_total();
        if gt == 0 {
            return 0.0;
        }
        self.per_class.values().map(|c| c.fn_all).sum::<usize>() as f64 / gt as f64
    }
}

/// Bin every ground-truth object by how many sources detect it, and every
/// unmatched prediction by how many sources agree on it.
pub fn source_breakdown(
    per_source: &[Vec<Vec<Detection>>],
    truths: &[Vec<(Category, BoundingBox)>],
    iou_thresh: f64,
) -> Result<SourceBreakdown> {
    let n = per_source.len();
    if n < 2 {
        return Err(Error::config("source breakdown needs at least two sources"));
    }
    for dets in per_source {
        if dets.len() != truths.len() {
            return Err(Error::config("per-source detections and truths disagree on scene count"));
        }
    }

    let mut per_class: BTreeMap<String, ClassBreakdown> = BTreeMap::new();
    let class_entry = |map: &mut BTreeMap<String, ClassBreakdown>, cat: Category| {
        let e = map.entry(cat.name().to_string()).or_default();
        if e.fn_ksrc.is_empty() {
            e.fn_ksrc = vec![0; n - 1];
            e.tp_ksrc = vec![0; n - 1];
            e.fp_ksrc = vec![0; n];
        }
    };

    for (scene_idx, scene_truths) in truths.iter().enumerate() {
        // per source: which truths it detected, and its unmatched predictions
        let mut detected: Vec<Vec<bool>> = Vec::with_capacity(n);
        let mut unmatched: Vec<Vec<Detection>> = Vec::with_capacity(n);
        for dets_by_scene in per_source {
            let mut preds: Vec<Detection> = dets_by_scene[scene_idx].clone();
            preds.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
            let matches = match_detections(&preds, scene_truths, iou_thresh);
            let mut hit = vec![false; scene_truths.len()];
            let mut missed = Vec::new();
            for (pi, outcome) in matches {
                match outcome {
                    MatchOutcome::Matched(ti) => hit[ti] = true,
                    MatchOutcome::Miss => missed.push(preds[pi].clone()),
                }
            }
            detected.push(hit);
            unmatched.push(missed);
        }

        // ground-truth partition by number of detecting sources
        for (ti, (cat, _)) in scene_truths.iter().enumerate() {
            class_entry(&mut per_class, *cat);
            let bins = per_class.get_mut(cat.name()).expect("just inserted");
            bins.gt_total += 1;
            let succeeded = detected.iter().filter(|hit| hit[ti]).count();
            let failed = n - succeeded;
            if failed == 0 {
                bins.tp_all += 1;
            } else if succeeded == 0 {
                bins.fn_all += 1;
            } else {
                bins.fn_ksrc[failed - 1] += 1;
                bins.tp_ksrc[succeeded - 1] += 1;
            }
        }

        // false positives binned by cross-source agreement: an unmatched
        // prediction agrees with another source when that source has a
        // same-class unmatched prediction overlapping it
        for (s, missed) in unmatched.iter().enumerate() {
            for pred in missed {
                let agree = 1 + (0..n)
                    .filter(|t| *t != s)
                    .filter(|t| {
                        unmatched[*t]
                            .iter()
                            .any(|q| q.category == pred.category && iou(&pred.bbox, &q.bbox) > 0.0)
                    })
                    .count();
                class_entry(&mut per_class, pred.category);
                let bins = per_class.get_mut(pred.category.name()).expect("just inserted");
                bins.fp_ksrc[agree - 1] += 1;
            }
        }
    }

    Ok(SourceBreakdown { n_sources: n, per_class })
}

/// Risk levels of the leakage bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    Low,
    Middle,
    High,
}

/// Band thresholds; risk grows with similarity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LeakageBands {
    pub ssim_middle: f64,
    pub ssim_high: f64,
    pub psnr_middle_db: f64,
    pub psnr_high_db: f64,
}

impl Default for LeakageBands {
    fn default() -> Self {
        LeakageBands { ssim_middle: 0.5, ssim_high: 0.8, psnr_middle_db: 25.0, psnr_high_db: 35.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageReport {
    pub ssim: f64,
    pub psnr_db: f64,
    pub ssim_risk: RiskLevel,
    pub psnr_risk: RiskLevel,
    /// Kept as a column for table parity; never computed (needs a pretrained
    /// perceptual network).
    pub lpips: Option<f64>,
}

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 8;

fn check_pair(a: &SceneImage, b: &SceneImage) -> Result<()> {
    if a.height != b.height || a.width != b.width || a.channels != b.channels {
        return Err(Error::config(format!(
            "image size mismatch: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::config("images smaller than the SSIM window"));
    }
    Ok(())
}

/// Structural similarity with the standard constants at unit dynamic range,
/// an 8x8 sliding window, averaged over windows and channels.
pub fn ssim(a: &SceneImage, b: &SceneImage) -> Result<f64> {
    check_pair(a, b)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let norm = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    for c in 0..a.channels {
        for y0 in 0..=a.height - SSIM_WINDOW {
            for x0 in 0..=a.width - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let va = a.at(y, x, c);
                        let vb = b.at(y, x, c);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / norm, sb / norm);
                let var_a = saa / norm - ma * ma;
                let var_b = sbb / norm - mb * mb;
                let cov = sab / norm - ma * mb;
                let value = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2));
                total += value;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in dB at unit dynamic range, capped at the
/// sentinel for (near-)identical images.
pub fn psnr(a: &SceneImage, b: &SceneImage) -> Result<f64> {
    check_pair(a, b)?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn band(value: f64, middle_from: f64, high_from: f64) -> RiskLevel {
    if value >= high_from {
        RiskLevel::High
    } else if value >= middle_from {
        RiskLevel::Middle
    } else {
        RiskLevel::Low
    }
}

/// Similarity of a generated image to the reference, with risk bands.
pub fn leakage_metrics(generated: &SceneImage, reference: &SceneImage, bands: &LeakageBands) -> Result<LeakageReport> {
    let s = ssim(generated, reference)?;
    let p = psnr(generated, reference)?;
    Ok(LeakageReport {
        ssim: s,
        psnr_db: p,
        ssim_risk: band(s, bands.ssim_middle, bands.ssim_high),
        psnr_risk: band(p, bands.psnr_middle_db, bands.psnr_high_db),
        lpips: None,
    })
}
