//! OKS-based AP/AR, the four-way keypoint error taxonomy, rendering and
//! micro-benchmarks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decoder::ImagePredictions;
use crate::pose::{keypoint_similarity, AnnotationSet, Instance, Skeleton};

mod bench;
mod errors;
mod viz;

pub use bench::{run_bench, write_bench_csv, BenchRow};
pub use errors::{classify_errors, ErrorCounts, ErrorRates, KeypointError};
pub use viz::{render_poses, visualize};

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

const RECALL_POINTS: usize = 101;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("instance {id} has zero area")]
    ZeroArea { id: u64 },
    #[error("instance {id} has no labelled keypoints")]
    NoLabelled { id: u64 },
    #[error("image id {id} appears in the predictions but not in the annotations")]
    UnknownImage { id: u64 },
    #[error("image id {id} has no prediction record")]
    MissingImage { id: u64 },
    #[error("image id {id} appears more than once in the predictions")]
    DuplicateImage { id: u64 },
    #[error("prediction for image {id} has {got} keypoints, skeleton has {expected}")]
    KeypointCount { id: u64, got: usize, expected: usize },
}

impl EvalError {
    /// Mismatched inputs rather than bad values.
    pub fn is_mismatch(&self) -> bool {
        !matches!(self, EvalError::ZeroArea { .. } | EvalError::NoLabelled { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detections kept per image, by score.
    pub max_detections: usize,
    /// Lower area bound of the medium range, pixels squared.
    pub medium_area: f64,
    /// Lower area bound of the large range.
    pub large_area: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::for_image_size(640)
    }
}

impl EvalConfig {
    /// COCO's 32^2 / 96^2 bounds scaled from 640 pixels to `size`.
    pub fn for_image_size(size: usize) -> Self {
        let s = (size as f64 / 640.0).powi(2);
        Self {
            max_detections: 30,
            medium_area: 32.0 * 32.0 * s,
            large_area: 96.0 * 96.0 * s,
        }
    }
}

/// Mean over labelled keypoints of `exp(-d^2 / (2 s^2 k^2))`, `s^2` the
/// groundtruth area.
pub fn oks(keypoints: &[[f64; 2]], gt: &Instance, oks_k: &[f64]) -> Result<f64, EvalError> {
    if !(gt.area > 0.0) {
        return Err(EvalError::ZeroArea { id: gt.id });
    }
    let (mut acc, mut n) = (0.0, 0usize);
    for (k, (p, g)) in keypoints.iter().zip(&gt.keypoints).enumerate() {
        if !g.labelled() {
            continue;
        }
        let d2 = (p[0] - g.x).powi(2) + (p[1] - g.y).powi(2);
        acc += keypoint_similarity(d2, gt.area, oks_k[k]);
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoLabelled { id: gt.id });
    }
    Ok(acc / n as f64)
}

/// A scored pose in input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub keypoints: Vec<[f64; 2]>,
    pub score: f64,
}

impl Detection {
    pub fn extent_area(&self) -> f64 {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &self.keypoints {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        ((x1 - x0) * (y1 - y0)).max(0.0)
    }
}

/// Groundtruth and detections of one image. Detections are sorted by
/// score (stable) and capped; instances without labelled keypoints are
/// left out.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub image_id: u64,
    pub gts: Vec<Instance>,
    pub dets: Vec<Detection>,
}

/// Pair prediction records with annotated images, in image-id order.
pub fn align(preds: &[ImagePredictions], ann: &AnnotationSet, cfg: &EvalConfig) -> Result<Vec<ImageEval>, EvalError> {
    let k = ann.skeleton.num_keypoints();
    let mut by_id: BTreeMap<u64, &ImagePredictions> = BTreeMap::new();
    let known: BTreeSet<u64> = ann.images.iter().map(|im| im.id).collect();
    for p in preds {
        if !known.contains(&p.image_id) {
            return Err(EvalError::UnknownImage { id: p.image_id });
        }
        if by_id.insert(p.image_id, p).is_some() {
            return Err(EvalError::DuplicateImage { id: p.image_id });
        }
        if let Some(bad) = p.poses.iter().find(|q| q.keypoints.len() != 3 * k) {
            return Err(EvalError::KeypointCount { id: p.image_id, got: bad.keypoints.len() / 3, expected: k });
        }
    }
    let mut gts: BTreeMap<u64, Vec<Instance>> = known.iter().map(|&id| (id, Vec::new())).collect();
    for inst in &ann.instances {
        if !(inst.area > 0.0) {
            return Err(EvalError::ZeroArea { id: inst.id });
        }
        if inst.num_labelled() > 0 {
            gts.get_mut(&inst.image_id).expect("validated image id").push(inst.clone());
        }
    }
    gts.into_iter()
        .map(|(id, gts)| {
            let rec = by_id.get(&id).ok_or(EvalError::MissingImage { id })?;
            let mut dets: Vec<Detection> =
                rec.poses.iter().map(|p| Detection { keypoints: p.points(), score: p.score }).collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(cfg.max_detections);
            Ok(ImageEval { image_id: id, gts, dets })
        })
        .collect()
}

/// Per-threshold average precision and final recall for one area range.
#[derive(Clone, Debug, PartialEq)]
struct RangeResult {
    precision: Vec<f64>,
    recall: Vec<f64>,
}

/// Greedy matching of score-sorted detections: each takes the unmatched
/// groundtruth with the highest OKS at or above `thresh`. Returns the
/// matched groundtruth index per detection.
pub fn greedy_match(oks_matrix: &[Vec<f64>], num_gts: usize, thresh: f64, gt_ignored: &[bool]) -> Vec<Option<usize>> {
    let mut taken = vec![false; num_gts];
    // non-ignored groundtruth first, as in the reference evaluator
    let mut order: Vec<usize> = (0..num_gts).collect();
    order.sort_by_key(|&g| gt_ignored[g]);
    oks_matrix
        .iter()
        .map(|row| {
            let mut best = thresh.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some(cur) = m {
                    if !gt_ignored[cur] && gt_ignored[g] {
                        break;
                    }
                }
                if row[g] < best {
                    continue;
                }
                best = row[g];
                m = Some(g);
            }
            if let Some(g) = m {
                taken[g] = true;
            }
            m
        })
        .collect()
}

fn oks_matrix(img: &ImageEval, skeleton: &Skeleton) -> Vec<Vec<f64>> {
    img.dets
        .iter()
        .map(|d| img.gts.iter().map(|g| oks(&d.keypoints, g, &skeleton.oks_k).expect("validated instance")).collect())
        .collect()
}

fn evaluate_range(images: &[ImageEval], skeleton: &Skeleton, range: (f64, f64)) -> Option<RangeResult> {
    let thresholds = oks_thresholds();
    let in_range = |a: f64| a >= range.0 && a <= range.1;
    let mut npig = 0usize;
    // per threshold: (score, tp, ignored) in image order
    let mut flags: Vec<Vec<(f64, bool, bool)>> = vec![Vec::new(); thresholds.len()];
    for img in images {
        let gt_ignored: Vec<bool> = img.gts.iter().map(|g| !in_range(g.area)).collect();
        npig += gt_ignored.iter().filter(|&&i| !i).count();
        let m = oks_matrix(img, skeleton);
        for (t, &thr) in thresholds.iter().enumerate() {
            let matched = greedy_match(&m, img.gts.len(), thr, &gt_ignored);
            for (d, mg) in img.dets.iter().zip(matched) {
                let (tp, ignored) = match mg {
                    Some(g) => (!gt_ignored[g], gt_ignored[g]),
                    None => (false, !in_range(d.extent_area())),
                };
                flags[t].push((d.score, tp, ignored));
            }
        }
    }
    if npig == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(thresholds.len());
    let mut recall = Vec::with_capacity(thresholds.len());
    for mut f in flags {
        f.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut rc = Vec::with_capacity(f.len());
        let mut pr = Vec::with_capacity(f.len());
        for &(_, is_tp, ignored) in &f {
            if !ignored {
                if is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            rc.push(tp as f64 / npig as f64);
            pr.push(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
        }
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let mut sum = 0.0;
        for r in 0..RECALL_POINTS {
            let thr = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = rc.partition_point(|&v| v < thr);
            if idx < pr.len() {
                sum += pr[idx];
            }
        }
        precision.push(sum / RECALL_POINTS as f64);
        recall.push(rc.last().copied().unwrap_or(0.0));
    }
    Some(RangeResult { precision, recall })
}

/// All metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// `None` when no groundtruth falls in the range.
    #[serde(rename = "AP_M")]
    pub ap_m: Option<f64>,
    #[serde(rename = "AP_L")]
    pub ap_l: Option<f64>,
    #[serde(rename = "AR")]
    pub ar: f64,
    /// `(threshold, AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
    pub num_images: usize,
    pub num_instances: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_rates: Option<ErrorRates>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_counts: Option<ErrorCounts>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Metrics over aligned images.
pub fn evaluate_images(images: &[ImageEval], skeleton: &Skeleton, cfg: &EvalConfig) -> EvalReport {
    let all = evaluate_range(images, skeleton, (0.0, f64::INFINITY));
    let medium = evaluate_range(images, skeleton, (cfg.medium_area, cfg.large_area));
    let large = evaluate_range(images, skeleton, (cfg.large_area, f64::INFINITY));
    let num_instances = images.iter().map(|i| i.gts.len()).sum();
    let (precision, recall) = match all {
        Some(r) => (r.precision, r.recall),
        None => (vec![0.0; 10], vec![0.0; 10]),
    };
    EvalReport {
        ap: 100.0 * mean(&precision),
        ap50: 100.0 * precision[0],
        ap75: 100.0 * precision[5],
        ap_m: medium.map(|r| 100.0 * mean(&r.precision)),
        ap_l: large.map(|r| 100.0 * mean(&r.precision)),
        ar: 100.0 * mean(&recall),
        per_threshold: oks_thresholds().iter().zip(&precision).map(|(t, p)| (*t, 100.0 * p)).collect(),
        num_images: images.len(),
        num_instances,
        error_rates: None,
        error_counts: None,
    }
}

/// Match predictions to annotations and compute AP/AR.
pub fn evaluate(preds: &[ImagePredictions], ann: &AnnotationSet, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let images = align(preds, ann, cfg)?;
    Ok(evaluate_images(&images, &ann.skeleton, cfg))
}

/// [`evaluate`] plus the error taxonomy.
pub fn evaluate_with_errors(
    preds: &[ImagePredictions],
    ann: &AnnotationSet,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let images = align(preds, ann, cfg)?;
    let mut report = evaluate_images(&images, &ann.skeleton, cfg);
    let (rates, counts) = classify_errors(&images, &ann.skeleton, cfg);
    report.error_rates = Some(rates);
    report.error_counts = Some(counts);
    Ok(report)
}
