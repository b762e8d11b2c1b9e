//! Per-keypoint error classes and their AP impact under oracle correction.

use serde::{Deserialize, Serialize};

use super::{evaluate_images, greedy_match, oks, EvalConfig, ImageEval};
use crate::pose::{keypoint_similarity, Instance, Skeleton};

/// OKS needed to pair a detection with a groundtruth for error analysis.
pub const MATCH_OKS: f64 = 0.1;
pub const GOOD_KS: f64 = 0.85;
pub const JITTER_KS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointError {
    Good,
    Jitter,
    Miss,
    Inversion,
    Swap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub good: usize,
    pub jitter: usize,
    pub miss: usize,
    pub inversion: usize,
    pub swap: usize,
}

/// AP gained (percentage points) by correcting each class in turn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub jitter: f64,
    pub miss: f64,
    pub inversion: f64,
    pub swap: f64,
    /// AP after all four corrections.
    pub corrected_ap: f64,
}

fn ks(p: [f64; 2], gt: &Instance, j: usize, oks_k: &[f64]) -> f64 {
    let g = &gt.keypoints[j];
    keypoint_similarity((p[0] - g.x).powi(2) + (p[1] - g.y).powi(2), gt.area, oks_k[j])
}

/// Class of predicted keypoint `k` against its matched instance `gt`;
/// `others` are the remaining instances of the image.
pub fn classify_keypoint(p: [f64; 2], k: usize, gt: &Instance, others: &[&Instance], oks_k: &[f64]) -> KeypointError {
    let own = ks(p, gt, k, oks_k);
    if own >= GOOD_KS {
        return KeypointError::Good;
    }
    if own >= JITTER_KS {
        return KeypointError::Jitter;
    }
    let hits = |inst: &Instance, skip: Option<usize>| {
        (0..inst.keypoints.len())
            .any(|j| Some(j) != skip && inst.keypoints[j].labelled() && ks(p, inst, j, oks_k) >= JITTER_KS)
    };
    if hits(gt, Some(k)) {
        KeypointError::Inversion
    } else if others.iter().any(|o| hits(o, None)) {
        KeypointError::Swap
    } else {
        KeypointError::Miss
    }
}

/// Labels of one image: per detection, the matched instance and the class
/// of every labelled keypoint.
type Labels = Vec<Option<(usize, Vec<Option<KeypointError>>)>>;

fn label_image(img: &ImageEval, skeleton: &Skeleton) -> Labels {
    let m: Vec<Vec<f64>> = img
        .dets
        .iter()
        .map(|d| img.gts.iter().map(|g| oks(&d.keypoints, g, &skeleton.oks_k).expect("validated instance")).collect())
        .collect();
    let ignored = vec![false; img.gts.len()];
    greedy_match(&m, img.gts.len(), MATCH_OKS, &ignored)
        .into_iter()
        .zip(&img.dets)
        .map(|(mg, det)| {
            mg.map(|g| {
                let gt = &img.gts[g];
                let others: Vec<&Instance> = img.gts.iter().enumerate().filter(|(i, _)| *i != g).map(|(_, o)| o).collect();
                let classes = (0..gt.keypoints.len())
                    .map(|k| {
                        gt.keypoints[k]
                            .labelled()
                            .then(|| classify_keypoint(det.keypoints[k], k, gt, &others, &skeleton.oks_k))
                    })
                    .collect();
                (g, classes)
            })
        })
        .collect()
}

/// Counts per class and AP impact of progressively correcting jitter, miss,
/// inversion and swap errors (each corrected keypoint moves onto its
/// groundtruth).
pub fn classify_errors(images: &[ImageEval], skeleton: &Skeleton, cfg: &EvalConfig) -> (ErrorRates, ErrorCounts) {
    let labels: Vec<Labels> = images.iter().map(|img| label_image(img, skeleton)).collect();
    let mut counts = ErrorCounts::default();
    for class in labels.iter().flatten().flatten().flat_map(|(_, c)| c.iter().flatten()) {
        match class {
            KeypointError::Good => counts.good += 1,
            KeypointError::Jitter => counts.jitter += 1,
            KeypointError::Miss => counts.miss += 1,
            KeypointError::Inversion => counts.inversion += 1,
            KeypointError::Swap => counts.swap += 1,
        }
    }

    let order = [KeypointError::Jitter, KeypointError::Miss, KeypointError::Inversion, KeypointError::Swap];
    let mut current: Vec<ImageEval> = images.to_vec();
    let mut aps = vec![evaluate_images(&current, skeleton, cfg).ap];
    for class in order {
        for (img, lab) in current.iter_mut().zip(&labels) {
            for (det, l) in img.dets.iter_mut().zip(lab) {
                let Some((g, classes)) = l else { continue };
                for (k, c) in classes.iter().enumerate() {
                    if *c == Some(class) {
                        let kp = &img.gts[*g].keypoints[k];
                        det.keypoints[k] = [kp.x, kp.y];
                    }
                }
            }
        }
        aps.push(evaluate_images(&current, skeleton, cfg).ap);
    }
    let rates = ErrorRates {
        jitter: aps[1] - aps[0],
        miss: aps[2] - aps[1],
        inversion: aps[3] - aps[2],
        swap: aps[4] - aps[3],
        corrected_ap: aps[4],
    };
    (rates, counts)
}
