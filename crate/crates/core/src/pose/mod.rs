//! Skeletons, per-person records and the annotation file format.

mod annotations;
mod skeleton;

pub use annotations::{load_annotations, AnnotationSet, ImageInfo};
pub use skeleton::Skeleton;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown skeleton {name:?} (built-ins: coco17, mini7)")]
    UnknownSkeleton { name: String },
    #[error("invalid value at {path}: {detail}")]
    Invalid { path: String, detail: String },
    #[error("instance has no labelled keypoints")]
    NoVisibleKeypoints,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Visibility flag: 0 unlabelled, 1 labelled but occluded, 2 visible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Self { x, y, v }
    }

    pub fn labelled(&self) -> bool {
        self.v > 0
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn diagonal(&self) -> f64 {
        (self.w * self.w + self.h * self.h).sqrt()
    }
}

/// One annotated person.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: u64,
    pub image_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub bbox: BBox,
    pub area: f64,
}

impl Instance {
    pub fn num_labelled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labelled()).count()
    }

    /// Shift every keypoint and the box by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        for k in &mut out.keypoints {
            k.x += dx;
            k.y += dy;
        }
        out.bbox.x += dx;
        out.bbox.y += dy;
        out
    }
}

/// Mean position of the labelled keypoints.
pub fn pose_center(instance: &Instance) -> Result<(f64, f64), PoseError> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for k in instance.keypoints.iter().filter(|k| k.labelled()) {
        sx += k.x;
        sy += k.y;
        n += 1;
    }
    if n == 0 {
        return Err(PoseError::NoVisibleKeypoints);
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Per-keypoint similarity `exp(-d2 / (2 area k^2))`.
pub fn keypoint_similarity(d2: f64, area: f64, k: f64) -> f64 {
    (-d2 / (2.0 * area * k * k)).exp()
}

/// A pose regressed from one center pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatePose {
    pub keypoints: Vec<[f64; 2]>,
    pub center: [f64; 2],
    pub keypoint_heats: Vec<f64>,
    pub center_heat: f64,
    pub score: f64,
}

impl CandidatePose {
    /// Area of the keypoint bounding box.
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

    /// Mean keypoint heat.
    pub fn mean_heat(&self) -> f64 {
        if self.keypoint_heats.is_empty() {
            0.0
        } else {
            self.keypoint_heats.iter().sum::<f64>() / self.keypoint_heats.len() as f64
        }
    }
}
