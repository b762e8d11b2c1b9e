use serde::{Deserialize, Serialize};

use super::PoseError;

/// Keypoint layout shared by annotations, targets and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub name: String,
    pub names: Vec<String>,
    /// Neighbouring keypoint pairs.
    pub sticks: Vec<(usize, usize)>,
    /// `(left, right)` index pairs swapped by a horizontal flip.
    pub flip_pairs: Vec<(usize, usize)>,
    /// Per-keypoint OKS falloff constants.
    pub oks_k: Vec<f64>,
    /// Chebyshev radius of the supervised center region, output pixels.
    #[serde(default = "default_center_radius")]
    pub center_radius: usize,
}

fn default_center_radius() -> usize {
    4
}

/// Standard COCO per-keypoint sigmas; the OKS constant is twice the sigma.
const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

impl Skeleton {
    /// The 17-keypoint COCO layout with its 19 sticks.
    pub fn coco17() -> Self {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        let sticks = vec![
            (15, 13),
            (13, 11),
            (16, 14),
            (14, 12),
            (11, 12),
            (5, 11),
            (6, 12),
            (5, 6),
            (5, 7),
            (6, 8),
            (7, 9),
            (8, 10),
            (1, 2),
            (0, 1),
            (0, 2),
            (1, 3),
            (2, 4),
            (3, 5),
            (4, 6),
        ];
        let flip_pairs = vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)];
        Self {
            name: "coco17".into(),
            names: names.iter().map(|s| s.to_string()).collect(),
            sticks,
            flip_pairs,
            oks_k: COCO_SIGMAS.iter().map(|s| 2.0 * s).collect(),
            center_radius: 4,
        }
    }

    /// Seven-keypoint figure used for CPU-scale training.
    pub fn mini7() -> Self {
        let names = [
            "head",
            "left_shoulder",
            "right_shoulder",
            "left_hip",
            "right_hip",
            "left_ankle",
            "right_ankle",
        ];
        Self {
            name: "mini7".into(),
            names: names.iter().map(|s| s.to_string()).collect(),
            sticks: vec![(0, 1), (0, 2), (1, 3), (2, 4), (3, 4), (3, 5), (4, 6)],
            flip_pairs: vec![(1, 2), (3, 4), (5, 6)],
            oks_k: vec![0.08; 7],
            center_radius: 4,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "coco17" => Some(Self::coco17()),
            "mini7" => Some(Self::mini7()),
            _ => None,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.names.len()
    }

    pub fn num_sticks(&self) -> usize {
        self.sticks.len()
    }

    /// Permutation applied to keypoint indices by a horizontal flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_keypoints()).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }

    /// Check index ranges and that the flip pairs form an involution.
    pub fn validate(&self) -> Result<(), PoseError> {
        let k = self.num_keypoints();
        let invalid = |path: String, detail: String| PoseError::Invalid { path, detail };
        if k == 0 {
            return Err(invalid("skeleton.names".into(), "no keypoints".into()));
        }
        if self.oks_k.len() != k {
            return Err(invalid(
                "skeleton.oks_k".into(),
                format!("{} constants for {k} keypoints", self.oks_k.len()),
            ));
        }
        if let Some(i) = self.oks_k.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("skeleton.oks_k[{i}]"), "must be positive".into()));
        }
        for (i, &(a, b)) in self.sticks.iter().enumerate() {
            if a >= k || b >= k {
                return Err(invalid(
                    format!("skeleton.sticks[{i}]"),
                    format!("stick ({a}, {b}) has an endpoint outside [0, {k})"),
                ));
            }
        }
        let mut seen = vec![false; k];
        for (i, &(l, r)) in self.flip_pairs.iter().enumerate() {
            if l >= k || r >= k {
                return Err(invalid(
                    format!("skeleton.flip_pairs[{i}]"),
                    format!("pair ({l}, {r}) outside [0, {k})"),
                ));
            }
            if l == r || seen[l] || seen[r] {
                return Err(invalid(
                    format!("skeleton.flip_pairs[{i}]"),
                    format!("pair ({l}, {r}) reuses an index"),
                ));
            }
            seen[l] = true;
            seen[r] = true;
        }
        Ok(())
    }
}
