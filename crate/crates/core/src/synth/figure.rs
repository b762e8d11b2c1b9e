//! Articulated stick-figure sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::pose::Skeleton;

/// Joint positions of a full body in image pixels, before projection to a
/// skeleton's keypoint set.
#[derive(Clone, Debug)]
pub struct Body {
    pub head: [f64; 2],
    pub nose: [f64; 2],
    pub eyes: [[f64; 2]; 2],
    pub ears: [[f64; 2]; 2],
    pub shoulders: [[f64; 2]; 2],
    pub elbows: [[f64; 2]; 2],
    pub wrists: [[f64; 2]; 2],
    pub hips: [[f64; 2]; 2],
    pub knees: [[f64; 2]; 2],
    pub ankles: [[f64; 2]; 2],
}

fn rot(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn add(a: [f64; 2], b: [f64; 2], scale: f64) -> [f64; 2] {
    [a[0] + scale * b[0], a[1] + scale * b[1]]
}

impl Body {
    /// Sample a body of overall `height` px with its pelvis at the origin.
    /// "Left" joints sit on the +x side of the torso.
    pub fn sample<R: Rng>(rng: &mut R, height: f64) -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let lean = Normal::new(0.0, 8.0 * deg).unwrap();
        let whole = rng.random_range(-20.0..20.0) * deg;
        let torso = lean.sample(rng);
        // image y points down, so "up" is -y
        let up = rot([0.0, -1.0], whole + torso);
        let side = rot([1.0, 0.0], whole + torso);
        let yaw = rng.random_range(0.6..1.0);

        let pelvis = [0.0, 0.0];
        let neck = add(pelvis, up, 0.30 * height);
        let head_up = rot(up, lean.sample(rng) * 1.5);
        let head = add(neck, head_up, 0.13 * height);
        let head_side = rot(side, lean.sample(rng) * 1.5);
        let nose = add(head, head_up, -0.01 * height);
        let eyes = [
            add(add(head, head_side, 0.035 * height * yaw), head_up, 0.015 * height),
            add(add(head, head_side, -0.035 * height * yaw), head_up, 0.015 * height),
        ];
        let ears = [add(head, head_side, 0.06 * height * yaw), add(head, head_side, -0.06 * height * yaw)];

        let sh = 0.11 * height * yaw;
        let hh = 0.075 * height * yaw;
        let shoulders = [add(neck, side, sh), add(neck, side, -sh)];
        let hips = [add(pelvis, side, hh), add(pelvis, side, -hh)];

        let down = rot(up, std::f64::consts::PI);
        let mut limb = |root: [f64; 2], outward: f64, spread: (f64, f64), bend: f64, l1: f64, l2: f64| {
            let a1 = outward * rng.random_range(spread.0..spread.1) * deg;
            let mid = add(root, rot(down, a1), l1 * height);
            let a2 = a1 + outward * rng.random_range(-bend..bend) * deg;
            let end = add(mid, rot(down, a2), l2 * height);
            (mid, end)
        };
        // +x is "left": rotating `down` by a negative angle swings toward +x.
        let (lk, la) = limb(hips[0], -1.0, (-5.0, 25.0), 25.0, 0.25, 0.25);
        let (rk, ra) = limb(hips[1], 1.0, (-5.0, 25.0), 25.0, 0.25, 0.25);
        let (le, lw) = limb(shoulders[0], -1.0, (5.0, 150.0), 60.0, 0.17, 0.15);
        let (re, rw) = limb(shoulders[1], 1.0, (5.0, 150.0), 60.0, 0.17, 0.15);

        Self {
            head,
            nose,
            eyes,
            ears,
            shoulders,
            elbows: [le, re],
            wrists: [lw, rw],
            hips,
            knees: [lk, rk],
            ankles: [la, ra],
        }
    }

    /// Keypoints in the order of `skeleton`.
    pub fn keypoints(&self, skeleton: &Skeleton) -> Vec<[f64; 2]> {
        match skeleton.num_keypoints() {
            7 => vec![
                self.head,
                self.shoulders[0],
                self.shoulders[1],
                self.hips[0],
                self.hips[1],
                self.ankles[0],
                self.ankles[1],
            ],
            _ => vec![
                self.nose,
                self.eyes[0],
                self.eyes[1],
                self.ears[0],
                self.ears[1],
                self.shoulders[0],
                self.shoulders[1],
                self.elbows[0],
                self.elbows[1],
                self.wrists[0],
                self.wrists[1],
                self.hips[0],
                self.hips[1],
                self.knees[0],
                self.knees[1],
                self.ankles[0],
                self.ankles[1],
            ],
        }
    }
}

/// Which side of the body a keypoint name belongs to.
pub fn side_of(name: &str) -> i8 {
    if name.starts_with("left") {
        1
    } else if name.starts_with("right") {
        -1
    } else {
        0
    }
}
