use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pose::{BBox, Instance, Keypoint, Skeleton};
use crate::tensor::ops::sample_plane;
use crate::tensor::Tensor;

/// One draw of the random geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Degrees, counter-clockwise on screen.
    pub rotation: f64,
    pub scale: f64,
    /// Pixels in the output frame.
    pub translation: (f64, f64),
    pub hflip: bool,
    /// Side of the square output crop.
    pub out_size: usize,
}

pub const ROTATION_RANGE: (f64, f64) = (-30.0, 30.0);
pub const SCALE_RANGE: (f64, f64) = (0.75, 1.5);
/// Translation bound at 512 px input; scaled with the image size.
pub const TRANSLATION_AT_512: f64 = 40.0;

impl AugmentParams {
    pub fn identity(size: usize) -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            translation: (0.0, 0.0),
            hflip: false,
            out_size: size,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, image_size: usize) -> Self {
        let t = TRANSLATION_AT_512 * image_size as f64 / 512.0;
        Self {
            rotation: rng.random_range(ROTATION_RANGE.0..=ROTATION_RANGE.1),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            translation: (rng.random_range(-t..=t), rng.random_range(-t..=t)),
            hflip: rng.random_bool(0.5),
            out_size: image_size,
        }
    }

    /// Forward map `dest = A * src + b` as `[[a00, a01, b0], [a10, a11, b1]]`.
    ///
    /// Rotation and scale act about the input centre, which lands on the
    /// output centre (a centre crop), then the translation and the optional
    /// mirror `x -> out - 1 - x` are applied.
    pub fn matrix(&self, in_w: usize, in_h: usize) -> [[f64; 3]; 2] {
        let th = -self.rotation.to_radians();
        let (s, c) = th.sin_cos();
        let k = self.scale;
        let mut a = [[k * c, -k * s], [k * s, k * c]];
        let cin = ((in_w as f64 - 1.0) / 2.0, (in_h as f64 - 1.0) / 2.0);
        let cout = (self.out_size as f64 - 1.0) / 2.0;
        let mut b = [
            cout + self.translation.0 - (a[0][0] * cin.0 + a[0][1] * cin.1),
            cout + self.translation.1 - (a[1][0] * cin.0 + a[1][1] * cin.1),
        ];
        if self.hflip {
            a[0] = [-a[0][0], -a[0][1]];
            b[0] = self.out_size as f64 - 1.0 - b[0];
        }
        [[a[0][0], a[0][1], b[0]], [a[1][0], a[1][1], b[1]]]
    }
}

pub fn apply(m: &[[f64; 3]; 2], x: f64, y: f64) -> (f64, f64) {
    (
        m[0][0] * x + m[0][1] * y + m[0][2],
        m[1][0] * x + m[1][1] * y + m[1][2],
    )
}

fn invert(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let ia = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let ib = [
        -(ia[0][0] * m[0][2] + ia[0][1] * m[1][2]),
        -(ia[1][0] * m[0][2] + ia[1][1] * m[1][2]),
    ];
    [[ia[0][0], ia[0][1], ib[0]], [ia[1][0], ia[1][1], ib[1]]]
}

/// Resample a `[C, H, W]` image through the forward map `m` onto an
/// `out x out` grid. Bilinear, zero fill outside the source.
pub fn warp_image(image: &Tensor<f32>, m: &[[f64; 3]; 2], out: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let inv = invert(m);
    let mut data = vec![0.0f32; c * out * out];
    let src = image.data();
    for y in 0..out {
        for x in 0..out {
            let (sx, sy) = apply(&inv, x as f64, y as f64);
            for ch in 0..c {
                data[ch * out * out + y * out + x] =
                    sample_plane(&src[ch * h * w..(ch + 1) * h * w], h, w, sx as f32, sy as f32);
            }
        }
    }
    Tensor::new(&[c, out, out], data).expect("warp size")
}

/// Apply `params` to an image and its instances. Mirroring also swaps
/// left/right keypoints; keypoints leaving the crop become unlabelled.
pub fn augment(image: &Tensor<f32>, instances: &[Instance], skeleton: &Skeleton, params: &AugmentParams) -> (Tensor<f32>, Vec<Instance>) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let m = params.matrix(w, h);
    let out = params.out_size;
    let image = warp_image(image, &m, out);
    let perm = skeleton.flip_permutation();
    let limit = (out - 1) as f64;
    let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs();
    let instances = instances
        .iter()
        .map(|inst| {
            let mut kps = vec![Keypoint::new(0.0, 0.0, 0); inst.keypoints.len()];
            for (i, k) in inst.keypoints.iter().enumerate() {
                let (x, y) = apply(&m, k.x, k.y);
                let inside = x >= 0.0 && y >= 0.0 && x <= limit && y <= limit;
                let v = if k.v > 0 && inside { k.v } else { 0 };
                let j = if params.hflip { perm[i] } else { i };
                kps[j] = Keypoint::new(x, y, v);
            }
            let b = &inst.bbox;
            let corners = [(b.x, b.y), (b.x + b.w, b.y), (b.x, b.y + b.h), (b.x + b.w, b.y + b.h)];
            let pts: Vec<(f64, f64)> = corners.iter().map(|&(x, y)| apply(&m, x, y)).collect();
            let x0 = pts.iter().map(|p| p.0).fold(f64::MAX, f64::min);
            let x1 = pts.iter().map(|p| p.0).fold(f64::MIN, f64::max);
            let y0 = pts.iter().map(|p| p.1).fold(f64::MAX, f64::min);
            let y1 = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max);
            // pixel i spans [i - 0.5, i + 0.5]
            let (cx0, cy0) = (x0.max(-0.5), y0.max(-0.5));
            let (cx1, cy1) = (x1.min(out as f64 - 0.5), y1.min(out as f64 - 0.5));
            let bbox = if cx1 > cx0 && cy1 > cy0 {
                BBox { x: cx0, y: cy0, w: cx1 - cx0, h: cy1 - cy0 }
            } else {
                BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
            };
            Instance {
                id: inst.id,
                image_id: inst.image_id,
                keypoints: kps,
                bbox,
                area: inst.area * det,
            }
        })
        .collect();
    (image, instances)
}
