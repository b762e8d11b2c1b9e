//! Skeleton overlays written as PPM.

use std::path::Path;

use crate::pose::Skeleton;
use crate::synth::{hsv, ppm};
use crate::tensor::Tensor;

fn pose_color(i: usize) -> [f32; 3] {
    hsv((i as f32 * 0.618_034).fract(), 0.9, 1.0)
}

fn put(image: &mut Tensor<f32>, x: i64, y: i64, color: [f32; 3]) {
    let (h, w) = (image.shape()[1] as i64, image.shape()[2] as i64);
    if x < 0 || y < 0 || x >= w || y >= h {
        return;
    }
    let plane = (h * w) as usize;
    let i = (y * w + x) as usize;
    let data = image.data_mut();
    for (c, v) in color.iter().enumerate() {
        data[c * plane + i] = *v;
    }
}

fn line(image: &mut Tensor<f32>, a: [f64; 2], b: [f64; 2], color: [f32; 3]) {
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a[0] + (b[0] - a[0]) * t;
        let y = a[1] + (b[1] - a[1]) * t;
        put(image, x.round() as i64, y.round() as i64, color);
    }
}

/// Draw every pose's sticks, then 3x3 keypoint dots. Returns the image and
/// the number of stick segments drawn.
pub fn render_poses(image: &Tensor<f32>, poses: &[Vec<[f64; 2]>], skeleton: &Skeleton) -> (Tensor<f32>, usize) {
    let mut out = image.clone();
    let mut segments = 0;
    for (i, pose) in poses.iter().enumerate() {
        let color = pose_color(i);
        for &(a, b) in &skeleton.sticks {
            let (pa, pb) = (pose[a], pose[b]);
            if pa.iter().chain(&pb).all(|v| v.is_finite()) {
                line(&mut out, pa, pb, color);
                segments += 1;
            }
        }
        for p in pose.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            let (cx, cy) = (p[0].round() as i64, p[1].round() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut out, cx + dx, cy + dy, [1.0, 1.0, 1.0]);
                }
            }
            put(&mut out, cx, cy, color);
        }
    }
    (out, segments)
}

/// Render and write a binary PPM.
pub fn visualize(
    image: &Tensor<f32>,
    poses: &[Vec<[f64; 2]>],
    skeleton: &Skeleton,
    path: impl AsRef<Path>,
) -> std::io::Result<usize> {
    let (out, segments) = render_poses(image, poses, skeleton);
    ppm::write(path, &out)?;
    Ok(segments)
}
