//! Deterministic synthetic multi-person scenes and training-time
//! augmentation.

mod augment;
mod figure;
pub mod ppm;
mod render;

pub use augment::{augment, warp_image, AugmentParams};
pub use figure::Body;
pub use render::{hsv, Canvas, Capsule, BACKGROUND_MAX};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{AnnotationSet, BBox, ImageInfo, Instance, Keypoint, PoseError, Skeleton};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("image {index}: no valid scene after {attempts} attempts")]
    Degenerate { index: usize, attempts: usize },
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Inclusive range of persons per image.
    pub persons_per_image: (usize, usize),
    pub skeleton: String,
    /// Limb thickness range, pixels.
    pub limb_thickness: (f64, f64),
    /// Person height range as a fraction of the image size.
    #[serde(default = "default_height")]
    pub person_height: (f64, f64),
    pub seed: u64,
}

fn default_height() -> (f64, f64) {
    (0.45, 0.8)
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            persons_per_image: (1, 3),
            skeleton: "mini7".into(),
            limb_thickness: (3.0, 5.0),
            person_height: default_height(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<Skeleton, SynthError> {
        if ![64, 128, 256].contains(&self.image_size) {
            return Err(SynthError::Spec(format!(
                "image_size {} not in {{64, 128, 256}}",
                self.image_size
            )));
        }
        let (lo, hi) = self.persons_per_image;
        if lo < 1 || hi < lo || hi > 8 {
            return Err(SynthError::Spec(format!("persons_per_image ({lo}, {hi}) must satisfy 1 <= lo <= hi <= 8")));
        }
        let (t0, t1) = self.limb_thickness;
        if !(t0 > 0.0 && t1 >= t0) {
            return Err(SynthError::Spec(format!("limb_thickness ({t0}, {t1}) invalid")));
        }
        let (h0, h1) = self.person_height;
        if !(h0 > 0.0 && h1 >= h0 && h1 <= 1.0) {
            return Err(SynthError::Spec(format!("person_height ({h0}, {h1}) invalid")));
        }
        Skeleton::builtin(&self.skeleton).ok_or_else(|| SynthError::Spec(format!("unknown skeleton {:?}", self.skeleton)))
    }
}

/// Generated images (`[3, S, S]`, values in `[0, 1]`) with annotations.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub images: Vec<Tensor<f32>>,
    pub annotations: AnnotationSet,
}

const MAX_ATTEMPTS: usize = 200;
/// Minimum distance between two person centers, pixels.
const MIN_CENTER_GAP: f64 = 8.0;
/// Later-person foreground pixels (of 9) needed to mark a joint occluded.
const OCCLUDED_PIXELS: usize = 6;

pub fn generate_dataset(spec: &SceneSpec, n_images: usize) -> Result<SynthDataset, SynthError> {
    if n_images == 0 {
        return Err(SynthError::Spec("n_images must be positive".into()));
    }
    let skeleton = spec.validate()?;
    let mut images = Vec::with_capacity(n_images);
    let mut infos = Vec::with_capacity(n_images);
    let mut instances = Vec::new();
    for index in 0..n_images {
        let (image, people) = generate_image(spec, &skeleton, index)?;
        let image_id = index as u64 + 1;
        infos.push(ImageInfo {
            id: image_id,
            file: format!("img_{index:06}.ppm"),
            width: spec.image_size as u32,
            height: spec.image_size as u32,
        });
        for mut inst in people {
            inst.image_id = image_id;
            inst.id = instances.len() as u64 + 1;
            instances.push(inst);
        }
        images.push(image);
    }
    Ok(SynthDataset {
        images,
        annotations: AnnotationSet {
            skeleton,
            images: infos,
            instances,
        },
    })
}

/// One scene, drawn from the RNG stream `(spec.seed, index)`.
pub fn generate_image(spec: &SceneSpec, skeleton: &Skeleton, index: usize) -> Result<(Tensor<f32>, Vec<Instance>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(scene) = try_scene(spec, skeleton, &mut rng) {
            return Ok(scene);
        }
    }
    Err(SynthError::Degenerate {
        index,
        attempts: MAX_ATTEMPTS,
    })
}

struct Person {
    keypoints: Vec<[f64; 2]>,
    capsules: Vec<Capsule>,
}

fn place_person<R: Rng>(spec: &SceneSpec, skeleton: &Skeleton, rng: &mut R, others: &[Person]) -> Option<Person> {
    let size = spec.image_size as f64;
    let height = rng.random_range(spec.person_height.0..=spec.person_height.1) * size;
    let body = Body::sample(rng, height);
    let local = body.keypoints(skeleton);
    let thickness = rng.random_range(spec.limb_thickness.0..=spec.limb_thickness.1);
    let radius = thickness / 2.0;
    let margin = 1.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &local {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let (lo_x, hi_x) = (margin - x0, size - 1.0 - margin - x1);
    let (lo_y, hi_y) = (margin - y0, size - 1.0 - margin - y1);
    if lo_x > hi_x || lo_y > hi_y {
        return None;
    }
    let (tx, ty) = (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
    let keypoints: Vec<[f64; 2]> = local.iter().map(|p| [p[0] + tx, p[1] + ty]).collect();

    let center = mean(&keypoints);
    for o in others {
        let c = mean(&o.keypoints);
        if ((c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2)).sqrt() < MIN_CENTER_GAP {
            return None;
        }
    }

    // Left limbs are drawn lighter than right limbs so the sides are
    // distinguishable.
    let base = hsv(rng.random_range(0.0..1.0), rng.random_range(0.5..0.9), rng.random_range(0.8..1.0));
    let light = base.map(|c| c + 0.35 * (1.0 - c));
    let dark = base.map(|c| 0.8 * c);
    let mut capsules = Vec::with_capacity(skeleton.num_sticks() + 1);
    let side = |i: usize| figure::side_of(&skeleton.names[i]);
    let mut order: Vec<usize> = (0..skeleton.num_sticks()).collect();
    // right side first so left limbs stay on top
    order.sort_by_key(|&s| side(skeleton.sticks[s].0) + side(skeleton.sticks[s].1));
    for s in order {
        let (a, b) = skeleton.sticks[s];
        let color = match side(a) + side(b) {
            v if v > 0 => light,
            v if v < 0 => dark,
            _ => base,
        };
        capsules.push(Capsule {
            a: keypoints[a],
            b: keypoints[b],
            radius,
            color,
        });
    }
    let head = body.head.map(|v| v);
    let head = [head[0] + tx, head[1] + ty];
    capsules.push(Capsule {
        a: head,
        b: head,
        radius: radius * 1.6,
        color: base,
    });
    Some(Person { keypoints, capsules })
}

fn mean(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

fn try_scene<R: Rng>(spec: &SceneSpec, skeleton: &Skeleton, rng: &mut R) -> Option<(Tensor<f32>, Vec<Instance>)> {
    let size = spec.image_size;
    let count = rng.random_range(spec.persons_per_image.0..=spec.persons_per_image.1);
    let mut canvas = Canvas::textured(size, size, rng);
    let mut people: Vec<Person> = Vec::with_capacity(count);
    while people.len() < count {
        let mut placed = None;
        for _ in 0..20 {
            if let Some(p) = place_person(spec, skeleton, rng, &people) {
                placed = Some(p);
                break;
            }
        }
        people.push(placed?);
    }

    let plane = size * size;
    let mut coverage = vec![vec![0.0f32; plane]; people.len()];
    for (p, cov) in people.iter().zip(coverage.iter_mut()) {
        for c in &p.capsules {
            canvas.paint(c, cov);
        }
    }

    let mut instances = Vec::with_capacity(people.len());
    for (i, p) in people.iter().enumerate() {
        let mut keypoints = Vec::with_capacity(p.keypoints.len());
        for kp in &p.keypoints {
            let inside = kp[0] >= 0.0 && kp[1] >= 0.0 && kp[0] <= (size - 1) as f64 && kp[1] <= (size - 1) as f64;
            let v = if !inside {
                0
            } else if occluded(kp, &coverage[i + 1..], size) {
                1
            } else {
                2
            };
            keypoints.push(Keypoint::new(kp[0], kp[1], v));
        }
        if keypoints.iter().filter(|k| k.v == 2).count() < 3 {
            return None;
        }
        let cov = &coverage[i];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0.0f64;
        for y in 0..size {
            for x in 0..size {
                let a = cov[y * size + x];
                if a > 0.0 {
                    area += a as f64;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        instances.push(Instance {
            id: 0,
            image_id: 0,
            keypoints,
            bbox: BBox {
                x: x0 as f64 - 0.5,
                y: y0 as f64 - 0.5,
                w: (x1 - x0 + 1) as f64,
                h: (y1 - y0 + 1) as f64,
            },
            area,
        });
    }
    Some((canvas.into_tensor(), instances))
}

fn occluded(kp: &[f64; 2], later: &[Vec<f32>], size: usize) -> bool {
    let (cx, cy) = (kp[0].round() as i64, kp[1].round() as i64);
    let mut covered = 0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                continue;
            }
            let i = y as usize * size + x as usize;
            if later.iter().any(|c| c[i] > 0.5) {
                covered += 1;
            }
        }
    }
    covered >= OCCLUDED_PIXELS
}

impl SynthDataset {
    /// Write `annotations.json`, plus one PPM and one DKTN dump per image.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.annotations.save(dir.join("annotations.json"))?;
        for (img, info) in self.images.iter().zip(&self.annotations.images) {
            ppm::write(dir.join(&info.file), img)?;
            img.save(dir.join(info.file.replace(".ppm", ".dktn")))?;
        }
        Ok(())
    }

    /// Load a directory written by [`SynthDataset::save`]. Pixel data comes
    /// from the DKTN dumps when present, else from the PPM files.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SynthError> {
        let dir = dir.as_ref();
        let annotations = AnnotationSet::load(dir.join("annotations.json"))?;
        let mut images = Vec::with_capacity(annotations.images.len());
        for info in &annotations.images {
            let dump = dir.join(info.file.replace(".ppm", ".dktn"));
            let img = if dump.exists() {
                Tensor::load(dump)?
            } else {
                ppm::read(dir.join(&info.file))?
            };
            images.push(img);
        }
        Ok(Self { images, annotations })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
