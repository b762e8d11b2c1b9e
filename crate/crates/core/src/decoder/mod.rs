//! Inference: center NMS, dense pose readout, pose NMS and learned ranking,
//! with optional flip and multi-scale testing and keypoint absorbing.

use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::network::{predict, NetworkConfig, NetworkError, Params, Prediction};
use crate::pose::{keypoint_similarity, CandidatePose, Skeleton};
use crate::tensor::Tensor;

mod scoring;
pub use scoring::{feature_dim, features, raw_features, sigmoid, ScoringNet, SCORING_HIDDEN};

/// Scales of multi-scale testing.
pub const MULTI_SCALES: [f64; 3] = [0.5, 1.0, 2.0];
/// Images per forward pass during batched inference.
const INFER_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub center_heat_min: f64,
    pub max_candidates: usize,
    pub pose_nms_oks_thresh: f64,
    pub absorb: bool,
    /// Output pixels.
    pub absorb_radius: f64,
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            center_heat_min: 0.01,
            max_candidates: 30,
            pose_nms_oks_thresh: 0.05,
            absorb: false,
            absorb_radius: 3.0,
            scales: vec![1.0],
            flip: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("scales {:?} must be non-empty and positive", self.scales));
        }
        if self.max_candidates == 0 {
            return bad("max_candidates must be positive".into());
        }
        if !self.center_heat_min.is_finite() || !self.pose_nms_oks_thresh.is_finite() {
            return bad("thresholds must be finite".into());
        }
        if !(self.absorb_radius >= 0.0) {
            return bad(format!("absorb_radius {} must be non-negative", self.absorb_radius));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("predictions line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Network outputs for one image at output resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Maps {
    pub num_keypoints: usize,
    pub height: usize,
    pub width: usize,
    /// `K` planes.
    pub heat: Vec<f32>,
    pub center: Vec<f32>,
    /// `2K` planes, `(dx, dy)` per keypoint.
    pub offsets: Vec<f32>,
}

impl Maps {
    pub fn zeros(num_keypoints: usize, height: usize, width: usize) -> Self {
        let p = height * width;
        Self {
            num_keypoints,
            height,
            width,
            heat: vec![0.0; num_keypoints * p],
            center: vec![0.0; p],
            offsets: vec![0.0; 2 * num_keypoints * p],
        }
    }

    /// Image `b` of a batched prediction.
    pub fn from_prediction(pred: &Prediction<f32>, b: usize) -> Self {
        let s = pred.heatmaps.shape();
        let (k, h, w) = (s[1], s[2], s[3]);
        let p = h * w;
        Self {
            num_keypoints: k,
            height: h,
            width: w,
            heat: pred.heatmaps.data()[b * k * p..(b + 1) * k * p].to_vec(),
            center: pred.center.data()[b * p..(b + 1) * p].to_vec(),
            offsets: pred.offsets.data()[b * 2 * k * p..(b + 1) * 2 * k * p].to_vec(),
        }
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn heat_plane(&self, k: usize) -> &[f32] {
        &self.heat[k * self.plane()..(k + 1) * self.plane()]
    }

    pub fn offset_plane(&self, c: usize) -> &[f32] {
        &self.offsets[c * self.plane()..(c + 1) * self.plane()]
    }

    /// Element-wise mean of maps with identical shapes.
    pub fn average(items: &[Maps]) -> Maps {
        let mut out = items[0].clone();
        if items.len() > 1 {
            let n = items.len() as f32;
            for (dst, get) in [
                (&mut out.heat, (|m: &Maps| &m.heat) as fn(&Maps) -> &Vec<f32>),
                (&mut out.center, |m: &Maps| &m.center),
                (&mut out.offsets, |m: &Maps| &m.offsets),
            ] {
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = items.iter().map(|m| get(m)[i]).sum::<f32>() / n;
                }
            }
        }
        out
    }
}

/// Bilinear read with the position clamped into the plane.
pub fn sample_clamped(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let at = |xx: usize, yy: usize| plane[yy * w + xx] as f64;
    if fx == 0.0 && fy == 0.0 {
        return at(x0, y0);
    }
    (1.0 - fx) * (1.0 - fy) * at(x0, y0)
        + fx * (1.0 - fy) * at(x1, y0)
        + (1.0 - fx) * fy * at(x0, y1)
        + fx * fy * at(x1, y1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub heat: f32,
}

/// Pixels strictly above all 3x3 neighbours with heat above `min_heat`,
/// by heat descending then scan order.
pub fn local_maxima(plane: &[f32], h: usize, w: usize, min_heat: f64) -> Vec<Peak> {
    let mut peaks = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            if (v as f64) <= min_heat {
                continue;
            }
            let mut strict = true;
            'nb: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if (nx, ny) != (x, y) && plane[ny * w + nx] >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                peaks.push(Peak { x, y, heat: v });
            }
        }
    }
    peaks.sort_by(|a, b| b.heat.total_cmp(&a.heat));
    peaks
}

pub fn center_nms(maps: &Maps, cfg: &DecodeConfig) -> Vec<Peak> {
    local_maxima(&maps.center, maps.height, maps.width, cfg.center_heat_min)
}

/// Build a candidate from keypoints in output coordinates, reading heats
/// from `maps`.
fn assemble(maps: &Maps, center: [f64; 2], keypoints: Vec<[f64; 2]>, center_heat: f64, stride: f64) -> CandidatePose {
    let (h, w) = (maps.height, maps.width);
    let keypoint_heats: Vec<f64> = keypoints
        .iter()
        .enumerate()
        .map(|(k, p)| sample_clamped(maps.heat_plane(k), h, w, p[0], p[1]))
        .collect();
    let mut pose = CandidatePose {
        keypoints: keypoints.iter().map(|p| [p[0] * stride, p[1] * stride]).collect(),
        center: [center[0] * stride, center[1] * stride],
        keypoint_heats,
        center_heat,
        score: 0.0,
    };
    pose.score = pose.mean_heat();
    pose
}

/// The pose regressed at center pixel `(x, y)`, in input pixels.
pub fn read_pose(maps: &Maps, x: usize, y: usize, stride: usize) -> CandidatePose {
    let i = y * maps.width + x;
    let keypoints = (0..maps.num_keypoints)
        .map(|k| {
            let dx = maps.offset_plane(2 * k)[i] as f64;
            let dy = maps.offset_plane(2 * k + 1)[i] as f64;
            [x as f64 + dx, y as f64 + dy]
        })
        .collect();
    assemble(maps, [x as f64, y as f64], keypoints, maps.center[i] as f64, stride as f64)
}

/// OKS of `pose` against `reference`, using the reference's keypoint extent
/// as the area (at least one square pixel).
pub fn pose_oks(pose: &CandidatePose, reference: &CandidatePose, oks_k: &[f64]) -> f64 {
    let area = reference.extent_area().max(1.0);
    let n = pose.keypoints.len();
    let mut acc = 0.0;
    for k in 0..n {
        let (a, b) = (pose.keypoints[k], reference.keypoints[k]);
        let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        acc += keypoint_similarity(d2, area, oks_k[k]);
    }
    acc / n as f64
}

/// Greedy suppression by score: keep a pose when its OKS to every kept pose
/// is at most the threshold, up to `max_candidates`.
pub fn pose_nms(mut candidates: Vec<CandidatePose>, oks_k: &[f64], cfg: &DecodeConfig) -> Vec<CandidatePose> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<CandidatePose> = Vec::new();
    for c in candidates {
        if kept.len() == cfg.max_candidates {
            break;
        }
        if kept.iter().all(|k| pose_oks(&c, k, oks_k) <= cfg.pose_nms_oks_thresh) {
            kept.push(c);
        }
    }
    kept
}

/// Final score `center_heat * sigmoid(net)`, sorted descending. Without a
/// net the preliminary scores stay.
pub fn score_poses(mut candidates: Vec<CandidatePose>, skeleton: &Skeleton, net: Option<&ScoringNet>) -> Vec<CandidatePose> {
    match net {
        Some(net) => {
            for c in &mut candidates {
                c.score = c.center_heat * net.predict(&features(c, skeleton));
            }
        }
        None => warn!("no scoring net; ranking by mean keypoint heat"),
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    candidates
}

/// Snap each keypoint to the nearest heatmap peak of its type within
/// `absorb_radius` output pixels.
pub fn absorb(mut candidates: Vec<CandidatePose>, maps: &Maps, stride: usize, cfg: &DecodeConfig) -> Vec<CandidatePose> {
    let s = stride as f64;
    for k in 0..maps.num_keypoints {
        let peaks = local_maxima(maps.heat_plane(k), maps.height, maps.width, 0.01);
        if peaks.is_empty() {
            continue;
        }
        for c in &mut candidates {
            let (px, py) = (c.keypoints[k][0] / s, c.keypoints[k][1] / s);
            let mut best: Option<(f64, &Peak)> = None;
            for pk in &peaks {
                let d = ((pk.x as f64 - px).powi(2) + (pk.y as f64 - py).powi(2)).sqrt();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, pk));
                }
            }
            if let Some((d, pk)) = best {
                if d <= cfg.absorb_radius {
                    c.keypoints[k] = [pk.x as f64 * s, pk.y as f64 * s];
                    c.keypoint_heats[k] = pk.heat as f64;
                }
            }
        }
    }
    candidates
}

/// Maps produced at one test scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMaps {
    pub scale: f64,
    pub maps: Maps,
}

/// Resample every scale to `(height, width)` and average.
pub fn fuse(per_scale: &[ScaleMaps], height: usize, width: usize) -> Maps {
    let resampled: Vec<Maps> = per_scale
        .iter()
        .map(|sm| {
            let m = &sm.maps;
            if sm.scale == 1.0 && (m.height, m.width) == (height, width) {
                return m.clone();
            }
            let s = sm.scale;
            let mut out = Maps::zeros(m.num_keypoints, height, width);
            let read = |src: &[f32], dst: &mut [f32], div: f64| {
                for y in 0..height {
                    for x in 0..width {
                        dst[y * width + x] =
                            (sample_clamped(src, m.height, m.width, s * x as f64, s * y as f64) / div) as f32;
                    }
                }
            };
            let (p_src, p_dst) = (m.height * m.width, height * width);
            for k in 0..m.num_keypoints {
                read(m.heat_plane(k), &mut out.heat[k * p_dst..(k + 1) * p_dst], 1.0);
            }
            read(&m.center, &mut out.center, 1.0);
            for c in 0..2 * m.num_keypoints {
                read(&m.offsets[c * p_src..(c + 1) * p_src], &mut out.offsets[c * p_dst..(c + 1) * p_dst], s);
            }
            out
        })
        .collect();
    Maps::average(&resampled)
}

/// Center NMS on every scale, readout against the fused maps and joint
/// pose NMS. Returns the fused maps and candidates with preliminary scores.
pub fn decode_candidates(
    per_scale: &[ScaleMaps],
    height: usize,
    width: usize,
    stride: usize,
    skeleton: &Skeleton,
    cfg: &DecodeConfig,
) -> (Maps, Vec<CandidatePose>) {
    let fused = fuse(per_scale, height, width);
    let mut candidates = Vec::new();
    for sm in per_scale {
        let m = &sm.maps;
        for peak in center_nms(m, cfg) {
            if sm.scale == 1.0 && (m.height, m.width) == (height, width) {
                candidates.push(read_pose(&fused, peak.x, peak.y, stride));
                continue;
            }
            let s = sm.scale;
            let i = peak.y * m.width + peak.x;
            let (qx, qy) = (peak.x as f64, peak.y as f64);
            let keypoints = (0..m.num_keypoints)
                .map(|k| {
                    let dx = m.offset_plane(2 * k)[i] as f64;
                    let dy = m.offset_plane(2 * k + 1)[i] as f64;
                    [(qx + dx) / s, (qy + dy) / s]
                })
                .collect();
            let center = [qx / s, qy / s];
            let heat = sample_clamped(&fused.center, height, width, center[0], center[1]);
            candidates.push(assemble(&fused, center, keypoints, heat, stride as f64));
        }
    }
    let kept = pose_nms(candidates, &skeleton.oks_k, cfg);
    (fused, kept)
}

/// Scoring and optional absorbing applied to pose-NMS survivors.
pub fn finish(
    candidates: Vec<CandidatePose>,
    fused: &Maps,
    stride: usize,
    skeleton: &Skeleton,
    cfg: &DecodeConfig,
    net: Option<&ScoringNet>,
) -> Vec<CandidatePose> {
    let scored = score_poses(candidates, skeleton, net);
    if cfg.absorb {
        absorb(scored, fused, stride, cfg)
    } else {
        scored
    }
}

/// Horizontal mirror of a `[C, H, W]` image.
pub fn flip_image(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape()[2];
    let src = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let (row, x) = (i / w, i % w);
        src[row * w + (w - 1 - x)]
    })
}

/// Resize a `[C, H, W]` image by `scale`; output pixel `x` reads input
/// position `x / scale`.
pub fn resize_image(image: &Tensor<f32>, scale: f64) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if scale == 1.0 {
        return image.clone();
    }
    let (ho, wo) = ((h as f64 * scale).round() as usize, (w as f64 * scale).round() as usize);
    let src = image.data();
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                out[(ch * ho + y) * wo + x] = sample_clamped(plane, h, w, x as f64 / scale, y as f64 / scale) as f32;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out).expect("resize shape")
}

/// Maps of a flipped input brought back to the original frame: mirrored
/// columns, swapped left/right channels and negated horizontal offsets.
pub fn unflip(maps: &Maps, perm: &[usize], input_width: usize, stride: usize) -> Maps {
    let (h, w) = (maps.height, maps.width);
    let mut out = Maps::zeros(maps.num_keypoints, h, w);
    let p = h * w;
    let mirror = (input_width as f64 - 1.0) / stride as f64;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (mirror - x as f64, y as f64);
            let i = y * w + x;
            out.center[i] = sample_clamped(&maps.center, h, w, fx, fy) as f32;
            for k in 0..maps.num_keypoints {
                let j = perm[k];
                out.heat[k * p + i] = sample_clamped(maps.heat_plane(j), h, w, fx, fy) as f32;
                out.offsets[2 * k * p + i] = -sample_clamped(maps.offset_plane(2 * j), h, w, fx, fy) as f32;
                out.offsets[(2 * k + 1) * p + i] = sample_clamped(maps.offset_plane(2 * j + 1), h, w, fx, fy) as f32;
            }
        }
    }
    out
}

fn forward_maps(net: &NetworkConfig, params: &Params<f32>, images: &[Tensor<f32>]) -> Result<Vec<Maps>, DecodeError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let s = chunk[0].shape().to_vec();
        let data: Vec<f32> = chunk.iter().flat_map(|t| t.data().iter().copied()).collect();
        let batch = Tensor::new(&[chunk.len(), s[0], s[1], s[2]], data)
            .map_err(|e| DecodeError::Network(NetworkError::Tensor(e)))?;
        let pred = predict(net, params, &batch)?;
        out.extend((0..chunk.len()).map(|b| Maps::from_prediction(&pred, b)));
    }
    Ok(out)
}

/// Per-image, per-scale maps for `[3, H, W]` images of one size, with flip
/// averaging when configured.
pub fn infer_maps(
    net: &NetworkConfig,
    params: &Params<f32>,
    images: &[Tensor<f32>],
    skeleton: &Skeleton,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<ScaleMaps>>, DecodeError> {
    cfg.validate()?;
    let mut per_image: Vec<Vec<ScaleMaps>> = vec![Vec::new(); images.len()];
    if images.is_empty() {
        return Ok(per_image);
    }
    let perm = skeleton.flip_permutation();
    if perm.len() != net.num_keypoints {
        return Err(DecodeError::Config(format!(
            "skeleton has {} keypoints, network {}",
            perm.len(),
            net.num_keypoints
        )));
    }
    for &scale in &cfg.scales {
        let scaled: Vec<Tensor<f32>> = images.iter().map(|im| resize_image(im, scale)).collect();
        let s = scaled[0].shape();
        if s[1] % net.output_stride != 0 || s[2] % net.output_stride != 0 {
            return Err(DecodeError::Config(format!(
                "scale {scale} gives {}x{}, not divisible by the output stride",
                s[2], s[1]
            )));
        }
        let in_w = s[2];
        let maps = forward_maps(net, params, &scaled)?;
        let maps = if cfg.flip {
            let flipped: Vec<Tensor<f32>> = scaled.iter().map(flip_image).collect();
            let fmaps = forward_maps(net, params, &flipped)?;
            maps.into_iter()
                .zip(fmaps)
                .map(|(m, f)| Maps::average(&[m, unflip(&f, &perm, in_w, net.output_stride)]))
                .collect()
        } else {
            maps
        };
        for (dst, m) in per_image.iter_mut().zip(maps) {
            dst.push(ScaleMaps { scale, maps: m });
        }
    }
    Ok(per_image)
}

/// Full pipeline over a set of same-size `[3, H, W]` images.
pub fn decode_batch(
    net: &NetworkConfig,
    params: &Params<f32>,
    images: &[Tensor<f32>],
    skeleton: &Skeleton,
    cfg: &DecodeConfig,
    scoring: Option<&ScoringNet>,
) -> Result<Vec<Vec<CandidatePose>>, DecodeError> {
    let maps = infer_maps(net, params, images, skeleton, cfg)?;
    Ok(images
        .iter()
        .zip(&maps)
        .map(|(im, per_scale)| {
            let (h, w) = (im.shape()[1] / net.output_stride, im.shape()[2] / net.output_stride);
            let (fused, cands) = decode_candidates(per_scale, h, w, net.output_stride, skeleton, cfg);
            finish(cands, &fused, net.output_stride, skeleton, cfg, scoring)
        })
        .collect())
}

pub fn decode(
    net: &NetworkConfig,
    params: &Params<f32>,
    image: &Tensor<f32>,
    skeleton: &Skeleton,
    cfg: &DecodeConfig,
    scoring: Option<&ScoringNet>,
) -> Result<Vec<CandidatePose>, DecodeError> {
    Ok(decode_batch(net, params, std::slice::from_ref(image), skeleton, cfg, scoring)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    /// Flat `[x, y, heat]` per keypoint, input pixels.
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl PosePrediction {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.keypoints.chunks_exact(3).map(|c| [c[0], c[1]]).collect()
    }
}

impl From<&CandidatePose> for PosePrediction {
    fn from(c: &CandidatePose) -> Self {
        let keypoints = c
            .keypoints
            .iter()
            .zip(&c.keypoint_heats)
            .flat_map(|(p, h)| [p[0], p[1], *h])
            .collect();
        Self { keypoints, score: c.score }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: u64,
    pub poses: Vec<PosePrediction>,
}

/// One JSON record per line.
pub fn write_predictions(path: impl AsRef<Path>, records: &[ImagePredictions]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<ImagePredictions>, DecodeError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImagePredictions =
            serde_json::from_str(&line).map_err(|e| DecodeError::Format { line: i + 1, message: e.to_string() })?;
        if rec.poses.iter().any(|p| p.keypoints.len() % 3 != 0) {
            return Err(DecodeError::Format { line: i + 1, message: "keypoints length not a multiple of 3".into() });
        }
        out.push(rec);
    }
    Ok(out)
}
