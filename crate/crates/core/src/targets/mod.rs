//! Dense training targets: keypoint/center heatmaps, offset maps over the
//! central regions, and loss masks.

use std::collections::BTreeMap;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::pose::{pose_center, Instance};
use crate::tensor::{Tensor, TensorError};

/// Mask weight outside a keypoint (or center) region.
pub const BACKGROUND_WEIGHT: f32 = 0.1;
/// Heat above which a pixel counts as inside a region.
pub const REGION_HEAT: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub output_stride: usize,
    /// Gaussian standard deviation, output pixels.
    pub sigma: f64,
    /// Chebyshev radius of the supervised central region, output pixels.
    pub center_radius: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            output_stride: 4,
            sigma: 2.0,
            center_radius: 4,
        }
    }
}

/// Ground truth for a batch of images; every field is `[N, C, Ho, Wo]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets {
    /// `C = K`
    pub kpt_heatmaps: Tensor<f32>,
    /// `C = 1`
    pub center_heatmap: Tensor<f32>,
    /// `C = 2K`, `(dx, dy)` per keypoint in output pixels.
    pub offsets: Tensor<f32>,
    /// `C = 1`; 1 on central-region pixels.
    pub offset_valid: Tensor<f32>,
    /// `C = K`; 1 where the owning instance has keypoint k labelled.
    pub keypoint_valid: Tensor<f32>,
    /// `C = 1`; owning instance size `sqrt(H^2 + W^2) / stride`, 0 elsewhere.
    pub instance_size: Tensor<f32>,
    /// `C = K`, values in {0.1, 1}.
    pub heat_mask: Tensor<f32>,
    /// `C = 1`, values in {0.1, 1}.
    pub center_mask: Tensor<f32>,
    /// Instances without labelled keypoints that were left out.
    pub skipped: usize,
}

struct Prepared {
    center: (f64, f64),
    size: f64,
}

/// Build targets for one image of `image_size x image_size` pixels.
pub fn build_targets(instances: &[Instance], num_keypoints: usize, image_size: usize, cfg: &TargetConfig) -> DenseTargets {
    assert!(image_size % cfg.output_stride == 0, "output stride must divide the image size");
    let s = cfg.output_stride as f64;
    let ho = image_size / cfg.output_stride;
    let wo = ho;
    let plane = ho * wo;
    let k = num_keypoints;

    let mut heat = vec![0.0f32; k * plane];
    let mut center_heat = vec![0.0f32; plane];
    let mut offsets = vec![0.0f32; 2 * k * plane];
    let mut offset_valid = vec![0.0f32; plane];
    let mut keypoint_valid = vec![0.0f32; k * plane];
    let mut size = vec![0.0f32; plane];

    let mut skipped = 0;
    let mut prepared: Vec<Option<Prepared>> = Vec::with_capacity(instances.len());
    for inst in instances {
        match pose_center(inst) {
            Ok((cx, cy)) => prepared.push(Some(Prepared {
                center: (cx / s, cy / s),
                size: inst.bbox.diagonal() / s,
            })),
            Err(_) => {
                skipped += 1;
                prepared.push(None);
            }
        }
    }
    if skipped > 0 {
        debug!("build_targets: skipped {skipped} instance(s) without labelled keypoints");
    }

    let reach = 3.0 * cfg.sigma;
    for (inst, prep) in instances.iter().zip(&prepared) {
        let Some(prep) = prep else { continue };
        for (j, kp) in inst.keypoints.iter().enumerate().filter(|(_, kp)| kp.labelled()) {
            splat(&mut heat[j * plane..(j + 1) * plane], wo, ho, kp.x / s, kp.y / s, cfg.sigma, reach);
        }
        splat(&mut center_heat, wo, ho, prep.center.0, prep.center.1, cfg.sigma, reach);
    }

    // Central regions; a contested pixel goes to the nearest center, ties to
    // the earlier instance.
    let r = cfg.center_radius as f64;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; plane];
    for (idx, prep) in prepared.iter().enumerate() {
        let Some(prep) = prep else { continue };
        let (cx, cy) = prep.center;
        let x0 = (cx - r).ceil().max(0.0) as usize;
        let y0 = (cy - r).ceil().max(0.0) as usize;
        let x1 = (cx + r).floor().min(wo as f64 - 1.0);
        let y1 = (cy + r).floor().min(ho as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for my in y0..=y1 as usize {
            for mx in x0..=x1 as usize {
                let d2 = (mx as f64 - cx).powi(2) + (my as f64 - cy).powi(2);
                let slot = &mut best[my * wo + mx];
                if slot.is_none_or(|(bd, _)| d2 < bd) {
                    *slot = Some((d2, idx));
                }
            }
        }
    }
    for (m, slot) in best.iter().enumerate() {
        let Some((_, idx)) = *slot else { continue };
        let inst = &instances[idx];
        let (mx, my) = ((m % wo) as f64, (m / wo) as f64);
        offset_valid[m] = 1.0;
        size[m] = prepared[idx].as_ref().unwrap().size as f32;
        for (j, kp) in inst.keypoints.iter().enumerate() {
            if !kp.labelled() {
                continue;
            }
            offsets[2 * j * plane + m] = (kp.x / s - mx) as f32;
            offsets[(2 * j + 1) * plane + m] = (kp.y / s - my) as f32;
            keypoint_valid[j * plane + m] = 1.0;
        }
    }

    let mask = |h: &[f32]| -> Vec<f32> { h.iter().map(|&v| if v > REGION_HEAT { 1.0 } else { BACKGROUND_WEIGHT }).collect() };
    let heat_mask = mask(&heat);
    let center_mask = mask(&center_heat);
    let t = |c: usize, data: Vec<f32>| Tensor::new(&[1, c, ho, wo], data).expect("target shape");
    DenseTargets {
        kpt_heatmaps: t(k, heat),
        center_heatmap: t(1, center_heat),
        offsets: t(2 * k, offsets),
        offset_valid: t(1, offset_valid),
        keypoint_valid: t(k, keypoint_valid),
        instance_size: t(1, size),
        heat_mask: t(k, heat_mask),
        center_mask: t(1, center_mask),
        skipped,
    }
}

/// Gaussian heat at squared distance `d2`.
pub fn gaussian(d2: f64, sigma: f64) -> f32 {
    (-d2 / (2.0 * sigma * sigma)).exp() as f32
}

/// Max-splat a truncated Gaussian centred at `(cx, cy)` into `plane`.
fn splat(plane: &mut [f32], w: usize, h: usize, cx: f64, cy: f64, sigma: f64, reach: f64) {
    let x0 = (cx - reach).ceil().max(0.0) as usize;
    let y0 = (cy - reach).ceil().max(0.0) as usize;
    let x1 = (cx + reach).floor().min(w as f64 - 1.0);
    let y1 = (cy + reach).floor().min(h as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            if d2 <= reach * reach {
                let v = gaussian(d2, sigma);
                let p = &mut plane[y * w + x];
                *p = p.max(v);
            }
        }
    }
}

impl DenseTargets {
    fn fields(&self) -> [(&'static str, &Tensor<f32>); 8] {
        [
            ("kpt_heatmaps", &self.kpt_heatmaps),
            ("center_heatmap", &self.center_heatmap),
            ("offsets", &self.offsets),
            ("offset_valid", &self.offset_valid),
            ("keypoint_valid", &self.keypoint_valid),
            ("instance_size", &self.instance_size),
            ("heat_mask", &self.heat_mask),
            ("center_mask", &self.center_mask),
        ]
    }

    pub fn batch_size(&self) -> usize {
        self.kpt_heatmaps.shape()[0]
    }

    /// Concatenate along the batch axis.
    pub fn stack(items: &[DenseTargets]) -> DenseTargets {
        assert!(!items.is_empty(), "cannot stack zero targets");
        let cat = |get: fn(&DenseTargets) -> &Tensor<f32>| {
            let mut shape = get(&items[0]).shape().to_vec();
            shape[0] = items.iter().map(|t| get(t).shape()[0]).sum();
            let data = items.iter().flat_map(|t| get(t).data().iter().copied()).collect();
            Tensor::new(&shape, data).expect("stack shape")
        };
        DenseTargets {
            kpt_heatmaps: cat(|t| &t.kpt_heatmaps),
            center_heatmap: cat(|t| &t.center_heatmap),
            offsets: cat(|t| &t.offsets),
            offset_valid: cat(|t| &t.offset_valid),
            keypoint_valid: cat(|t| &t.keypoint_valid),
            instance_size: cat(|t| &t.instance_size),
            heat_mask: cat(|t| &t.heat_mask),
            center_mask: cat(|t| &t.center_mask),
            skipped: items.iter().map(|t| t.skipped).sum(),
        }
    }

    /// Write one DKTN dump per field plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &TargetConfig) -> Result<(), TensorError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, t) in self.fields() {
            let file = format!("{name}.dktn");
            t.save(dir.join(&file))?;
            files.insert(name, file);
        }
        let manifest = serde_json::json!({
            "config": cfg,
            "skipped": self.skipped,
            "tensors": files,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TensorError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TensorError::Format(e.to_string()))?;
        let get = |name: &str| -> Result<Tensor<f32>, TensorError> {
            let file = manifest["tensors"][name]
                .as_str()
                .ok_or_else(|| TensorError::Format(format!("manifest lacks {name}")))?;
            Tensor::load(dir.join(file))
        };
        Ok(Self {
            kpt_heatmaps: get("kpt_heatmaps")?,
            center_heatmap: get("center_heatmap")?,
            offsets: get("offsets")?,
            offset_valid: get("offset_valid")?,
            keypoint_valid: get("keypoint_valid")?,
            instance_size: get("instance_size")?,
            heat_mask: get("heat_mask")?,
            center_mask: get("center_mask")?,
            skipped: manifest["skipped"].as_u64().unwrap_or(0) as usize,
        })
    }
}
