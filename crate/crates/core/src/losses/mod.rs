//! Offset regression loss, masked heatmap loss, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::network::NetworkOutput;
use crate::targets::DenseTargets;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const DEFAULT_LAMBDA: f64 = 0.03;
/// Smooth-L1 threshold in output pixels.
pub const SMOOTH_L1_DELTA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_h: f64,
    pub total: f64,
    pub lambda: f64,
    pub supervised_pixels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_p: Var,
    pub l_h: Var,
    pub total: Var,
}

fn check_shape<T: Scalar>(g: &Graph<T>, v: Var, t: &Tensor<f32>, what: &str) -> Result<(), TensorError> {
    if g.shape(v) != t.shape() {
        return Err(TensorError::Shape {
            op: "loss",
            detail: format!("{what}: prediction {:?} vs target {:?}", g.shape(v), t.shape()),
        });
    }
    Ok(())
}

/// Per-component weights `valid / Z / n` of the regression loss, and the
/// number of supervised pixels `n`.
pub fn regression_weights(targets: &DenseTargets) -> (Tensor<f64>, usize) {
    let s = targets.offsets.shape();
    let (n, c2, plane) = (s[0], s[1], s[2] * s[3]);
    let k = c2 / 2;
    let valid = targets.offset_valid.data();
    let supervised = valid.iter().filter(|&&v| v > 0.0).count();
    let mut w = vec![0.0f64; n * c2 * plane];
    if supervised > 0 {
        let kv = targets.keypoint_valid.data();
        let z = targets.instance_size.data();
        for b in 0..n {
            for m in 0..plane {
                if valid[b * plane + m] == 0.0 {
                    continue;
                }
                let base = 1.0 / z[b * plane + m] as f64 / supervised as f64;
                for j in 0..k {
                    if kv[(b * k + j) * plane + m] > 0.0 {
                        w[(b * c2 + 2 * j) * plane + m] = base;
                        w[(b * c2 + 2 * j + 1) * plane + m] = base;
                    }
                }
            }
        }
    }
    (Tensor::new(s, w).expect("weight shape"), supervised)
}

/// Normalised smooth-L1 over supervised pixels; zero (a constant) when
/// nothing is supervised.
pub fn regression_loss<T: Scalar>(g: &mut Graph<T>, offsets: Var, targets: &DenseTargets) -> Result<(Var, usize), TensorError> {
    check_shape(g, offsets, &targets.offsets, "offsets")?;
    let (w, supervised) = regression_weights(targets);
    if supervised == 0 {
        return Ok((g.constant(Tensor::scalar(T::zero())), 0));
    }
    let target = g.constant(targets.offsets.cast());
    let d = g.sub(offsets, target)?;
    let s = g.smooth_l1(d, T::from_f64(SMOOTH_L1_DELTA))?;
    let wv = g.constant(w.cast());
    let weighted = g.mul(s, wv)?;
    Ok((g.sum(weighted)?, supervised))
}

/// Mean of `(M * (P - P*))^2`.
fn masked_mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Var, TensorError> {
    let t = g.constant(target.cast());
    let m = g.constant(mask.cast());
    let d = g.sub(pred, t)?;
    let md = g.mul(d, m)?;
    let sq = g.mul(md, md)?;
    g.mean(sq)
}

pub fn heatmap_loss<T: Scalar>(g: &mut Graph<T>, heatmaps: Var, center: Var, targets: &DenseTargets) -> Result<Var, TensorError> {
    check_shape(g, heatmaps, &targets.kpt_heatmaps, "keypoint heatmaps")?;
    check_shape(g, center, &targets.center_heatmap, "center heatmap")?;
    let h = masked_mse(g, heatmaps, &targets.kpt_heatmaps, &targets.heat_mask)?;
    let c = masked_mse(g, center, &targets.center_heatmap, &targets.center_mask)?;
    g.add(h, c)
}

/// `l_h + lambda * l_p`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    output: &NetworkOutput,
    targets: &DenseTargets,
    lambda: f64,
) -> Result<(LossVars, LossReport), TensorError> {
    let (l_p, supervised) = regression_loss(g, output.offsets, targets)?;
    let l_h = heatmap_loss(g, output.heatmaps, output.center, targets)?;
    let weighted = g.scale(l_p, T::from_f64(lambda))?;
    let total = g.add(l_h, weighted)?;
    let report = LossReport {
        l_p: g.value(l_p).item().to_f64(),
        l_h: g.value(l_h).item().to_f64(),
        total: g.value(total).item().to_f64(),
        lambda,
        supervised_pixels: supervised,
    };
    Ok((LossVars { l_p, l_h, total }, report))
}
