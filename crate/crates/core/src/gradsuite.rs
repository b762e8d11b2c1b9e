//! Finite-difference checks of every differentiable operation at f64.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptive::{adaptive_conv, AffineField};
use crate::decoder::ScoringNet;
use crate::losses::{heatmap_loss, regression_loss, SMOOTH_L1_DELTA};
use crate::targets::DenseTargets;
use crate::tensor::gradcheck::check;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per input and seed.
pub const PROBES: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub op: String,
    pub seeds: usize,
    /// Worst relative error over seeds, per input.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Vec<f64>, TensorError>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Scalar head that weights every output element differently.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let w = g.constant(Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn run(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
) -> Result<Vec<f64>, TensorError> {
    Ok(check(inputs, f, STEP, Some(PROBES), rng)?.per_input)
}

fn conv2d_case(rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TensorError> {
    let inputs = [uniform(rng, &[2, 4, 8, 8], -1.0, 1.0), uniform(rng, &[3, 4, 3, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)];
    run(rng, &inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        weighted_sum(g, y)
    })
}

fn bilinear_case(rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TensorError> {
    let image = uniform(rng, &[2, 3, 8, 8], -1.0, 1.0);
    // keep positions off integer grid lines, where the sampler has kinks
    let pos = Tensor::from_fn(&[2, 6, 2], |_| loop {
        let p: f64 = rng.random_range(-1.5..8.5);
        if (p - p.round()).abs() > 1e-3 {
            break p;
        }
    });
    run(rng, &[image, pos], |g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        weighted_sum(g, y)
    })
}

fn adaptive_case(rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TensorError> {
    let inputs = [
        uniform(rng, &[2, 2, 5, 5], -1.0, 1.0),
        uniform(rng, &[3, 2, 9], -1.0, 1.0),
        uniform(rng, &[3], -1.0, 1.0),
        uniform(rng, &[2, 4, 5, 5], -1.5, 1.5),
        uniform(rng, &[2, 2, 5, 5], -1.5, 1.5),
    ];
    run(rng, &inputs, |g, v| {
        let y = adaptive_conv(g, v[0], v[1], v[2], AffineField { a: v[3], t: v[4] })?;
        weighted_sum(g, y)
    })
}

/// Random dense targets for `n` images, `k` keypoints and `h x w` pixels.
fn random_targets(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize) -> DenseTargets {
    let mut t = |c: usize, f: &mut dyn FnMut(&mut ChaCha8Rng) -> f32| {
        let v: Vec<f32> = (0..n * c * h * w).map(|_| f(rng)).collect();
        Tensor::new(&[n, c, h, w], v).expect("target shape")
    };
    let mask = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { 0.1 };
    let bit = |r: &mut ChaCha8Rng| if r.random_bool(0.6) { 1.0 } else { 0.0 };
    DenseTargets {
        kpt_heatmaps: t(k, &mut |r| r.random_range(0.0..1.0)),
        center_heatmap: t(1, &mut |r| r.random_range(0.0..1.0)),
        offsets: t(2 * k, &mut |r| r.random_range(-4.0..4.0)),
        offset_valid: t(1, &mut |r| bit(r)),
        keypoint_valid: t(k, &mut |r| bit(r)),
        instance_size: t(1, &mut |r| r.random_range(1.0..6.0)),
        heat_mask: t(k, &mut |r| mask(r)),
        center_mask: t(1, &mut |r| mask(r)),
        skipped: 0,
    }
}

fn regression_case(rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TensorError> {
    let targets = random_targets(rng, 2, 3, 4, 5);
    // residuals stay clear of the smooth-L1 switch point
    let offsets = Tensor::from_fn(targets.offsets.shape(), |i| {
        let r: f64 = rng.random_range(0.05..2.5);
        let r = if (r - SMOOTH_L1_DELTA).abs() < 0.05 { r + 0.1 } else { r };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        targets.offsets.data()[i] as f64 + sign * r
    });
    run(rng, &[offsets], |g, v| Ok(regression_loss(g, v[0], &targets)?.0))
}

fn heatmap_case(rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TensorError> {
    let targets = random_targets(rng, 2, 3, 4, 5);
    let inputs = [uniform(rng, &[2, 3, 4, 5], -0.5, 1.5), uniform(rng, &[2, 1, 4, 5], -0.5, 1.5)];
    run(rng, &inputs, |g, v| heatmap_loss(g, v[0], v[1], &targets))
}

/// Smallest |pre-activation| of the two hidden layers over a batch.
fn min_hidden_preactivation(params: &[Tensor<f64>], x: &Tensor<f64>) -> f64 {
    let mut min = f64::MAX;
    let d = x.shape()[1];
    for row in x.data().chunks(d) {
        let mut h = row.to_vec();
        for layer in 0..2 {
            let (b, w) = (&params[2 * layer], &params[2 * layer + 1]);
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let pre: Vec<f64> =
                (0..o).map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * h[c]).sum::<f64>()).collect();
            min = pre.iter().fold(min, |m, v| m.min(v.abs()));
            h = pre.iter().map(|v| v.max(0.0)).collect();
        }
    }
    min
}

fn scoring_case(rng: &mut ChaCha8Rng) -> Result<Vec<f64>, TensorError> {
    let d = 9;
    let net = ScoringNet::new(d, rng.random());
    // names sort as fc1.bias, fc1.weight, fc2.bias, ...
    let names: Vec<String> = net.params.tensors.keys().cloned().collect();
    let params: Vec<Tensor<f64>> = names
        .iter()
        .map(|name| {
            let t = net.params.get(name).cast::<f64>();
            if name.ends_with(".bias") {
                uniform(rng, t.shape(), -0.3, 0.3)
            } else {
                t.map(|v| v * 4.0)
            }
        })
        .collect();
    // ReLU kinks inside the difference step would spoil the comparison
    let x = loop {
        let x = uniform(rng, &[4, d], -1.0, 1.0);
        if min_hidden_preactivation(&params, &x) > 1e-3 {
            break x;
        }
    };
    let target = uniform(rng, &[4, 1], 0.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(params);
    run(rng, &inputs, |g, v| {
        let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let logits = ScoringNet::forward(g, &vars, v[0])?;
        let p = g.sigmoid(logits)?;
        let t = g.constant(target.clone());
        let diff = g.sub(p, t)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq)
    })
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", Box::new(conv2d_case)),
        ("bilinear_sample", Box::new(bilinear_case)),
        ("adaptive_conv", Box::new(adaptive_case)),
        ("regression_loss", Box::new(regression_case)),
        ("heatmap_loss", Box::new(heatmap_case)),
        ("scoring_net", Box::new(scoring_case)),
    ]
}

/// Every operation under `seeds` seeds starting at `base_seed`.
pub fn run_suite(seeds: usize, base_seed: u64) -> Result<Vec<SuiteRow>, TensorError> {
    let mut rows = Vec::new();
    for (name, case) in cases() {
        let mut worst: Vec<f64> = Vec::new();
        for s in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s));
            let errs = case(&mut rng)?;
            worst.resize(errs.len(), 0.0);
            for (w, e) in worst.iter_mut().zip(errs) {
                *w = w.max(e);
            }
        }
        let max = worst.iter().copied().fold(0.0, f64::max);
        rows.push(SuiteRow { op: name.into(), seeds, per_input: worst, max_rel_error: max, passed: max < TOLERANCE });
    }
    Ok(rows)
}
