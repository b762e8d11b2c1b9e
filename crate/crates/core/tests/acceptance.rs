//! End-to-end acceptance checks, one line per criterion on stderr.
//!
//! Criteria 6 and 7 train twelve desk-scale models. Finished runs are cached
//! under `DEKR_RUNS_DIR` (default: the cargo target tmp dir) and reused
//! while their configuration is unchanged.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dekr::adaptive::{adaptive_conv, AffineField};
use dekr::decoder::{absorb, center_nms, decode, pose_nms, DecodeConfig, ImagePredictions, Maps, PosePrediction, MULTI_SCALES};
use dekr::eval::{classify_errors, evaluate, oks, oks_thresholds, Detection, EvalConfig, ImageEval, ErrorCounts};
use dekr::gradsuite::run_suite;
use dekr::losses::{heatmap_loss, regression_loss, total_loss, DEFAULT_LAMBDA};
use dekr::network::{count_params_flops, init_params, predict, NetworkConfig, NetworkOutput, Variant};
use dekr::pose::{AnnotationSet, BBox, CandidatePose, ImageInfo, Instance, Keypoint, Skeleton};
use dekr::targets::{build_targets, DenseTargets, TargetConfig};
use dekr::tensor::{Graph, Scalar, Tensor};
use dekr::trainer::{desk_datasets, run_ablation, AblationConfig, AblationReport, TrainData, DESK_TRAIN_IMAGES, DESK_VAL_IMAGES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))?;
    Ok(took)
}

// ---------------------------------------------------------------- 1

fn identity_field_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=8);
        let o = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let mut u = |shape: &[usize]| Tensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let x = u(&[n, c, h, w]);
        let weight = u(&[o, c, 3, 3]);
        let bias = u(&[o]);
        let mut a = Tensor::<f32>::zeros(&[n, 4, h, w]);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    a.set(&[b, 0, y, xx], 1.0);
                    a.set(&[b, 3, y, xx], 1.0);
                }
            }
        }
        let t = Tensor::<f32>::zeros(&[n, 2, h, w]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(weight.clone());
        let bv = g.constant(bias);
        let flat = g.constant(weight.reshape(&[o, c, 9]).map_err(|e| e.to_string())?);
        let (av, tv) = (g.constant(a), g.constant(t));
        let plain = g.conv2d(xv, wv, bv, 1, 1).map_err(|e| e.to_string())?;
        let adapt = adaptive_conv(&mut g, xv, flat, bv, AffineField { a: av, t: tv }).map_err(|e| e.to_string())?;
        let d = g.value(plain).max_abs_diff(g.value(adapt));
        ensure(d < 1e-5, || format!("case {case} ({n}x{c}x{h}x{w} -> {o}): max |diff| {d:e}"))?;
        worst = worst.max(d);
    }
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("100 cases, max |diff| {worst:.2e}, {took:.2?}"))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = run_suite(20, 0).map_err(|e| e.to_string())?;
    let shape: Vec<(&str, usize)> = rows.iter().map(|r| (r.op.as_str(), r.per_input.len())).collect();
    let expected = [
        ("conv2d", 3),
        ("bilinear_sample", 2),
        ("adaptive_conv", 5),
        ("regression_loss", 1),
        ("heatmap_loss", 2),
        ("scoring_net", 7),
    ];
    ensure(shape == expected, || format!("ops covered: {shape:?}"))?;
    for r in &rows {
        ensure(r.seeds == 20 && r.passed && r.max_rel_error < 1e-4, || format!("{}: rel err {:e}", r.op, r.max_rel_error))?;
    }
    let took = within(start, Duration::from_secs(120))?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!("6 ops x 20 seeds, worst rel err {worst:.2e}, {took:.1?}"))
}

// ---------------------------------------------------------------- 3

fn instance(id: u64, image_id: u64, kps: &[(f64, f64, u8)]) -> Instance {
    let keypoints: Vec<Keypoint> = kps.iter().map(|&(x, y, v)| Keypoint::new(x, y, v)).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for k in &keypoints {
        x0 = x0.min(k.x);
        y0 = y0.min(k.y);
        x1 = x1.max(k.x);
        y1 = y1.max(k.y);
    }
    let bbox = BBox { x: x0 - 0.5, y: y0 - 0.5, w: x1 - x0 + 1.0, h: y1 - y0 + 1.0 };
    Instance { id, image_id, keypoints, bbox, area: bbox.w * bbox.h }
}

fn random_annotations(rng: &mut ChaCha8Rng, k: usize, size: f64) -> Vec<Instance> {
    let n = rng.random_range(0..=5);
    (0..n)
        .map(|i| {
            let (cx, cy) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
            let kps: Vec<_> = (0..k)
                .map(|_| {
                    let v = [0u8, 1, 2, 2][rng.random_range(0..4)];
                    let x = (cx + rng.random_range(-12.0..12.0)).clamp(0.0, size - 1.0);
                    let y = (cy + rng.random_range(-12.0..12.0)).clamp(0.0, size - 1.0);
                    (x, y, v)
                })
                .collect();
            instance(i as u64, 0, &kps)
        })
        .collect()
}

/// Every output pixel visits every instance and keypoint.
fn brute_force_targets(instances: &[Instance], k: usize, size: usize, cfg: &TargetConfig) -> DenseTargets {
    let s = cfg.output_stride as f64;
    let n = size / cfg.output_stride;
    let plane = n * n;
    let sigma = cfg.sigma;
    let mut heat = vec![0.0f32; k * plane];
    let mut center = vec![0.0f32; plane];
    let mut off = vec![0.0f32; 2 * k * plane];
    let mut valid = vec![0.0f32; plane];
    let mut kvalid = vec![0.0f32; k * plane];
    let mut z = vec![0.0f32; plane];
    let centers: Vec<Option<(f64, f64)>> = instances
        .iter()
        .map(|inst| {
            let lab: Vec<_> = inst.keypoints.iter().filter(|p| p.v > 0).collect();
            if lab.is_empty() {
                return None;
            }
            let (mut sx, mut sy) = (0.0, 0.0);
            for p in &lab {
                sx += p.x;
                sy += p.y;
            }
            Some((sx / lab.len() as f64 / s, sy / lab.len() as f64 / s))
        })
        .collect();
    for y in 0..n {
        for x in 0..n {
            let m = y * n + x;
            let (fx, fy) = (x as f64, y as f64);
            let g = |px: f64, py: f64| -> Option<f32> {
                let d2 = (fx - px) * (fx - px) + (fy - py) * (fy - py);
                (d2.sqrt() <= 3.0 * sigma).then(|| (-d2 / (2.0 * sigma * sigma)).exp() as f32)
            };
            let mut owner: Option<(usize, f64)> = None;
            for (i, inst) in instances.iter().enumerate() {
                let Some((cx, cy)) = centers[i] else { continue };
                for (j, p) in inst.keypoints.iter().enumerate() {
                    if p.v > 0 {
                        if let Some(h) = g(p.x / s, p.y / s) {
                            heat[j * plane + m] = heat[j * plane + m].max(h);
                        }
                    }
                }
                if let Some(h) = g(cx, cy) {
                    center[m] = center[m].max(h);
                }
                if (fx - cx).abs() <= 4.0 && (fy - cy).abs() <= 4.0 {
                    let d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
                    if owner.is_none_or(|(_, b)| d2 < b) {
                        owner = Some((i, d2));
                    }
                }
            }
            if let Some((i, _)) = owner {
                let inst = &instances[i];
                valid[m] = 1.0;
                z[m] = ((inst.bbox.w * inst.bbox.w + inst.bbox.h * inst.bbox.h).sqrt() / s) as f32;
                for (j, p) in inst.keypoints.iter().enumerate() {
                    if p.v > 0 {
                        off[2 * j * plane + m] = (p.x / s - fx) as f32;
                        off[(2 * j + 1) * plane + m] = (p.y / s - fy) as f32;
                        kvalid[j * plane + m] = 1.0;
                    }
                }
            }
        }
    }
    let mask = |h: &[f32]| h.iter().map(|&v| if v > 0.01 { 1.0 } else { 0.1 }).collect::<Vec<f32>>();
    let t = |c: usize, d: Vec<f32>| Tensor::new(&[1, c, n, n], d).unwrap();
    DenseTargets {
        heat_mask: t(k, mask(&heat)),
        center_mask: t(1, mask(&center)),
        kpt_heatmaps: t(k, heat),
        center_heatmap: t(1, center),
        offsets: t(2 * k, off),
        offset_valid: t(1, valid),
        keypoint_valid: t(k, kvalid),
        instance_size: t(1, z),
        skipped: centers.iter().filter(|c| c.is_none()).count(),
    }
}

fn target_fields(t: &DenseTargets) -> [(&'static str, &Tensor<f32>); 8] {
    [
        ("kpt_heatmaps", &t.kpt_heatmaps),
        ("center_heatmap", &t.center_heatmap),
        ("offsets", &t.offsets),
        ("offset_valid", &t.offset_valid),
        ("keypoint_valid", &t.keypoint_valid),
        ("instance_size", &t.instance_size),
        ("heat_mask", &t.heat_mask),
        ("center_mask", &t.center_mask),
    ]
}

fn target_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = TargetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut contested = 0;
    for set_idx in 0..50 {
        let set = random_annotations(&mut rng, 7, 64.0);
        let got = build_targets(&set, 7, 64, &cfg);
        let want = brute_force_targets(&set, 7, 64, &cfg);
        for ((name, a), (_, b)) in target_fields(&got).iter().zip(target_fields(&want).iter()) {
            ensure(a.shape() == b.shape(), || format!("set {set_idx} {name}: shape"))?;
            if let Some(i) = a.data().iter().zip(b.data()).position(|(p, q)| p.to_bits() != q.to_bits()) {
                return Err(format!("set {set_idx} {name}[{i}]: {} vs {}", a.data()[i], b.data()[i]));
            }
        }
        ensure(got.skipped == want.skipped, || format!("set {set_idx}: skipped count"))?;
        for m in got.heat_mask.data().iter().chain(got.center_mask.data()) {
            ensure(*m == 1.0 || *m == 0.1, || format!("set {set_idx}: mask value {m}"))?;
        }
        contested += usize::from(set.len() > 1);
    }
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!("50 sets bit-exact ({contested} with several persons), {took:.2?}"))
}

// ---------------------------------------------------------------- 4

fn blank_targets(k: usize, h: usize, w: usize) -> DenseTargets {
    let z = |c: usize| Tensor::zeros(&[1, c, h, w]);
    DenseTargets {
        kpt_heatmaps: z(k),
        center_heatmap: z(1),
        offsets: z(2 * k),
        offset_valid: z(1),
        keypoint_valid: z(k),
        instance_size: z(1),
        heat_mask: Tensor::full(&[1, k, h, w], 0.1),
        center_mask: Tensor::full(&[1, 1, h, w], 0.1),
        skipped: 0,
    }
}

fn regression_value(offsets: &Tensor<f64>, t: &DenseTargets) -> f64 {
    let mut g = Graph::<f64>::new();
    let o = g.constant(offsets.clone());
    let (l, _) = regression_loss(&mut g, o, t).unwrap();
    g.value(l).item()
}

fn heatmap_value<T: Scalar>(h: &Tensor<T>, c: &Tensor<T>, t: &DenseTargets) -> T {
    let mut g = Graph::<T>::new();
    let (hv, cv) = (g.constant(h.clone()), g.constant(c.clone()));
    let l = heatmap_loss(&mut g, hv, cv, t).unwrap();
    g.value(l).item()
}

fn mask_ratio<T: Scalar>() -> T {
    let mut t = blank_targets(1, 8, 8);
    t.heat_mask.data_mut()[10] = 1.0;
    let c = Tensor::<T>::zeros(&[1, 1, 8, 8]);
    let mut inside = Tensor::<T>::zeros(&[1, 1, 8, 8]);
    inside.data_mut()[10] = T::from_f64(0.5);
    let mut outside = Tensor::<T>::zeros(&[1, 1, 8, 8]);
    outside.data_mut()[11] = T::from_f64(0.5);
    heatmap_value(&outside, &c, &t) / heatmap_value(&inside, &c, &t)
}

fn loss_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // zero at target, on real targets of several persons
    for _ in 0..10 {
        let set = random_annotations(&mut rng, 7, 64.0);
        let t = build_targets(&set, 7, 64, &TargetConfig::default());
        let mut g = Graph::<f32>::new();
        let out = NetworkOutput {
            heatmaps: g.constant(t.kpt_heatmaps.clone()),
            center: g.constant(t.center_heatmap.clone()),
            offsets: g.constant(t.offsets.clone()),
        };
        let (_, r) = total_loss(&mut g, &out, &t, DEFAULT_LAMBDA).map_err(|e| e.to_string())?;
        ensure((r.l_p, r.l_h, r.total) == (0.0, 0.0, 0.0), || format!("loss at target {r:?}"))?;
    }
    // total is l_h + 0.03 l_p to the bit
    for _ in 0..20 {
        let set = random_annotations(&mut rng, 7, 64.0);
        let t = build_targets(&set, 7, 64, &TargetConfig::default());
        let mut g = Graph::<f64>::new();
        let mut mk = |src: &Tensor<f32>| g.constant(Tensor::from_fn(src.shape(), |_| rng.random_range(-1.0..2.0)));
        let out = NetworkOutput { heatmaps: mk(&t.kpt_heatmaps), center: mk(&t.center_heatmap), offsets: mk(&t.offsets) };
        let (_, r) = total_loss(&mut g, &out, &t, DEFAULT_LAMBDA).map_err(|e| e.to_string())?;
        ensure(r.total.to_bits() == (r.l_h + 0.03 * r.l_p).to_bits(), || format!("total {r:?}"))?;
    }
    // background mask: contribution ratio is the stored mask squared
    let m = 0.1f32 as f64;
    let r64 = mask_ratio::<f64>();
    ensure(r64 == m * m, || format!("f64 ratio {r64:e} vs {:e}", m * m))?;
    let r32 = mask_ratio::<f32>();
    ensure(r32 == 0.1f32 * 0.1f32, || format!("f32 ratio {r32:e}"))?;
    // doubling Z halves the regression loss
    for _ in 0..20 {
        let z: f32 = rng.random_range(1.0..40.0);
        let one = |z: f32| {
            let mut t = blank_targets(3, 4, 4);
            t.offset_valid.data_mut()[9] = 1.0;
            t.instance_size.data_mut()[9] = z;
            for j in 0..3 {
                t.keypoint_valid.data_mut()[j * 16 + 9] = 1.0;
            }
            t
        };
        let o = Tensor::<f64>::from_fn(&[1, 6, 4, 4], |_| rng.random_range(-3.0..3.0));
        let (a, b) = (regression_value(&o, &one(z)), regression_value(&o, &one(2.0 * z)));
        ensure(b == a / 2.0, || format!("Z = {z}: {a} vs {b}"))?;
    }
    Ok(format!("zero at target, total bit-exact, mask ratio {r64:e} (= m^2 for m = {m}), Z halving exact"))
}

// ---------------------------------------------------------------- 5

fn blob_map(h: usize, w: usize, blobs: &[(f64, f64, f64)]) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0f64;
            for &(cx, cy, a) in blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                v = v.max(a * (-d2 / 2.0).exp());
            }
            out[y * w + x] = v as f32;
        }
    }
    out
}

/// Pixels strictly above every 8-neighbour and above `min_heat`.
fn strict_maxima(plane: &[f32], h: usize, w: usize, min_heat: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h * w {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let beaten = (0..h * w).any(|j| {
            let (xj, yj) = ((j % w) as i64, (j / w) as i64);
            j != i && (xj - x).abs() <= 1 && (yj - y).abs() <= 1 && plane[j] >= plane[i]
        });
        if !beaten && plane[i] as f64 > min_heat {
            out.push((x as usize, y as usize));
        }
    }
    out
}

fn random_candidates(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<CandidatePose> {
    let mut scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.random_range(0.0..0.5)).collect();
    for i in (1..n).rev() {
        scores.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|i| {
            let (cx, cy) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            CandidatePose {
                keypoints: (0..k).map(|_| [cx + rng.random_range(-6.0..6.0), cy + rng.random_range(-6.0..6.0)]).collect(),
                center: [cx, cy],
                keypoint_heats: vec![0.5; k],
                center_heat: 0.5,
                score: scores[i],
            }
        })
        .collect()
}

/// Full OKS matrix, then one suppression pass in score order.
fn quadratic_nms(cands: &[CandidatePose], oks_k: &[f64], thresh: f64, cap: usize) -> Vec<CandidatePose> {
    let n = cands.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cands[b].score.partial_cmp(&cands[a].score).unwrap());
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (a, r) = (&cands[i], &cands[j]);
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for p in &r.keypoints {
                x0 = x0.min(p[0]);
                x1 = x1.max(p[0]);
                y0 = y0.min(p[1]);
                y1 = y1.max(p[1]);
            }
            let s2 = ((x1 - x0) * (y1 - y0)).max(1.0);
            let mut acc = 0.0;
            for k in 0..a.keypoints.len() {
                let d2 = (a.keypoints[k][0] - r.keypoints[k][0]).powi(2) + (a.keypoints[k][1] - r.keypoints[k][1]).powi(2);
                acc += (-d2 / (2.0 * s2 * oks_k[k] * oks_k[k])).exp();
            }
            sim[i][j] = acc / a.keypoints.len() as f64;
        }
    }
    let mut suppressed = vec![false; n];
    let mut out = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(cands[i].clone());
        for &j in &order[rank + 1..] {
            if sim[j][i] > thresh {
                suppressed[j] = true;
            }
        }
    }
    out.truncate(cap);
    out
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        variant: Variant::Dekr,
        num_keypoints: 7,
        branch_width: 4,
        baseline_width: 28,
        heat_width: 8,
        backbone: vec![4, 8, 8],
        output_stride: 4,
        groups: None,
    }
}

fn decoder_contracts() -> Outcome {
    let start = Instant::now();
    let net = tiny_net();
    let skel = Skeleton::mini7();
    let configs = [
        DecodeConfig::default(),
        DecodeConfig { pose_nms_oks_thresh: 1.0, center_heat_min: 0.0, ..Default::default() },
        DecodeConfig { flip: true, ..Default::default() },
        DecodeConfig { scales: MULTI_SCALES.to_vec(), flip: true, absorb: true, ..Default::default() },
    ];
    let mut most = 0;
    for seed in 0..4u64 {
        let mut params = init_params(&net, seed).map_err(|e| e.to_string())?;
        // a raised center map gives far more peaks than the cap
        params.tensors.get_mut("heat.out.bias").unwrap().data_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(&[3, 64, 64], |_| rng.random_range(0.0..1.0));
        let batch = img.clone().reshape(&[1, 3, 64, 64]).unwrap();
        let maps = Maps::from_prediction(&predict(&net, &params, &batch).map_err(|e| e.to_string())?, 0);
        for (ci, cfg) in configs.iter().enumerate() {
            let poses = decode(&net, &params, &img, &skel, cfg, None).map_err(|e| e.to_string())?;
            ensure(poses.len() <= 30, || format!("seed {seed} config {ci}: {} poses", poses.len()))?;
            most = most.max(poses.len());
            if cfg.scales == [1.0] && !cfg.flip {
                let mut peaks: Vec<(usize, usize)> = center_nms(&maps, cfg).iter().map(|p| (p.x, p.y)).collect();
                let mut maxima = strict_maxima(&maps.center, 16, 16, cfg.center_heat_min);
                peaks.sort();
                maxima.sort();
                ensure(peaks == maxima, || format!("seed {seed}: center NMS differs from the exhaustive scan"))?;
                for p in &poses {
                    let (x, y) = ((p.center[0] / 4.0) as usize, (p.center[1] / 4.0) as usize);
                    ensure(maxima.contains(&(x, y)), || format!("seed {seed}: center ({x}, {y}) is not a strict maximum > {}", cfg.center_heat_min))?;
                }
            }
        }
    }
    let cfg = DecodeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for set in 0..100 {
        let n = rng.random_range(0..80);
        let cands = random_candidates(&mut rng, n, 4);
        let oks_k = [0.08, 0.1, 0.06, 0.2];
        let got = pose_nms(cands.clone(), &oks_k, &cfg);
        ensure(got == quadratic_nms(&cands, &oks_k, cfg.pose_nms_oks_thresh, 30), || format!("pose NMS set {set} differs"))?;
    }
    let (h, w, k) = (16, 16, 3);
    for set in 0..50 {
        let mut m = Maps::zeros(k, h, w);
        for kk in 0..k {
            let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(0..5))
                .map(|_| (rng.random_range(0..16) as f64, rng.random_range(0..16) as f64, rng.random_range(0.005..1.0)))
                .collect();
            m.heat[kk * 256..(kk + 1) * 256].copy_from_slice(&blob_map(h, w, &blobs));
        }
        let cands = random_candidates(&mut rng, 6, k);
        let got = absorb(cands.clone(), &m, 4, &cfg);
        for (c, gpose) in cands.iter().zip(&got) {
            for kk in 0..k {
                let plane = &m.heat[kk * 256..(kk + 1) * 256];
                let (px, py) = (c.keypoints[kk][0] / 4.0, c.keypoints[kk][1] / 4.0);
                let mut best: Option<(f64, f32, (usize, usize))> = None;
                for (x, y) in strict_maxima(plane, h, w, 0.01) {
                    let d = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)).sqrt();
                    let v = plane[y * w + x];
                    if best.is_none_or(|(bd, bv, _)| d < bd || (d == bd && v > bv)) {
                        best = Some((d, v, (x, y)));
                    }
                }
                let expected = match best {
                    Some((d, _, (x, y))) if d <= cfg.absorb_radius => [x as f64 * 4.0, y as f64 * 4.0],
                    _ => c.keypoints[kk],
                };
                ensure(gpose.keypoints[kk] == expected, || format!("absorb set {set} keypoint {kk}"))?;
            }
        }
    }
    let took = within(start, Duration::from_secs(60))?;
    Ok(format!("at most {most} poses, centers strict maxima, 100 NMS sets and 50 absorb sets match, {took:.2?}"))
}

// ---------------------------------------------------------------- 6, 7

fn runs_dir() -> PathBuf {
    std::env::var_os("DEKR_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"))
}

fn desk_ablation() -> Result<AblationReport, String> {
    let (train, val) = desk_datasets(DESK_TRAIN_IMAGES, DESK_VAL_IMAGES, 0).map_err(|e| e.to_string())?;
    let data = TrainData::from_dataset(&train);
    let dir = runs_dir();
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    run_ablation(&data, &val, &AblationConfig::default(), Some(&dir)).map_err(|e| e.to_string())
}

fn end_to_end(report: &AblationReport) -> Outcome {
    let run = report
        .runs
        .iter()
        .find(|r| r.variant == Variant::Dekr && r.seed == 0)
        .ok_or("no dekr seed-0 run")?;
    let detail = format!(
        "dekr seed 0: AP50 {:.2}, AP {:.2}, {} steps in {:.1} min on one core",
        run.eval.ap50,
        run.eval.ap,
        run.steps,
        run.train_seconds / 60.0
    );
    ensure(run.eval.ap50 >= 60.0, || format!("{detail}; AP50 below 60"))?;
    ensure(run.train_seconds <= 1800.0, || format!("{detail}; over 30 min"))?;
    Ok(detail)
}

fn ablation_ordering(report: &AblationReport) -> Outcome {
    let row = |v| report.row(v).ok_or_else(|| format!("no row for {}", v.name()));
    let (base, aa, sr, dekr) = (row(Variant::Baseline)?, row(Variant::Aa)?, row(Variant::Sr)?, row(Variant::Dekr)?);
    for r in [base, aa, sr, dekr] {
        ensure(r.seeds == 3, || format!("{}: {} seeds", r.variant.name(), r.seeds))?;
    }
    let detail = format!(
        "mean AP baseline {:.2}, aa {:.2}, sr {:.2}, dekr {:.2}; final l_p baseline {:.4}, dekr {:.4}",
        base.ap, aa.ap, sr.ap, dekr.ap, base.final_l_p, dekr.final_l_p
    );
    ensure(dekr.ap >= sr.ap, || format!("{detail}; dekr < sr"))?;
    ensure(dekr.ap >= aa.ap, || format!("{detail}; dekr < aa"))?;
    ensure(aa.ap >= base.ap, || format!("{detail}; aa < baseline"))?;
    ensure(dekr.final_l_p < base.final_l_p, || format!("{detail}; dekr l_p not below baseline"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn head_complexity() -> Outcome {
    let cfg = |variant| NetworkConfig { variant, ..NetworkConfig::default() };
    let (base, sr, dekr) = (cfg(Variant::Baseline), cfg(Variant::Sr), cfg(Variant::Dekr));
    ensure(sr.trunk_width() == 255 && base.trunk_width() == 256, || "trunk widths".into())?;
    let size = 512;
    let (b, s, d) = (count_params_flops(&base, size), count_params_flops(&sr, size), count_params_flops(&dekr, size));

    // Layer-by-layer: 64 backbone channels, 17 keypoints, 128 x 128 output.
    let p: u64 = 128 * 128;
    let conv = |c: u64, o: u64, k: u64| (c * o * k * k + o, (2 * c * o * k * k + o) * p);
    let sum = |layers: &[(u64, u64)]| layers.iter().fold((0, 0), |a, l| (a.0 + l.0, a.1 + l.1));
    let baseline_layers = [conv(64, 256, 1), conv(256, 256, 3), conv(256, 256, 3), conv(256, 34, 1)];
    let mut sr_layers = vec![conv(64, 255, 1)];
    for _ in 0..17 {
        sr_layers.extend([conv(15, 15, 3), conv(15, 15, 3), conv(15, 2, 1)]);
    }
    let mut dekr_layers = sr_layers.clone();
    for _ in 0..17 {
        for _ in 0..2 {
            dekr_layers.push(conv(15, 6, 3));
            // bilinear gather: 9 samples, 8 FLOPs of position math, 7 per channel
            dekr_layers.push((0, 9 * p * (8 + 7 * 15)));
        }
    }
    let fixture = [("baseline", sum(&baseline_layers), b), ("sr", sum(&sr_layers), s), ("dekr", sum(&dekr_layers), d)];
    for (name, (params, flops), c) in fixture {
        ensure((c.head_params, c.head_flops) == (params, flops), || {
            format!("{name}: counted {} / {}, hand {params} / {flops}", c.head_params, c.head_flops)
        })?;
    }
    for (name, c) in [("sr", s), ("dekr", d)] {
        ensure(c.head_params < b.head_params && c.head_flops < b.head_flops, || format!("{name} head not below baseline"))?;
    }
    let g = |f: u64| f as f64 / 1e9;
    Ok(format!(
        "head params baseline {} sr {} dekr {}; GFLOPs {:.2} {:.2} {:.2}",
        b.head_params,
        s.head_params,
        d.head_params,
        g(b.head_flops),
        g(s.head_flops),
        g(d.head_flops)
    ))
}

// ---------------------------------------------------------------- 9

/// mini7 figure spanning 20 x 30 pixels with its head at `(x, y)`.
fn figure(x: f64, y: f64) -> Vec<[f64; 2]> {
    vec![
        [x, y],
        [x - 6.0, y + 6.0],
        [x + 6.0, y + 6.0],
        [x - 4.0, y + 16.0],
        [x + 4.0, y + 16.0],
        [x - 10.0, y + 30.0],
        [x + 10.0, y + 30.0],
    ]
}

fn gt(id: u64, image_id: u64, pts: &[[f64; 2]], area: f64) -> Instance {
    Instance {
        id,
        image_id,
        keypoints: pts.iter().map(|p| Keypoint::new(p[0], p[1], 2)).collect(),
        bbox: BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 },
        area,
    }
}

fn pred(pts: &[[f64; 2]], score: f64) -> PosePrediction {
    PosePrediction { keypoints: pts.iter().flat_map(|p| [p[0], p[1], 1.0]).collect(), score }
}

fn shifted(pts: &[[f64; 2]], dx: f64) -> Vec<[f64; 2]> {
    pts.iter().map(|p| [p[0] + dx, p[1]]).collect()
}

/// Horizontal shift giving OKS `o` for area 400 and k = 0.08.
fn shift_for(o: f64) -> f64 {
    (-2.0 * 400.0 * 0.08f64.powi(2) * o.ln()).sqrt()
}

fn one_image(gts: Vec<Instance>, dets: Vec<Vec<[f64; 2]>>) -> Vec<ImageEval> {
    let dets = dets.into_iter().enumerate().map(|(i, k)| Detection { keypoints: k, score: 1.0 - i as f64 * 0.1 }).collect();
    vec![ImageEval { image_id: 1, gts, dets }]
}

fn counts_of(images: &[ImageEval]) -> ErrorCounts {
    classify_errors(images, &Skeleton::mini7(), &EvalConfig::for_image_size(64)).1
}

fn evaluator_fixtures() -> Outcome {
    // OKS by hand: one exact keypoint, one off by one pixel with s^2 k^2 = 1
    let g = gt(1, 1, &[[0.0, 0.0], [10.0, 0.0]], 100.0);
    let k = [0.1, 0.1];
    ensure(oks(&[[0.0, 0.0], [10.0, 0.0]], &g, &k).unwrap() == 1.0, || "perfect OKS".into())?;
    let v = oks(&[[0.0, 0.0], [11.0, 0.0]], &g, &k).unwrap();
    let hand = (1.0 + (-0.5f64).exp()) / 2.0;
    ensure((v - hand).abs() < 1e-9, || format!("OKS {v} vs {hand}"))?;
    let v = oks(&[[3.0, 4.0], [10.0, 0.0]], &g, &k).unwrap();
    let hand = (1.0 + (-12.5f64).exp()) / 2.0;
    ensure((v - hand).abs() < 1e-9, || format!("OKS {v} vs {hand}"))?;
    let mut half = g.clone();
    half.keypoints[1].v = 0;
    ensure(oks(&[[0.0, 0.0], [50.0, 50.0]], &half, &k).unwrap() == 1.0, || "unlabelled keypoint counted".into())?;

    // Five images, one groundtruth each; detections at known OKS.
    // t = .50: T T F T T -> (41 + 40 * .8) / 101; t = .55-.70: T T F F T -> (41 + 20 * .6) / 101;
    // t = .75, .80: T F F F T -> (21 + 20 * .4) / 101; t >= .85: T F F F F -> 21 / 101.
    let base = figure(30.0, 10.0);
    let ann = AnnotationSet {
        skeleton: Skeleton::mini7(),
        images: (1..=5).map(|id| ImageInfo { id, file: format!("{id}.ppm"), width: 64, height: 64 }).collect(),
        instances: (1..=5).map(|i| gt(i, i, &base, 400.0)).collect(),
    };
    let at = |o: f64, s: f64| pred(&shifted(&base, shift_for(o)), s);
    let preds = vec![
        ImagePredictions { image_id: 1, poses: vec![at(0.97, 0.9)] },
        ImagePredictions { image_id: 2, poses: vec![at(0.72, 0.8)] },
        ImagePredictions { image_id: 3, poses: vec![pred(&shifted(&base, 500.0), 0.7), at(0.52, 0.6)] },
        ImagePredictions { image_id: 4, poses: vec![at(0.83, 0.5)] },
        ImagePredictions { image_id: 5, poses: vec![] },
    ];
    let r = evaluate(&preds, &ann, &EvalConfig::for_image_size(64)).map_err(|e| e.to_string())?;
    let expected = [73.0, 53.0, 53.0, 53.0, 53.0, 29.0, 29.0, 21.0, 21.0, 21.0].map(|v| 100.0 * v / 101.0);
    for ((t, ap), (et, e)) in r.per_threshold.iter().zip(oks_thresholds().iter().zip(expected)) {
        ensure(t == et && (ap - e).abs() < 1e-12, || format!("AP at {t}: {ap} vs {e}"))?;
    }
    ensure((r.ap - 100.0 * 406.0 / 1010.0).abs() < 1e-12, || format!("AP {}", r.ap))?;
    ensure((r.ar - 46.0).abs() < 1e-12, || format!("AR {}", r.ar))?;

    let a = figure(20.0, 10.0);
    let mut inverted = a.clone();
    inverted.swap(5, 6);
    let c = counts_of(&one_image(vec![gt(1, 1, &a, 400.0)], vec![inverted]));
    ensure(c == ErrorCounts { good: 5, inversion: 2, ..Default::default() }, || format!("inversion fixture {c:?}"))?;

    let (p, q) = (figure(15.0, 10.0), figure(45.0, 12.0));
    let mut swapped = p.clone();
    swapped[5] = q[5];
    let c = counts_of(&one_image(vec![gt(1, 1, &p, 400.0), gt(2, 1, &q, 400.0)], vec![swapped, q.clone()]));
    ensure(c == ErrorCounts { good: 13, swap: 1, ..Default::default() }, || format!("swap fixture {c:?}"))?;

    let mut jm = a.clone();
    jm[0][0] += shift_for(0.7);
    jm[3] = [60.0, 2.0];
    let c = counts_of(&one_image(vec![gt(1, 1, &a, 400.0)], vec![jm]));
    ensure(c == ErrorCounts { good: 5, jitter: 1, miss: 1, ..Default::default() }, || format!("jitter/miss fixture {c:?}"))?;

    Ok(format!("OKS cases exact, 5-image AP {:.4} = 40600/1010, inversion/swap/jitter/miss classified", r.ap))
}

// ---------------------------------------------------------------- 10

fn dekr(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dekr")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("dekr {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

/// Relative path to contents of every file below `root`, wall-clock
/// timing excluded.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.json") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn same_tree(a: &Path, b: &Path, what: &str) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    ensure(!ta.is_empty(), || format!("{what}: no output"))?;
    ensure(ta.keys().eq(tb.keys()), || format!("{what}: file sets differ"))?;
    for (name, bytes) in &ta {
        ensure(tb[name] == *bytes, || format!("{what}: {} differs", name.display()))?;
    }
    Ok(ta.len())
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let mut files = 0;
    for run in ["a", "b"] {
        dekr(&["synth", "--out", &p(&format!("data_{run}")), "--n", "24", "--seed", "7"])?;
    }
    files += same_tree(Path::new(&p("data_a")), Path::new(&p("data_b")), "synth")?;
    for run in ["a", "b"] {
        let args = ["train", "--data", &p("data_a"), "--out", &p(&format!("train_{run}")), "--max-steps", "4", "--batch-size", "4"];
        dekr(&[&args[..], &["--seed", "3"]].concat())?;
    }
    files += same_tree(Path::new(&p("train_a")), Path::new(&p("train_b")), "train")?;
    for run in ["a", "b"] {
        let out = p(&format!("decode_{run}/predictions.jsonl"));
        dekr(&["decode", "--checkpoint", &p("train_a"), "--data", &p("data_a"), "--out", &out, "--flip", "--scales", "0.5,1,2", "--absorb", "--seed", "3"])?;
    }
    files += same_tree(Path::new(&p("decode_a")), Path::new(&p("decode_b")), "decode")?;
    Ok(format!("synth, train and decode byte-identical across two runs ({files} files)"))
}

// ----------------------------------------------------------------

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Outcome| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        let _ = writeln!(std::io::stderr(), "[{tag}] criterion {n:>2} {name}: {detail}");
        results.push((n, name, r));
    };
    record(1, "identity-field equivalence", guarded(identity_field_equivalence));
    record(2, "gradient suite", guarded(gradient_suite));
    record(3, "target-builder oracle", guarded(target_oracle));
    record(4, "loss algebra", guarded(loss_algebra));
    record(5, "decoder contracts", guarded(decoder_contracts));
    match guarded(desk_ablation) {
        Ok(report) => {
            record(6, "end-to-end desk training", guarded(|| end_to_end(&report)));
            record(7, "ablation ordering", guarded(|| ablation_ordering(&report)));
        }
        Err(e) => {
            record(6, "end-to-end desk training", Err(e.clone()));
            record(7, "ablation ordering", Err(e));
        }
    }
    record(8, "head complexity", guarded(head_complexity));
    record(9, "evaluator fixtures", guarded(evaluator_fixtures));
    record(10, "determinism", guarded(cli_determinism));
    let failed: Vec<String> = results.iter().filter(|r| r.2.is_err()).map(|r| format!("{} {}", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
