//! OKS-based AP/AR and the jitter/miss/inversion/swap error analysis, run on
//! groundtruth poses corrupted in known ways.
//!
//! cargo run --example evaluate

use dekr::decoder::{ImagePredictions, PosePrediction};
use dekr::eval::{evaluate_with_errors, EvalConfig};
use dekr::synth::{generate_dataset, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_dataset(&SceneSpec::default(), 50)?;
    let ann = &ds.annotations;
    let flip = ann.skeleton.flip_permutation();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let preds: Vec<ImagePredictions> = ann
        .images
        .iter()
        .map(|im| {
            let poses = ann
                .instances
                .iter()
                .filter(|i| i.image_id == im.id)
                .map(|inst| {
                    let mut pts: Vec<[f64; 2]> = inst.keypoints.iter().map(|k| [k.x, k.y]).collect();
                    for p in pts.iter_mut() {
                        p[0] += rng.random_range(-1.5..1.5);
                        p[1] += rng.random_range(-1.5..1.5);
                    }
                    if rng.random_bool(0.2) {
                        // left and right exchanged
                        pts = flip.iter().map(|&j| pts[j]).collect();
                    }
                    if rng.random_bool(0.2) {
                        let j = rng.random_range(0..pts.len());
                        pts[j] = [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)];
                    }
                    PosePrediction { keypoints: pts.iter().flat_map(|p| [p[0], p[1], 1.0]).collect(), score: rng.random() }
                })
                .collect();
            ImagePredictions { image_id: im.id, poses }
        })
        .collect();

    let r = evaluate_with_errors(&preds, ann, &EvalConfig::for_image_size(64))?;
    println!("AP {:.1}  AP50 {:.1}  AP75 {:.1}  AR {:.1}", r.ap, r.ap50, r.ap75, r.ar);
    if let Some(e) = r.error_rates {
        println!("AP gained by correcting each error class in turn:");
        println!("  jitter {:.1}  miss {:.1}  inversion {:.1}  swap {:.1}", e.jitter, e.miss, e.inversion, e.swap);
        println!("  AP after all corrections {:.1}", e.corrected_ap);
    }
    Ok(())
}
