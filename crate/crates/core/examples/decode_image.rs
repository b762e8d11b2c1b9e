//! Decode poses from one image with a trained checkpoint and draw them.
//!
//! cargo run --release --example decode_image -- <run_dir> [image_index] [out.ppm]
//!
//! `run_dir` is the output of the `train_desk` example or `dekr train`.

use std::path::Path;

use dekr::decoder::{decode, DecodeConfig, ScoringNet, MULTI_SCALES};
use dekr::eval::visualize;
use dekr::synth::{generate_image, SceneSpec};
use dekr::trainer::load_checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let run = Path::new(args.first().ok_or("usage: decode_image <run_dir> [image_index] [out.ppm]")?);
    let index: usize = args.get(1).map_or(Ok(0), |s| s.parse())?;
    let out = args.get(2).map_or("decoded.ppm", String::as_str);

    let (net, params) = load_checkpoint(run.join("checkpoint"))?;
    let scoring = ScoringNet::load(run.join("scoring")).ok();
    let spec = SceneSpec { seed: 99, ..SceneSpec::default() };
    let skeleton = spec.validate()?;
    let (image, truth) = generate_image(&spec, &skeleton, index)?;

    for (name, cfg) in [
        ("single scale", DecodeConfig::default()),
        ("flip + 3 scales + absorb", DecodeConfig { flip: true, scales: MULTI_SCALES.to_vec(), absorb: true, ..Default::default() }),
    ] {
        let poses = decode(&net, &params, &image, &skeleton, &cfg, scoring.as_ref())?;
        println!("{name}: {} poses ({} persons in the image)", poses.len(), truth.len());
        for p in poses.iter().take(truth.len() + 1) {
            println!("  score {:.3} center ({:.1}, {:.1})", p.score, p.center[0], p.center[1]);
        }
    }
    let poses = decode(&net, &params, &image, &skeleton, &DecodeConfig::default(), scoring.as_ref())?;
    let keep: Vec<Vec<[f64; 2]>> = poses.iter().take(truth.len()).map(|p| p.keypoints.clone()).collect();
    visualize(&image, &keep, &skeleton, out)?;
    println!("top {} poses drawn to {out}", keep.len());
    Ok(())
}
