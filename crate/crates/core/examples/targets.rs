//! Dense training targets for one synthetic image: heatmaps, center map,
//! offsets within the radius-4 center regions, and the loss masks.
//!
//! cargo run --example targets -- [image_index]

use dekr::synth::{generate_image, SceneSpec};
use dekr::targets::{build_targets, TargetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let index: usize = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let spec = SceneSpec::default();
    let skeleton = spec.validate()?;
    let (image, instances) = generate_image(&spec, &skeleton, index)?;
    let cfg = TargetConfig::default();
    let k = skeleton.num_keypoints();
    let t = build_targets(&instances, k, image.shape()[1], &cfg);

    let side = image.shape()[1] / cfg.output_stride;
    println!("image {index}: {} persons, output maps {side}x{side}", instances.len());
    let supervised = t.offset_valid.data().iter().filter(|&&v| v > 0.0).count();
    println!("pixels with offset supervision: {supervised}");
    let fg = t.heat_mask.data().iter().filter(|&&v| v == 1.0).count();
    println!("heatmap mask: {fg} of {} entries at weight 1, the rest at 0.1", t.heat_mask.len());

    // center map as ASCII, brightest pixels darkest
    let shades = [' ', '.', ':', '+', '#'];
    for y in 0..side {
        let row: String = (0..side)
            .map(|x| {
                let v = t.center_heatmap.data()[y * side + x];
                shades[((v * 4.0).round() as usize).min(4)]
            })
            .collect();
        println!("|{row}|");
    }
    Ok(())
}
