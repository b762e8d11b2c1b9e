//! Generate a seeded synthetic multi-person dataset and write it to disk.
//!
//! cargo run --example synth_dataset -- [out_dir] [n_images] [seed]

use dekr::synth::{generate_dataset, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or("synth_out", String::as_str);
    let n: usize = args.get(1).map_or(Ok(64), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(0), |s| s.parse())?;

    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let ds = generate_dataset(&spec, n)?;
    ds.save(out)?;

    let persons = ds.annotations.instances.len();
    let labelled: usize = ds.annotations.instances.iter().map(|i| i.num_labelled()).sum();
    let k = ds.annotations.skeleton.num_keypoints();
    println!("{n} images of {0}x{0} with the {k}-keypoint skeleton", spec.image_size);
    println!("{persons} persons, {:.2} per image", persons as f64 / n as f64);
    println!("{:.1}% of keypoints labelled", 100.0 * labelled as f64 / (persons * k).max(1) as f64);
    println!("written to {out}/");
    Ok(())
}
