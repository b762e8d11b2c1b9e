//! Parameters and FLOPs of the regression head for every variant, at the
//! 17-keypoint full size and at the desk size used for training here.
//!
//! cargo run --example head_complexity

use dekr::network::{count_params_flops, NetworkConfig, Variant};
use dekr::trainer::desk_network;

fn report(title: &str, make: impl Fn(Variant) -> NetworkConfig, image_size: usize) {
    println!("{title} ({image_size}x{image_size} input)");
    println!("  {:<9} {:>6} {:>12} {:>10} {:>12}", "variant", "trunk", "head params", "head GFLOP", "total params");
    for v in Variant::ALL {
        let cfg = make(v);
        let c = count_params_flops(&cfg, image_size);
        println!(
            "  {:<9} {:>6} {:>12} {:>10.3} {:>12}",
            v.name(),
            cfg.trunk_width(),
            c.head_params,
            c.head_flops as f64 / 1e9,
            c.total_params
        );
    }
}

fn main() {
    report("17 keypoints, branch width 15", |variant| NetworkConfig { variant, ..NetworkConfig::default() }, 512);
    report("desk network, 7 keypoints", desk_network, 64);
}
