use serde::Serialize;

use super::{param_shapes, NetworkConfig};

/// Analytic parameter and FLOP counts (multiply-accumulate = 2 FLOPs, plus
/// one add per bias). Only convolutions and adaptive sampling are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub head_params: u64,
    pub head_flops: u64,
    pub total_params: u64,
    pub total_flops: u64,
}

/// FLOPs of a `k x k` convolution producing `o` channels over `pixels`.
pub fn conv_flops(c: u64, o: u64, k: u64, pixels: u64) -> u64 {
    2 * c * o * k * k * pixels + o * pixels
}

/// FLOPs of the bilinear gather of an adaptive conv with `c` input
/// channels: per sample 8 for the position, 7 per channel for the read.
pub fn sampling_flops(c: u64, pixels: u64) -> u64 {
    9 * pixels * (8 + 7 * c)
}

/// Counts for an `image_size x image_size` input. "Head" is the
/// regression head, trunk included.
pub fn count_params_flops(cfg: &NetworkConfig, image_size: usize) -> Complexity {
    let mut out = Complexity { head_params: 0, head_flops: 0, total_params: 0, total_flops: 0 };
    let half = (image_size / 2) as u64;
    let quarter = (image_size / cfg.output_stride) as u64;
    for (name, shape) in param_shapes(cfg) {
        let params: u64 = shape.iter().product::<usize>() as u64;
        let head = name.starts_with("reg.");
        out.total_params += params;
        if head {
            out.head_params += params;
        }
        if !name.ends_with(".weight") {
            continue;
        }
        let (o, c, k) = (shape[0] as u64, shape[1] as u64, shape[2] as u64);
        let pixels = if name.starts_with("backbone.stem1") { half * half } else { quarter * quarter };
        let mut flops = conv_flops(c, o, k, pixels);
        let adaptive_conv = cfg.variant.adaptive() && k == 3 && name.starts_with("reg.") && !name.contains(".affine");
        if adaptive_conv {
            flops += sampling_flops(c, pixels);
        }
        out.total_flops += flops;
        if head {
            out.head_flops += flops;
        }
    }
    out
}
