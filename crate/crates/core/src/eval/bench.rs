//! Throughput of plain vs adaptive convolution, and head complexity.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptive::{adaptive_conv, AffineField};
use crate::network::{
    conv_flops, count_params_flops, init_params, predict, sampling_flops, NetworkConfig, NetworkError, Variant,
};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub shape: String,
    /// `None` for rows that only report a count.
    pub ns_per_call: Option<f64>,
    pub flops_est: u64,
}

fn time_ns(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let start = Instant::now();
    for _ in 0..reps {
        f();
    }
    start.elapsed().as_nanos() as f64 / reps as f64
}

const CONV_SHAPES: [[usize; 4]; 3] = [[1, 15, 16, 16], [1, 32, 16, 16], [4, 15, 32, 32]];

/// Forward timings of a 3x3 conv and its adaptive counterpart, full
/// network forwards per variant, and regression-head counts at K=17.
pub fn run_bench(reps: usize, seed: u64) -> Result<Vec<BenchRow>, NetworkError> {
    let reps = reps.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for s in CONV_SHAPES {
        let [n, c, h, w] = s;
        let x = Tensor::<f32>::from_fn(&s, |_| rng.random_range(-1.0..1.0));
        let wt = Tensor::<f32>::from_fn(&[c, c, 3, 3], |_| rng.random_range(-0.1..0.1));
        let b = Tensor::<f32>::zeros(&[c]);
        let a = Tensor::<f32>::from_fn(&[n, 4, h, w], |i| {
            let ch = (i / (h * w)) % 4;
            let base = if ch == 0 || ch == 3 { 1.0 } else { 0.0 };
            base + rng.random_range(-0.2..0.2)
        });
        let t = Tensor::<f32>::from_fn(&[n, 2, h, w], |_| rng.random_range(-0.5..0.5));
        let shape = format!("{n}x{c}x{h}x{w}");
        let pixels = (n * h * w) as u64;
        let base_flops = conv_flops(c as u64, c as u64, 3, pixels);

        let mut err = None;
        let ns = time_ns(reps, || {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
            if let Err(e) = g.conv2d(xv, wv, bv, 1, 1) {
                err = Some(e);
            }
        });
        if let Some(e) = err.take() {
            return Err(e.into());
        }
        rows.push(BenchRow { op: "conv2d".into(), shape: shape.clone(), ns_per_call: Some(ns), flops_est: base_flops });

        let ns = time_ns(reps, || {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
            let field = AffineField { a: g.constant(a.clone()), t: g.constant(t.clone()) };
            if let Err(e) = adaptive_conv(&mut g, xv, wv, bv, field) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        rows.push(BenchRow {
            op: "adaptive_conv".into(),
            shape,
            ns_per_call: Some(ns),
            flops_est: base_flops + sampling_flops(c as u64, pixels),
        });
    }

    let image = Tensor::<f32>::from_fn(&[1, 3, 64, 64], |_| rng.random_range(0.0..1.0));
    for variant in Variant::ALL {
        let cfg = NetworkConfig { variant, ..Default::default() };
        let params = init_params(&cfg, seed)?;
        let mut err = None;
        let ns = time_ns(reps, || {
            if let Err(e) = predict(&cfg, &params, &image) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let cx = count_params_flops(&cfg, 64);
        rows.push(BenchRow {
            op: format!("network.{}", variant.name()),
            shape: "1x3x64x64".into(),
            ns_per_call: Some(ns),
            flops_est: cx.total_flops,
        });
        rows.push(BenchRow {
            op: format!("head.{}", variant.name()),
            shape: format!("K=17 params={}", cx.head_params),
            ns_per_call: None,
            flops_est: cx.head_flops,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv(w: &mut impl Write, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "op,shape,ns_per_call,flops_est")?;
    for r in rows {
        let ns = r.ns_per_call.map(|v| format!("{v:.0}")).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.op, r.shape, ns, r.flops_est)?;
    }
    Ok(())
}
