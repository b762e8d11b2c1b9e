//! Adaptive convolution: a 3x3 kernel whose sampling grid is moved per pixel
//! by an affine field. The identity field reproduces a plain convolution.
//!
//! cargo run --example adaptive_conv

use dekr::adaptive::{adaptive_conv, transform_grid, AffineField};
use dekr::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, c, o, h, w) = (1, 4, 6, 12, 12);
    let x = Tensor::<f32>::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0));
    let weight = Tensor::<f32>::from_fn(&[o, c, 3, 3], |_| rng.random_range(-0.5..0.5));
    let bias = Tensor::<f32>::zeros(&[o]);

    let field = |a: [f32; 4], t: [f32; 2]| {
        let a = Tensor::from_fn(&[n, 4, h, w], |i| a[(i / (h * w)) % 4]);
        let t = Tensor::from_fn(&[n, 2, h, w], |i| t[(i / (h * w)) % 2]);
        (a, t)
    };
    let run = |a: Tensor<f32>, t: Tensor<f32>| -> Result<Tensor<f32>, Box<dyn std::error::Error>> {
        let mut g = Graph::new();
        let (xv, bv) = (g.constant(x.clone()), g.constant(bias.clone()));
        let wv = g.constant(weight.clone().reshape(&[o, c, 9])?);
        let (av, tv) = (g.constant(a), g.constant(t));
        let y = adaptive_conv(&mut g, xv, wv, bv, AffineField { a: av, t: tv })?;
        Ok(g.value(y).clone())
    };

    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(weight.clone()), g.constant(bias.clone()));
    let plain = g.conv2d(xv, wv, bv, 1, 1)?;
    let plain = g.value(plain).clone();

    let (a, t) = field([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
    println!("identity field vs conv2d: max |diff| = {:e}", run(a, t)?.max_abs_diff(&plain));

    let (s, r) = (2.0f64, std::f64::consts::FRAC_PI_6);
    let m = [s * r.cos(), -s * r.sin(), s * r.sin(), s * r.cos()];
    let (a, t) = field(m.map(|v| v as f32), [0.5, -0.5]);
    println!("rotated, dilated field vs conv2d: max |diff| = {:.3}", run(a, t)?.max_abs_diff(&plain));
    println!("its sampling offsets around each pixel:");
    for p in transform_grid(m, [0.5, -0.5]) {
        println!("  ({:+.2}, {:+.2})", p[0], p[1]);
    }
    Ok(())
}
