use super::*;
use crate::tensor::gradcheck::check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()).unwrap()
}

fn identity_field<T: Scalar>(n: usize, h: usize, w: usize) -> (Tensor<T>, Tensor<T>) {
    let mut a = Tensor::zeros(&[n, 4, h, w]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                a.set(&[b, 0, y, x], T::one());
                a.set(&[b, 3, y, x], T::one());
            }
        }
    }
    (a, Tensor::zeros(&[n, 2, h, w]))
}

fn run<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, a: &Tensor<T>, t: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let vars = [x, w, b, a, t].map(|v| g.constant(v.clone()));
    let y = adaptive_conv(&mut g, vars[0], vars[1], vars[2], AffineField { a: vars[3], t: vars[4] }).unwrap();
    g.value(y).clone()
}

/// Independent bilinear read: weights from the distance to each corner.
fn read(x: &Tensor<f64>, b: usize, c: usize, px: f64, py: f64) -> f64 {
    let (h, w) = (x.shape()[2] as i64, x.shape()[3] as i64);
    let mut acc = 0.0;
    for iy in (py.floor() as i64)..=(py.floor() as i64 + 1) {
        for ix in (px.floor() as i64)..=(px.floor() as i64 + 1) {
            let wt = (1.0 - (px - ix as f64).abs()).max(0.0) * (1.0 - (py - iy as f64).abs()).max(0.0);
            if ix >= 0 && iy >= 0 && ix < w && iy < h {
                acc += wt * x.get(&[b, c, iy as usize, ix as usize]);
            }
        }
    }
    acc
}

fn formula_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, a: &Tensor<f64>, t: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let o = w.shape()[0];
    let mut out = Tensor::zeros(&[n, o, h, wd]);
    for b in 0..n {
        for oc in 0..o {
            for qy in 0..h {
                for qx in 0..wd {
                    let m = [0, 1, 2, 3].map(|k| a.get(&[b, k, qy, qx]));
                    let (tx, ty) = (t.get(&[b, 0, qy, qx]), t.get(&[b, 1, qy, qx]));
                    let mut acc = bias.data()[oc];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (gx, gy) = (kx as f64 - 1.0, ky as f64 - 1.0);
                            let px = qx as f64 + m[0] * gx + m[1] * gy + tx;
                            let py = qy as f64 + m[2] * gx + m[3] * gy + ty;
                            for ic in 0..c {
                                acc += w.get(&[oc, ic, ky * 3 + kx]) * read(x, b, ic, px, py);
                            }
                        }
                    }
                    out.set(&[b, oc, qy, qx], acc);
                }
            }
        }
    }
    out
}

#[test]
fn grid_examples() {
    let id = transform_grid([1.0, 0.0, 0.0, 1.0], [0.0, 0.0]);
    let abs: Vec<_> = id.iter().map(|p| (p[0] + 5.0, p[1] + 5.0)).collect();
    let mut expect = Vec::new();
    for y in 4..=6 {
        for x in 4..=6 {
            expect.push((x as f64, y as f64));
        }
    }
    assert_eq!(abs, expect);

    let dil = transform_grid([2.0, 0.0, 0.0, 2.0], [0.0, 0.0]);
    assert_eq!([dil[0][0] + 5.0, dil[0][1] + 5.0], [3.0, 3.0]);
    assert_eq!([dil[8][0] + 5.0, dil[8][1] + 5.0], [7.0, 7.0]);

    // Counter-clockwise quarter turn.
    let rot = transform_grid([0.0, -1.0, 1.0, 0.0], [0.0, 0.0]);
    assert_eq!(rot[0], [1.0, -1.0]);
    for (i, [gx, gy]) in REGULAR_GRID.iter().enumerate() {
        assert_eq!(rot[i], [-(*gy as f64), *gx as f64]);
    }
}

#[test]
fn identity_field_matches_conv2d() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h, w, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..8), rng.random_range(3..8), rng.random_range(1..4));
        let x = rand_tensor::<f32>(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let wt = rand_tensor::<f32>(&mut rng, &[o, c, 3, 3], -1.0, 1.0);
        let b = rand_tensor::<f32>(&mut rng, &[o], -1.0, 1.0);
        let (a, t) = identity_field(n, h, w);
        let got = run(&x, &wt, &b, &a, &t);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x), g.constant(wt), g.constant(b));
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        assert!(got.max_abs_diff(g.value(y)) < 1e-5, "seed {seed}");
    }
}

#[test]
fn zero_input_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
    let w = rand_tensor::<f64>(&mut rng, &[3, 2, 9], -1.0, 1.0);
    let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let a = rand_tensor::<f64>(&mut rng, &[1, 4, 5, 5], -2.0, 2.0);
    let t = rand_tensor::<f64>(&mut rng, &[1, 2, 5, 5], -2.0, 2.0);
    let y = run(&x, &w, &b, &a, &t);
    for oc in 0..3 {
        assert!(y.data()[oc * 25..(oc + 1) * 25].iter().all(|&v| v == b.data()[oc]));
    }
}

#[test]
fn matches_formula_oracle() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor::<f64>(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = rand_tensor::<f64>(&mut rng, &[3, 2, 9], -1.0, 1.0);
        let b = rand_tensor::<f64>(&mut rng, &[3], -1.0, 1.0);
        let a = rand_tensor::<f64>(&mut rng, &[1, 4, 6, 6], -1.5, 1.5);
        let t = rand_tensor::<f64>(&mut rng, &[1, 2, 6, 6], -2.0, 2.0);
        let got = run(&x, &w, &b, &a, &t);
        let want = formula_oracle(&x, &w, &b, &a, &t);
        assert!(got.max_abs_diff(&want) < 1e-12, "seed {seed}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn translation_equivariance_with_identity_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor::<f64>(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
    let mut shifted = Tensor::zeros(&[1, 2, 8, 8]);
    for c in 0..2 {
        for y in 0..8 {
            for xx in 1..8 {
                shifted.set(&[0, c, y, xx], x.get(&[0, c, y, xx - 1]));
            }
        }
    }
    let w = rand_tensor::<f64>(&mut rng, &[2, 2, 9], -1.0, 1.0);
    let b = rand_tensor::<f64>(&mut rng, &[2], -1.0, 1.0);
    let (a, t) = identity_field(1, 8, 8);
    let y0 = run(&x, &w, &b, &a, &t);
    let y1 = run(&shifted, &w, &b, &a, &t);
    for c in 0..2 {
        for y in 1..7 {
            for xx in 2..7 {
                assert!((y1.get(&[0, c, y, xx]) - y0.get(&[0, c, y, xx - 1])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rejects_mismatched_field() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = g.constant(Tensor::zeros(&[3, 2, 9]));
    let b = g.constant(Tensor::zeros(&[3]));
    let a = g.constant(Tensor::zeros(&[1, 4, 4, 5]));
    let t = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let err = adaptive_conv(&mut g, x, w, b, AffineField { a, t }).unwrap_err();
    assert!(err.to_string().contains("A must be"), "{err}");
    let w4 = g.constant(Tensor::zeros(&[3, 1, 9]));
    let a = g.constant(Tensor::zeros(&[1, 4, 5, 5]));
    assert!(adaptive_conv(&mut g, x, w4, b, AffineField { a, t }).is_err());
}

#[test]
fn gradients_for_all_inputs() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor::<f64>(&mut rng, &[2, 2, 5, 5], -1.0, 1.0),
            rand_tensor::<f64>(&mut rng, &[3, 2, 9], -1.0, 1.0),
            rand_tensor::<f64>(&mut rng, &[3], -1.0, 1.0),
            rand_tensor::<f64>(&mut rng, &[2, 4, 5, 5], -1.5, 1.5),
            rand_tensor::<f64>(&mut rng, &[2, 2, 5, 5], -1.5, 1.5),
        ];
        let target = rand_tensor::<f64>(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let report = check(
            &inputs,
            |g, v| {
                let y = adaptive_conv(g, v[0], v[1], v[2], AffineField { a: v[3], t: v[4] })?;
                let tv = g.constant(target.clone());
                let d = g.mul(y, tv)?;
                let sq = g.mul(y, y)?;
                let s = g.add(d, sq)?;
                g.sum(s)
            },
            1e-5,
            Some(40),
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.per_input.len(), 5);
        assert!(report.max_rel_error() < 1e-4, "seed {seed}: {:?}", report.per_input);
    }
}

#[test]
fn predictor_starts_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, b) = affine_predictor_init::<f64>(3);
    let mut g = Graph::new();
    let f = g.constant(rand_tensor(&mut rng, &[2, 3, 4, 5], -3.0, 3.0));
    let (wv, bv) = (g.constant(w), g.constant(b));
    let field = predict_affine(&mut g, f, wv, bv).unwrap();
    let (a, t) = identity_field::<f64>(2, 4, 5);
    assert_eq!(g.value(field.a), &a);
    assert_eq!(g.value(field.t), &t);
}

#[test]
fn predictor_gradient_and_constant_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        rand_tensor::<f64>(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
        rand_tensor::<f64>(&mut rng, &[6, 2, 3, 3], -0.5, 0.5),
        rand_tensor::<f64>(&mut rng, &[6], -0.5, 0.5),
    ];
    let probe = rand_tensor::<f64>(&mut rng, &[1, 6, 4, 4], -1.0, 1.0);
    let report = check(
        &inputs,
        |g, v| {
            let field = predict_affine(g, v[0], v[1], v[2])?;
            let raw = g.concat_channels(&[field.a, field.t])?;
            let p = g.constant(probe.clone());
            let m = g.mul(raw, p)?;
            let sq = g.mul(m, m)?;
            g.sum(sq)
        },
        1e-5,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-4);

    // Constant features: interior pixels see identical neighbourhoods.
    let mut g = Graph::new();
    let f = g.constant(Tensor::full(&[1, 2, 6, 6], 0.7));
    let w = g.constant(inputs[1].clone());
    let b = g.constant(inputs[2].clone());
    let field = predict_affine(&mut g, f, w, b).unwrap();
    let a = g.value(field.a);
    for k in 0..4 {
        let v = a.get(&[0, k, 1, 1]);
        for y in 1..5 {
            for x in 1..5 {
                assert!((a.get(&[0, k, y, x]) - v).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn grid_is_affine_in_a(
        a1 in prop::array::uniform4(-3.0f64..3.0),
        a2 in prop::array::uniform4(-3.0f64..3.0),
        t in prop::array::uniform2(-3.0f64..3.0),
        alpha in 0.0f64..1.0,
    ) {
        let mix: [f64; 4] = std::array::from_fn(|k| alpha * a1[k] + (1.0 - alpha) * a2[k]);
        let g = transform_grid(mix, t);
        let (g1, g2) = (transform_grid(a1, t), transform_grid(a2, t));
        for i in 0..9 {
            for d in 0..2 {
                prop_assert!((g[i][d] - (alpha * g1[i][d] + (1.0 - alpha) * g2[i][d])).abs() < 1e-12);
            }
        }
    }
}
