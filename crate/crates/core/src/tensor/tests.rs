use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct six-loop cross-correlation with zero padding.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.get(&[bn, ic, iy as usize, ix as usize]) * w.get(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[bn, oc, oy, ox], acc + b[oc]);
                }
            }
        }
    }
    out
}

fn conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
    let y = g.conv2d(x, w, b, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_of_ones_sums_neighbourhood() {
    let y = conv(Tensor::ones(&[1, 1, 3, 3]), Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, 1);
    assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
    assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn identity_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 6]);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.set(&[0, 0, 1, 1], 1.0);
    let y = conv(x.clone(), w, Tensor::zeros(&[1]), 1, 1);
    assert_eq!(y, x);
}

#[test]
fn conv_matches_direct_loops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = 1 + (seed as usize % 2);
        let x = rand_tensor(&mut rng, &[1 + seed as usize % 2, 2, 5, 5 + seed as usize % 3]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let expected = conv_reference(&x, &w, b.data(), stride, 1);
        let got = conv(x.clone(), w.clone(), b.clone(), stride, 1);
        assert_eq!(got.shape(), expected.shape());
        assert!(got.max_abs_diff(&expected) < 1e-12, "seed {seed}");

        let got32 = {
            let mut g = Graph::<f32>::new();
            let (x, w, b) = (g.constant(x.cast()), g.constant(w.cast()), g.constant(b.cast()));
            let y = g.conv2d(x, w, b, stride, 1).unwrap();
            g.value(y).cast::<f64>()
        };
        assert!(got32.max_abs_diff(&expected) < 1e-5, "seed {seed} f32");
    }
}

#[test]
fn conv_shape_errors_name_the_dimension() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let w = g.constant(Tensor::zeros(&[2, 3, 2, 2]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("odd"), "{err}");
}

fn sample1(map: Tensor<f64>, x: f64, y: f64) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(map);
    let p = g.constant(Tensor::new(&[1, 1, 2], vec![x, y]).unwrap());
    let s = g.bilinear_sample(m, p).unwrap();
    g.value(s).item()
}

#[test]
fn bilinear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let map = rand_tensor(&mut rng, &[1, 1, 5, 4]);
    assert_eq!(sample1(map.clone(), 2.0, 3.0), map.get(&[0, 0, 3, 2]));

    let mut m = Tensor::zeros(&[1, 1, 2, 2]);
    m.set(&[0, 0, 0, 1], 4.0);
    assert_eq!(sample1(m, 0.5, 0.0), 2.0);

    // (-0.5, 0): corners (-1,0) w=.5 outside, (0,0) w=.5, y-neighbours w=0.
    let mut m = Tensor::zeros(&[1, 1, 2, 2]);
    m.set(&[0, 0, 0, 0], 3.0);
    assert_eq!(sample1(m, -0.5, 0.0), 1.5);
}

#[test]
fn bilinear_is_linear_between_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let map = rand_tensor(&mut rng, &[1, 1, 6, 6]);
    for _ in 0..50 {
        let x = rng.random_range(0..5) as f64;
        let y = rng.random_range(0..6) as f64;
        let a = rng.random_range(0.0..1.0);
        let v = sample1(map.clone(), x + a, y);
        let expected = (1.0 - a) * map.get(&[0, 0, y as usize, x as usize]) + a * map.get(&[0, 0, y as usize, x as usize + 1]);
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn sum_and_square_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(v).unwrap();
    for (gv, xv) in grad.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn two_consumers_sum_branch_gradients() {
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.leaf(x);
    let a = g.scale(v, 3.0).unwrap();
    let b = g.scale(v, -5.0).unwrap();
    let c = g.add(a, b).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[-2.0, -2.0, -2.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::ones(&[2]));
    assert!(matches!(g.backward(v), Err(TensorError::NotScalar { .. })));
    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::ones(&[2]));
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::<f32>::new();
    let v = g.constant(Tensor::full(&[2], 1e30));
    assert!(matches!(g.mul(v, v), Err(TensorError::NonFinite { op: "mul" })));
}

// ------------------------------------------------------------ gradient checks

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn gradcheck_seeds(shape_seed: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + Copy) {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = shape_seed(&mut rng);
        let report = check(&inputs, f, STEP, Some(40), &mut rng).unwrap();
        assert!(report.max_rel_error() < TOL, "seed {seed}: {:?}", report.per_input);
    }
}

/// Scalar head that weights every output element differently.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var, TensorError> {
    let n = g.value(y).len();
    let w = g.constant(Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4 + 1.0 / n as f64));
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn gradcheck_conv2d() {
    gradcheck_seeds(
        |r| vec![rand_tensor(r, &[2, 4, 8, 8]), rand_tensor(r, &[3, 4, 3, 3]), rand_tensor(r, &[3])],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            weighted_sum(g, y)
        },
    );
}

#[test]
fn gradcheck_bilinear_sample() {
    gradcheck_seeds(
        |r| {
            let pos = Tensor::from_fn(&[2, 6, 2], |_| r.random_range(-1.5..8.5));
            vec![rand_tensor(r, &[2, 3, 8, 8]), pos]
        },
        |g, v| {
            let y = g.bilinear_sample(v[0], v[1])?;
            weighted_sum(g, y)
        },
    );
}

#[test]
fn gradcheck_elementwise_and_structural() {
    gradcheck_seeds(
        |r| vec![rand_tensor(r, &[2, 4, 3, 3]), rand_tensor(r, &[2, 4, 3, 3])],
        |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let c = g.relu(b)?;
            let d = g.sigmoid(v[0])?;
            let e = g.add(c, d)?;
            let f = g.smooth_l1(e, 0.3)?;
            let parts = g.split_channels(f, &[1, 3])?;
            let cat = g.concat_channels(&[parts[1], parts[0]])?;
            let r = g.reshape(cat, &[2, 36])?;
            let s = g.add_scalar(r, 0.25)?;
            let m = g.mean(s)?;
            let w = weighted_sum(g, s)?;
            g.add(m, w)
        },
    );
}

#[test]
fn gradcheck_matmul_and_linear() {
    gradcheck_seeds(
        |r| vec![rand_tensor(r, &[3, 5]), rand_tensor(r, &[5, 4]), rand_tensor(r, &[2, 4]), rand_tensor(r, &[2])],
        |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let l = g.linear(m, v[2], v[3])?;
            weighted_sum(g, l)
        },
    );
}

#[test]
fn gradcheck_conv_sample_relu_composite() {
    gradcheck_seeds(
        |r| {
            let pos = Tensor::from_fn(&[1, 5, 2], |_| r.random_range(0.0..5.0));
            vec![rand_tensor(r, &[1, 2, 6, 6]), rand_tensor(r, &[3, 2, 3, 3]), rand_tensor(r, &[3]), pos]
        },
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let y = g.relu(y)?;
            let s = g.bilinear_sample(y, v[3])?;
            weighted_sum(g, s)
        },
    );
}
