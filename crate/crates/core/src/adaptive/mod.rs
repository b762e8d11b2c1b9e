//! Adaptive convolution: a 3x3 convolution whose sampling grid is moved per
//! output pixel by a predicted affine transform.

use crate::tensor::linalg::gemm;
use crate::tensor::ops::{bilinear_taps, transpose};
use crate::tensor::{BackwardOp, Graph, Scalar, Tensor, TensorError, Var};

/// Regular 3x3 offsets `(x, y)`, index `ky * 3 + kx`.
pub const REGULAR_GRID: [[i32; 2]; 9] = [
    [-1, -1],
    [0, -1],
    [1, -1],
    [-1, 0],
    [0, 0],
    [1, 0],
    [-1, 1],
    [0, 1],
    [1, 1],
];

/// Bias of a freshly initialised affine predictor: `A = I`, `t = 0`.
pub const IDENTITY_AFFINE: [f64; 6] = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];

/// Per-pixel affine field. `a` is `[N, 4, H, W]` holding `(A00, A01, A10,
/// A11)`; `t` is `[N, 2, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct AffineField {
    pub a: Var,
    pub t: Var,
}

/// Sampling offsets `A g_i + t` for the nine regular grid points. The
/// absolute positions are these plus the pixel itself.
pub fn transform_grid(a: [f64; 4], t: [f64; 2]) -> [[f64; 2]; 9] {
    REGULAR_GRID.map(|[gx, gy]| {
        let (gx, gy) = (gx as f64, gy as f64);
        [a[0] * gx + a[1] * gy + t[0], a[2] * gx + a[3] * gy + t[1]]
    })
}

/// Weight and bias of an affine predictor for `channels` inputs.
pub fn affine_predictor_init<T: Scalar>(channels: usize) -> (Tensor<T>, Tensor<T>) {
    let w = Tensor::zeros(&[6, channels, 3, 3]);
    let b = Tensor::new(&[6], IDENTITY_AFFINE.iter().map(|&v| T::from_f64(v)).collect()).expect("bias shape");
    (w, b)
}

/// 3x3 convolution to six channels split into `A` and `t`.
pub fn predict_affine<T: Scalar>(g: &mut Graph<T>, features: Var, weight: Var, bias: Var) -> Result<AffineField, TensorError> {
    let raw = g.conv2d(features, weight, bias, 1, 1)?;
    let parts = g.split_channels(raw, &[4, 2])?;
    Ok(AffineField { a: parts[0], t: parts[1] })
}

fn shape_err(detail: String) -> TensorError {
    TensorError::Shape { op: "adaptive_conv", detail }
}

/// Bilinear taps of the nine sampling points of every pixel of one image,
/// laid out `[9][H*W]`: flat plane index, weight and weight derivatives.
/// Taps outside the map point at index 0 with all weights zero.
struct Taps<T> {
    idx: Vec<[u32; 4]>,
    w: Vec<[T; 4]>,
    dwdx: Vec<[T; 4]>,
    dwdy: Vec<[T; 4]>,
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
}

impl Geom {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl<T: Scalar> Taps<T> {
    fn new(p: usize) -> Self {
        Self {
            idx: vec![[0; 4]; 9 * p],
            w: vec![[T::zero(); 4]; 9 * p],
            dwdx: vec![[T::zero(); 4]; 9 * p],
            dwdy: vec![[T::zero(); 4]; 9 * p],
        }
    }

    /// Fill from the field of image `b`.
    fn compute(&mut self, gm: Geom, b: usize, a: &[T], t: &[T]) {
        let p = gm.plane();
        for q in 0..p {
            let fa = |k: usize| a[(b * 4 + k) * p + q];
            let (a00, a01, a10, a11) = (fa(0), fa(1), fa(2), fa(3));
            let tx = t[(b * 2) * p + q];
            let ty = t[(b * 2 + 1) * p + q];
            let qx = T::from_f64((q % gm.w) as f64);
            let qy = T::from_f64((q / gm.w) as f64);
            for (i, &[gx, gy]) in REGULAR_GRID.iter().enumerate() {
                let (gx, gy) = (T::from_f64(gx as f64), T::from_f64(gy as f64));
                let px = qx + (a00 * gx + a01 * gy + tx);
                let py = qy + (a10 * gx + a11 * gy + ty);
                let slot = i * p + q;
                for (k, tap) in bilinear_taps(px, py).iter().enumerate() {
                    if tap.x >= 0 && tap.y >= 0 && (tap.x as usize) < gm.w && (tap.y as usize) < gm.h {
                        self.idx[slot][k] = (tap.y as usize * gm.w + tap.x as usize) as u32;
                        self.w[slot][k] = tap.w;
                        self.dwdx[slot][k] = tap.dwdx;
                        self.dwdy[slot][k] = tap.dwdy;
                    } else {
                        self.idx[slot][k] = 0;
                        self.w[slot][k] = T::zero();
                        self.dwdx[slot][k] = T::zero();
                        self.dwdy[slot][k] = T::zero();
                    }
                }
            }
        }
    }

    #[inline]
    fn read(&self, slot: usize, src: &[T]) -> T {
        let (idx, w) = (&self.idx[slot], &self.w[slot]);
        w[0] * src[idx[0] as usize] + w[1] * src[idx[1] as usize] + w[2] * src[idx[2] as usize] + w[3] * src[idx[3] as usize]
    }
}

/// Gathered samples of one image `x [C, H, W]` as `col [C*9, H*W]`.
fn gather<T: Scalar>(gm: Geom, x: &[T], taps: &Taps<T>, col: &mut [T]) {
    let p = gm.plane();
    for ch in 0..gm.c {
        let src = &x[ch * p..(ch + 1) * p];
        for i in 0..9 {
            let row = &mut col[(ch * 9 + i) * p..(ch * 9 + i + 1) * p];
            for (q, d) in row.iter_mut().enumerate() {
                *d = taps.read(i * p + q, src);
            }
        }
    }
}

/// Same samples transposed: `row [H*W, C*9]`.
fn gather_rows<T: Scalar>(gm: Geom, x: &[T], taps: &Taps<T>, rows: &mut [T]) {
    let p = gm.plane();
    let r = gm.c * 9;
    for q in 0..p {
        let dst = &mut rows[q * r..(q + 1) * r];
        for ch in 0..gm.c {
            let src = &x[ch * p..(ch + 1) * p];
            for i in 0..9 {
                dst[ch * 9 + i] = taps.read(i * p + q, src);
            }
        }
    }
}

struct AdaptiveConvOp {
    gm: Geom,
}

impl<T: Scalar> BackwardOp<T> for AdaptiveConvOp {
    fn name(&self) -> &'static str {
        "adaptive_conv"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gm = self.gm;
        let (p, rows) = (gm.plane(), gm.c * 9);
        let (in_img, out_img) = (gm.c * p, gm.o * p);
        let x = inputs[0].data();
        let (a, t) = (inputs[3].data(), inputs[4].data());
        let need_col_grad = needs[0] || needs[3] || needs[4];
        let wt = need_col_grad.then(|| transpose(inputs[1].data(), gm.o, rows));
        let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut gw = needs[1].then(|| vec![T::zero(); gm.o * rows]);
        let mut ga = needs[3].then(|| vec![T::zero(); gm.n * 4 * p]);
        let mut gt = needs[4].then(|| vec![T::zero(); gm.n * 2 * p]);
        let mut taps = Taps::new(p);
        let mut buf = vec![T::zero(); rows * p];
        let mut dpos = vec![[T::zero(); 2]; 9 * p];
        for b in 0..gm.n {
            taps.compute(gm, b, a, t);
            let xb = &x[b * in_img..(b + 1) * in_img];
            let gy = &g[b * out_img..(b + 1) * out_img];
            if let Some(gw) = gw.as_mut() {
                gather_rows(gm, xb, &taps, &mut buf);
                gemm(false, false, gm.o, rows, p, T::one(), gy, &buf, T::one(), gw);
            }
            let Some(wt) = wt.as_ref() else { continue };
            gemm(false, false, rows, p, gm.o, T::one(), wt, gy, T::zero(), &mut buf);
            dpos.iter_mut().for_each(|d| *d = [T::zero(); 2]);
            for ch in 0..gm.c {
                let src = &xb[ch * p..(ch + 1) * p];
                for i in 0..9 {
                    let grow = &buf[(ch * 9 + i) * p..(ch * 9 + i + 1) * p];
                    for (q, &gv) in grow.iter().enumerate() {
                        if gv == T::zero() {
                            continue;
                        }
                        let slot = i * p + q;
                        let idx = taps.idx[slot];
                        let v = idx.map(|j| src[j as usize]);
                        let (dx, dy) = (&taps.dwdx[slot], &taps.dwdy[slot]);
                        let sx = dx[0] * v[0] + dx[1] * v[1] + dx[2] * v[2] + dx[3] * v[3];
                        let sy = dy[0] * v[0] + dy[1] * v[1] + dy[2] * v[2] + dy[3] * v[3];
                        dpos[slot][0] += gv * sx;
                        dpos[slot][1] += gv * sy;
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[b * in_img + ch * p..b * in_img + (ch + 1) * p];
                            for k in 0..4 {
                                dst[idx[k] as usize] += gv * taps.w[slot][k];
                            }
                        }
                    }
                }
            }
            for q in 0..p {
                for (i, &[ox, oy]) in REGULAR_GRID.iter().enumerate() {
                    let [px, py] = dpos[i * p + q];
                    let (ox, oy) = (T::from_f64(ox as f64), T::from_f64(oy as f64));
                    if let Some(ga) = ga.as_mut() {
                        ga[(b * 4) * p + q] += px * ox;
                        ga[(b * 4 + 1) * p + q] += px * oy;
                        ga[(b * 4 + 2) * p + q] += py * ox;
                        ga[(b * 4 + 3) * p + q] += py * oy;
                    }
                    if let Some(gt) = gt.as_mut() {
                        gt[(b * 2) * p + q] += px;
                        gt[(b * 2 + 1) * p + q] += py;
                    }
                }
            }
        }
        let gb = needs[2].then(|| {
            let mut gb = vec![T::zero(); gm.o];
            for b in 0..gm.n {
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += g[b * out_img + o * p..b * out_img + (o + 1) * p].iter().copied().sum::<T>();
                }
            }
            gb
        });
        vec![gx, gw, gb, ga, gt]
    }
}

/// `y(q) = sum_i W_i x(q + A(q) g_i + t(q)) + b` with zero-padded bilinear
/// reads. `weight` is `[O, C, 9]` or `[O, C, 3, 3]`.
pub fn adaptive_conv<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    weight: Var,
    bias: Var,
    field: AffineField,
) -> Result<Var, TensorError> {
    let si = g.shape(input).to_vec();
    let sw = g.shape(weight).to_vec();
    if si.len() != 4 {
        return Err(shape_err(format!("input must be [N,C,H,W], got {si:?}")));
    }
    let kernel_ok = match sw.len() {
        3 => sw[2] == 9,
        4 => sw[2] == 3 && sw[3] == 3,
        _ => false,
    };
    if !kernel_ok || sw[1] != si[1] {
        return Err(shape_err(format!("weight must be [O,C={},9] or [O,C,3,3], got {sw:?}", si[1])));
    }
    let gm = Geom { n: si[0], c: si[1], h: si[2], w: si[3], o: sw[0] };
    if g.shape(bias) != [gm.o] {
        return Err(shape_err(format!("bias must be [O={}], got {:?}", gm.o, g.shape(bias))));
    }
    for (name, v, ch) in [("A", field.a, 4), ("t", field.t, 2)] {
        let s = g.shape(v);
        if s != [gm.n, ch, gm.h, gm.w] {
            return Err(shape_err(format!(
                "{name} must be [{}, {ch}, {}, {}] to match the input, got {s:?}",
                gm.n, gm.h, gm.w
            )));
        }
    }
    let p = gm.plane();
    let (in_img, out_img) = (gm.c * p, gm.o * p);
    let (x, w, bias_v) = (g.value(input).data(), g.value(weight).data(), g.value(bias).data());
    let (a, t) = (g.value(field.a).data(), g.value(field.t).data());
    let mut out = vec![T::zero(); gm.n * out_img];
    let mut taps = Taps::new(p);
    let mut col = vec![T::zero(); gm.c * 9 * p];
    for b in 0..gm.n {
        taps.compute(gm, b, a, t);
        gather(gm, &x[b * in_img..(b + 1) * in_img], &taps, &mut col);
        let dst = &mut out[b * out_img..(b + 1) * out_img];
        for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias_v[o]);
        }
        gemm(false, false, gm.o, p, gm.c * 9, T::one(), w, &col, T::one(), dst);
    }
    let out = Tensor::new(&[gm.n, gm.o, gm.h, gm.w], out)?;
    let parents = [input, weight, bias, field.a, field.t];
    let op = AdaptiveConvOp { gm };
    g.record("adaptive_conv", out, &parents, Box::new(op))
}

#[cfg(test)]
mod tests;
