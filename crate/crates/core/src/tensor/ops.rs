//! Differentiable operations recorded on a [`Graph`].

use super::array::Tensor;
use super::graph::{BackwardOp, Graph, Var};
use super::linalg::gemm;
use super::scalar::Scalar;
use super::TensorError;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err(
            op,
            format!("operand shapes differ: {:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Bilinear interpolation taps at a fractional position: the four integer
/// neighbours with their weight and the weight's partial derivatives with
/// respect to x and y.
#[derive(Clone, Copy, Debug)]
pub struct Tap<T> {
    pub x: i64,
    pub y: i64,
    pub w: T,
    pub dwdx: T,
    pub dwdy: T,
}

#[inline]
pub fn bilinear_taps<T: Scalar>(x: T, y: T) -> [Tap<T>; 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (ix, iy) = (x0.to_i64(), y0.to_i64());
    let one = T::one();
    [
        Tap { x: ix, y: iy, w: (one - fx) * (one - fy), dwdx: -(one - fy), dwdy: -(one - fx) },
        Tap { x: ix + 1, y: iy, w: fx * (one - fy), dwdx: one - fy, dwdy: -fx },
        Tap { x: ix, y: iy + 1, w: (one - fx) * fy, dwdx: -fy, dwdy: one - fx },
        Tap { x: ix + 1, y: iy + 1, w: fx * fy, dwdx: fy, dwdy: fx },
    ]
}

/// Zero-padded bilinear read from a single `h x w` plane.
#[inline]
pub fn sample_plane<T: Scalar>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let mut acc = T::zero();
    for tap in bilinear_taps(x, y) {
        if tap.x >= 0 && tap.y >= 0 && (tap.x as usize) < w && (tap.y as usize) < h {
            acc += tap.w * plane[tap.y as usize * w + tap.x as usize];
        }
    }
    acc
}

// ---------------------------------------------------------------- elementwise

struct AddOp;
impl<T: Scalar> BackwardOp<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct SubOp;
impl<T: Scalar> BackwardOp<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|&v| -v).collect()),
        ]
    }
}

struct MulOp;
impl<T: Scalar> BackwardOp<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let prod = |other: &Tensor<T>| g.iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        vec![needs[0].then(|| prod(x[1])), needs[1].then(|| prod(x[0]))]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> BackwardOp<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct PassOp(&'static str);
impl<T: Scalar> BackwardOp<T> for PassOp {
    fn name(&self) -> &'static str {
        self.0
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

struct ReluOp;
impl<T: Scalar> BackwardOp<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let gx = g
            .iter()
            .zip(x[0].data())
            .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
            .collect();
        vec![Some(gx)]
    }
}

struct SigmoidOp;
impl<T: Scalar> BackwardOp<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let gx = g
            .iter()
            .zip(y.data())
            .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
            .collect();
        vec![Some(gx)]
    }
}

struct SmoothL1Op<T>(T);
impl<T: Scalar> BackwardOp<T> for SmoothL1Op<T> {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let delta = self.0;
        let gx = g
            .iter()
            .zip(x[0].data())
            .map(|(&gv, &d)| {
                if d.abs() < delta {
                    gv * d / delta
                } else if d > T::zero() {
                    gv
                } else {
                    -gv
                }
            })
            .collect();
        vec![Some(gx)]
    }
}

struct SumOp;
impl<T: Scalar> BackwardOp<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; x[0].len()])]
    }
}

/// Elementwise smooth-L1 with threshold `delta`:
/// `0.5 d^2 / delta` for `|d| < delta`, `|d| - 0.5 delta` otherwise.
pub fn smooth_l1_value<T: Scalar>(d: T, delta: T) -> T {
    let half = T::from_f64(0.5);
    if d.abs() < delta {
        half * d * d / delta
    } else {
        d.abs() - half * delta
    }
}

// ---------------------------------------------------------------- structural

struct ConcatOp {
    // channel extent of each input
    sizes: Vec<usize>,
    batch: usize,
    inner: usize,
}
impl<T: Scalar> BackwardOp<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let total: usize = self.sizes.iter().sum();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (i, &c) in self.sizes.iter().enumerate() {
            if needs[i] {
                let mut buf = Vec::with_capacity(self.batch * c * self.inner);
                for b in 0..self.batch {
                    let base = (b * total + start) * self.inner;
                    buf.extend_from_slice(&g[base..base + c * self.inner]);
                }
                out.push(Some(buf));
            } else {
                out.push(None);
            }
            start += c;
        }
        out
    }
}

struct NarrowOp {
    start: usize,
    len: usize,
    channels: usize,
    batch: usize,
    inner: usize,
}
impl<T: Scalar> BackwardOp<T> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); self.batch * self.channels * self.inner];
        let chunk = self.len * self.inner;
        for b in 0..self.batch {
            let dst = (b * self.channels + self.start) * self.inner;
            gx[dst..dst + chunk].copy_from_slice(&g[b * chunk..(b + 1) * chunk]);
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------- dense

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Scalar> BackwardOp<T> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = needs[0].then(|| {
            let mut ga = vec![T::zero(); m * k];
            gemm(false, true, m, k, n, T::one(), g, x[1].data(), T::zero(), &mut ga);
            ga
        });
        let gb = needs[1].then(|| {
            let mut gb = vec![T::zero(); k * n];
            gemm(true, false, k, n, m, T::one(), x[0].data(), g, T::zero(), &mut gb);
            gb
        });
        vec![ga, gb]
    }
}

struct LinearOp {
    batch: usize,
    fan_in: usize,
    fan_out: usize,
}
impl<T: Scalar> BackwardOp<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, i, o) = (self.batch, self.fan_in, self.fan_out);
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); n * i];
            gemm(false, false, n, i, o, T::one(), g, x[1].data(), T::zero(), &mut gx);
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); o * i];
            gemm(true, false, o, i, n, T::one(), g, x[0].data(), T::zero(), &mut gw);
            gw
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![T::zero(); o];
            for row in g.chunks_exact(o) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

/// Geometry of a 2-D convolution over `[N, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Output columns `[lo, hi)` whose input column `o * stride + k - pad` lies
/// inside `[0, w)`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one image `[C, H, W]` into `col [C*kh*kw, Ho*Wo]`.
fn im2col<T: Scalar>(x: &[T], gm: &ConvGeom, col: &mut [T]) {
    let p = gm.ho * gm.wo;
    let plane = gm.h * gm.w;
    col.fill(T::zero());
    for c in 0..gm.c {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..gm.kh {
            let (oy0, oy1) = valid_range(ky, gm.pad, gm.stride, gm.h, gm.ho);
            for kx in 0..gm.kw {
                let (ox0, ox1) = valid_range(kx, gm.pad, gm.stride, gm.w, gm.wo);
                if ox0 >= ox1 {
                    continue;
                }
                let row = (c * gm.kh + ky) * gm.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let ix0 = ox0 * gm.stride + kx - gm.pad;
                for oy in oy0..oy1 {
                    let iy = oy * gm.stride + ky - gm.pad;
                    let srow = &src[iy * gm.w..(iy + 1) * gm.w];
                    let drow = &mut dst[oy * gm.wo + ox0..oy * gm.wo + ox1];
                    if gm.stride == 1 {
                        drow.copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (d, s) in drow.iter_mut().zip(srow[ix0..].iter().step_by(gm.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` into one image `x`.
fn col2im<T: Scalar>(col: &[T], gm: &ConvGeom, x: &mut [T]) {
    let p = gm.ho * gm.wo;
    let plane = gm.h * gm.w;
    for c in 0..gm.c {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..gm.kh {
            let (oy0, oy1) = valid_range(ky, gm.pad, gm.stride, gm.h, gm.ho);
            for kx in 0..gm.kw {
                let (ox0, ox1) = valid_range(kx, gm.pad, gm.stride, gm.w, gm.wo);
                if ox0 >= ox1 {
                    continue;
                }
                let row = (c * gm.kh + ky) * gm.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let ix0 = ox0 * gm.stride + kx - gm.pad;
                for oy in oy0..oy1 {
                    let iy = oy * gm.stride + ky - gm.pad;
                    let srow = &src[oy * gm.wo + ox0..oy * gm.wo + ox1];
                    let drow = &mut dst[iy * gm.w + ix0..(iy + 1) * gm.w];
                    if gm.stride == 1 {
                        for (d, &v) in drow.iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in drow.iter_mut().step_by(gm.stride).zip(srow) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed unfold of one image: `row [Ho*Wo, C*kh*kw]`.
fn im2row<T: Scalar>(x: &[T], gm: &ConvGeom, row: &mut [T]) {
    let rows = gm.rows();
    let plane = gm.h * gm.w;
    row.fill(T::zero());
    let xr: Vec<(usize, usize)> = (0..gm.kw).map(|kx| valid_range(kx, gm.pad, gm.stride, gm.w, gm.wo)).collect();
    for oy in 0..gm.ho {
        let tile = &mut row[oy * gm.wo * rows..(oy + 1) * gm.wo * rows];
        for c in 0..gm.c {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..gm.kh {
                let iy = (oy * gm.stride + ky) as isize - gm.pad as isize;
                if iy < 0 || iy >= gm.h as isize {
                    continue;
                }
                let srow = &src[iy as usize * gm.w..(iy as usize + 1) * gm.w];
                for (kx, &(ox0, ox1)) in xr.iter().enumerate() {
                    let r = (c * gm.kh + ky) * gm.kw + kx;
                    for ox in ox0..ox1 {
                        tile[ox * rows + r] = srow[ox * gm.stride + kx - gm.pad];
                    }
                }
            }
        }
    }
}

/// Row-major transpose of an `r x c` matrix.
pub(crate) fn transpose<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

struct Conv2dOp {
    geom: ConvGeom,
}
impl<T: Scalar> BackwardOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    // Images are processed one at a time so the unfold buffer stays in cache.
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gm = &self.geom;
        let (rows, p) = (gm.rows(), gm.ho * gm.wo);
        let (in_img, out_img) = (gm.c * gm.h * gm.w, gm.o * p);
        let input = x[0].data();
        let wt = needs[0].then(|| transpose(x[1].data(), gm.o, rows));
        let mut gx = needs[0].then(|| vec![T::zero(); input.len()]);
        let mut gw = needs[1].then(|| vec![T::zero(); gm.o * rows]);
        let mut col = vec![T::zero(); rows * p];
        for b in 0..gm.n {
            let gy = &g[b * out_img..(b + 1) * out_img];
            if let Some(gw) = gw.as_mut() {
                im2row(&input[b * in_img..(b + 1) * in_img], gm, &mut col);
                gemm(false, false, gm.o, rows, p, T::one(), gy, &col, T::one(), gw);
            }
            if let (Some(gx), Some(wt)) = (gx.as_mut(), wt.as_ref()) {
                gemm(false, false, rows, p, gm.o, T::one(), wt, gy, T::zero(), &mut col);
                col2im(&col, gm, &mut gx[b * in_img..(b + 1) * in_img]);
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
        vec![gx, gw, gb]
    }
}

struct BilinearSampleOp {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
}
impl<T: Scalar> BackwardOp<T> for BilinearSampleOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w, p) = (self.n, self.c, self.h, self.w, self.p);
        let input = x[0].data();
        let pos = x[1].data();
        let mut gx = needs[0].then(|| vec![T::zero(); input.len()]);
        let mut gp = needs[1].then(|| vec![T::zero(); pos.len()]);
        for b in 0..n {
            for j in 0..p {
                let px = pos[(b * p + j) * 2];
                let py = pos[(b * p + j) * 2 + 1];
                let taps = bilinear_taps(px, py);
                let (mut dx, mut dy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let gv = g[(b * c + ch) * p + j];
                    let base = (b * c + ch) * h * w;
                    for tap in &taps {
                        if tap.x < 0 || tap.y < 0 || tap.x as usize >= w || tap.y as usize >= h {
                            continue;
                        }
                        let idx = base + tap.y as usize * w + tap.x as usize;
                        if let Some(gx) = gx.as_mut() {
                            gx[idx] += gv * tap.w;
                        }
                        dx += gv * tap.dwdx * input[idx];
                        dy += gv * tap.dwdy * input[idx];
                    }
                }
                if let Some(gp) = gp.as_mut() {
                    gp[(b * p + j) * 2] = dx;
                    gp[(b * p + j) * 2 + 1] = dy;
                }
            }
        }
        vec![gx, gp]
    }
}

// ---------------------------------------------------------------- graph API

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", out, &[a, b], Box::new(AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", out, &[a, b], Box::new(SubOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", out, &[a, b], Box::new(MulOp))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v * s);
        self.record("scale", out, &[a], Box::new(ScaleOp(s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v + s);
        self.record("add_scalar", out, &[a], Box::new(PassOp("add_scalar")))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", out, &[a], Box::new(ReluOp))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.record("sigmoid", out, &[a], Box::new(SigmoidOp))
    }

    pub fn smooth_l1(&mut self, a: Var, delta: T) -> Result<Var, TensorError> {
        let out = self.value(a).map(|d| smooth_l1_value(d, delta));
        self.record("smooth_l1", out, &[a], Box::new(SmoothL1Op(delta)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, &[a], Box::new(SumOp))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", out, &[a], Box::new(PassOp("reshape")))
    }

    /// Concatenate `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat_channels", "no inputs"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat_channels", "need at least 2 dims"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err(
                    "concat_channels",
                    format!("input shape {s:?} incompatible with {first:?}"),
                ));
            }
            sizes.push(s[1]);
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (&p, &c) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let out = Tensor::new(&shape, data)?;
        self.record("concat_channels", out, parts, Box::new(ConcatOp { sizes, batch, inner }))
    }

    /// Channels `[start, start + len)` of an `[N, C, ...]` tensor.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || start + len > s[1] {
            return Err(shape_err(
                "narrow_channels",
                format!("channels [{start}, {}) out of range for shape {s:?}", start + len),
            ));
        }
        let out = self.value(a).narrow_channels(start, len);
        let op = NarrowOp {
            start,
            len,
            channels: s[1],
            batch: s[0],
            inner: s[2..].iter().product(),
        };
        self.record("narrow_channels", out, &[a], Box::new(op))
    }

    /// Split along channels into consecutive blocks of the given sizes.
    pub fn split_channels(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let total: usize = sizes.iter().sum();
        if self.shape(a).get(1) != Some(&total) {
            return Err(shape_err(
                "split_channels",
                format!("sizes sum to {total}, tensor shape is {:?}", self.shape(a)),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow_channels(a, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        self.record("matmul", out, &[a, b], Box::new(MatmulOp { m, k, n }))
    }

    /// Fully connected layer: `x [N, in]`, `weight [out, in]`, `bias [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err(
                "linear",
                format!("input {sx:?} does not match weight {sw:?} (in features)"),
            ));
        }
        if sb != [sw[0]] {
            return Err(shape_err("linear", format!("bias {sb:?} must be [{}]", sw[0])));
        }
        let (n, i, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(self.value(bias).data());
        }
        gemm(false, true, n, o, i, T::one(), self.value(x).data(), self.value(weight).data(), T::one(), &mut out);
        let out = Tensor::new(&[n, o], out)?;
        self.record("linear", out, &[x, weight, bias], Box::new(LinearOp { batch: n, fan_in: i, fan_out: o }))
    }

    /// Zero-padded cross-correlation. `input [N,C,H,W]`, `weight [O,C,kh,kw]`,
    /// `bias [O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let geom = conv_geom(self.shape(input), self.shape(weight), self.shape(bias), stride, pad)?;
        let (rows, p) = (geom.rows(), geom.ho * geom.wo);
        let (in_img, out_img) = (geom.c * geom.h * geom.w, geom.o * p);
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bias_v = self.value(bias).data();
        let mut out = vec![T::zero(); geom.n * out_img];
        let mut col = vec![T::zero(); rows * p];
        for b in 0..geom.n {
            let dst = &mut out[b * out_img..(b + 1) * out_img];
            for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(bias_v[o]);
            }
            im2col(&x[b * in_img..(b + 1) * in_img], &geom, &mut col);
            gemm(false, false, geom.o, p, rows, T::one(), w, &col, T::one(), dst);
        }
        let out = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], out)?;
        self.record("conv2d", out, &[input, weight, bias], Box::new(Conv2dOp { geom }))
    }

    /// Bilinear reads of `input [N,C,H,W]` at `positions [N,P,2]` given as
    /// pixel `(x, y)`. Out-of-range neighbours contribute zero.
    pub fn bilinear_sample(&mut self, input: Var, positions: Var) -> Result<Var, TensorError> {
        let si = self.shape(input).to_vec();
        let sp = self.shape(positions).to_vec();
        if si.len() != 4 {
            return Err(shape_err("bilinear_sample", format!("input must be [N,C,H,W], got {si:?}")));
        }
        if sp.len() != 3 || sp[2] != 2 || sp[0] != si[0] {
            return Err(shape_err(
                "bilinear_sample",
                format!("positions must be [N={},P,2], got {sp:?}", si[0]),
            ));
        }
        let (n, c, h, w, p) = (si[0], si[1], si[2], si[3], sp[1]);
        let x = self.value(input).data();
        let pos = self.value(positions).data();
        let mut out = vec![T::zero(); n * c * p];
        for b in 0..n {
            for j in 0..p {
                let (px, py) = (pos[(b * p + j) * 2], pos[(b * p + j) * 2 + 1]);
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    out[(b * c + ch) * p + j] = sample_plane(&x[base..base + h * w], h, w, px, py);
                }
            }
        }
        let out = Tensor::new(&[n, c, p], out)?;
        self.record("bilinear_sample", out, &[input, positions], Box::new(BilinearSampleOp { n, c, h, w, p }))
    }
}

pub fn conv_geom(si: &[usize], sw: &[usize], sb: &[usize], stride: usize, pad: usize) -> Result<ConvGeom, TensorError> {
    if si.len() != 4 {
        return Err(shape_err("conv2d", format!("input must be [N,C,H,W], got {si:?}")));
    }
    if sw.len() != 4 {
        return Err(shape_err("conv2d", format!("weight must be [O,C,kh,kw], got {sw:?}")));
    }
    if si[1] != sw[1] {
        return Err(shape_err(
            "conv2d",
            format!("channel dimension: input has C={} but weight expects C={}", si[1], sw[1]),
        ));
    }
    if sb != [sw[0]] {
        return Err(shape_err("conv2d", format!("bias must be [O={}], got {sb:?}", sw[0])));
    }
    if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel extents must be odd, got {}x{}", sw[2], sw[3])));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    if si[2] + 2 * pad < sw[2] || si[3] + 2 * pad < sw[3] {
        return Err(shape_err("conv2d", "kernel larger than padded input"));
    }
    let ho = (si[2] + 2 * pad - sw[2]) / stride + 1;
    let wo = (si[3] + 2 * pad - sw[3]) / stride + 1;
    Ok(ConvGeom {
        n: si[0],
        c: si[1],
        h: si[2],
        w: si[3],
        o: sw[0],
        kh: sw[2],
        kw: sw[3],
        stride,
        pad,
        ho,
        wo,
    })
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
