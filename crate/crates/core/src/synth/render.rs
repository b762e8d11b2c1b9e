//! Anti-aliased capsule rasterisation and procedural background.

use rand::Rng;

use crate::tensor::Tensor;

/// Upper bound on any background channel value.
pub const BACKGROUND_MAX: f32 = 0.4;

/// RGB canvas, planar `[3, H, W]`.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Disc-swept segment with a colour.
#[derive(Clone, Copy, Debug)]
pub struct Capsule {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub radius: f64,
    pub color: [f32; 3],
}

impl Capsule {
    /// Fractional pixel coverage at pixel centre `(x, y)`.
    pub fn coverage(&self, x: f64, y: f64) -> f32 {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - self.a[0]) * dx + (y - self.a[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.a[0] + t * dx, self.a[1] + t * dy);
        let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        (self.radius + 0.5 - d).clamp(0.0, 1.0) as f32
    }

    fn bounds(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let pad = self.radius + 1.0;
        let x0 = (self.a[0].min(self.b[0]) - pad).floor().max(0.0) as usize;
        let y0 = (self.a[1].min(self.b[1]) - pad).floor().max(0.0) as usize;
        let x1 = ((self.a[0].max(self.b[0]) + pad).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        let y1 = ((self.a[1].max(self.b[1]) + pad).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        (x0, y0, x1, y1)
    }
}

impl Canvas {
    /// Smooth low-contrast texture: a few random sinusoids plus pixel noise.
    pub fn textured<R: Rng>(width: usize, height: usize, rng: &mut R) -> Self {
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.08..0.22));
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.03..0.07),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let mut t = 0.0;
                for &(amp, fx, fy, ph) in &waves {
                    t += amp * (fx * x as f32 + fy * y as f32 + ph).sin();
                }
                for (c, &b) in base.iter().enumerate() {
                    let noise = rng.random_range(-0.02..0.02);
                    data[c * plane + y * width + x] = (b + t + noise).clamp(0.0, BACKGROUND_MAX);
                }
            }
        }
        Self { width, height, data }
    }

    /// Paint `capsule`, and raise `coverage` (an `H * W` mask) to at least
    /// the capsule's coverage.
    pub fn paint(&mut self, capsule: &Capsule, coverage: &mut [f32]) {
        let plane = self.width * self.height;
        let (x0, y0, x1, y1) = capsule.bounds(self.width, self.height);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = capsule.coverage(x as f64, y as f64);
                if a <= 0.0 {
                    continue;
                }
                let i = y * self.width + x;
                for c in 0..3 {
                    let p = &mut self.data[c * plane + i];
                    *p = (1.0 - a) * *p + a * capsule.color[c];
                }
                coverage[i] = coverage[i].max(a);
            }
        }
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(&[3, self.height, self.width], self.data).expect("canvas size")
    }
}

/// HSV to RGB with all components in `[0, 1]`.
pub fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
