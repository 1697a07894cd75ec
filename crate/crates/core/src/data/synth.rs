use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{check_size, DatasetKind, Sample};

/// Accepted mask foreground fraction; draws outside it are regenerated.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.25);

type Point = (f32, f32);

fn bezier(p: [Point; 4], t: f32) -> Point {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

/// Per-pixel signed distance to the nearest vessel wall (negative inside).
struct Canvas {
    size: usize,
    excess: Vec<f32>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            excess: vec![f32::INFINITY; size * size],
        }
    }

    fn stroke(&mut self, p: [Point; 4], width: f32) {
        let r = width / 2.0;
        let len: f32 = (0..16)
            .map(|i| {
                let (a, b) = (bezier(p, i as f32 / 16.0), bezier(p, (i + 1) as f32 / 16.0));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
            })
            .sum();
        let steps = (len * 3.0).ceil().max(2.0) as usize;
        let reach = r + 1.5;
        let n = self.size as isize;
        for s in 0..=steps {
            let (py, px) = bezier(p, s as f32 / steps as f32);
            let (y0, y1) = ((py - reach).floor() as isize, (py + reach).ceil() as isize);
            let (x0, x1) = ((px - reach).floor() as isize, (px + reach).ceil() as isize);
            for y in y0.max(0)..=y1.min(n - 1) {
                for x in x0.max(0)..=x1.min(n - 1) {
                    let d = ((y as f32 - py).powi(2) + (x as f32 - px).powi(2)).sqrt() - r;
                    let e = &mut self.excess[y as usize * self.size + x as usize];
                    *e = e.min(d);
                }
            }
        }
    }

    /// A tree: a trunk curve with up to `depth` levels of side branches.
    fn tree(&mut self, rng: &mut ChaCha8Rng, start: Point, heading: f32, width: f32, depth: u32) {
        let s = self.size as f32;
        let length = rng.random_range(0.3..0.6) * s * (0.75f32).powi(3 - depth as i32);
        let bend = |rng: &mut ChaCha8Rng, h: f32| h + rng.random_range(-0.6..0.6);
        let mut pts = [start; 4];
        let mut h = heading;
        for i in 1..4 {
            h = bend(rng, h);
            let step = length / 3.0;
            pts[i] = (pts[i - 1].0 + step * h.sin(), pts[i - 1].1 + step * h.cos());
        }
        self.stroke(pts, width);
        if depth == 0 {
            return;
        }
        let branches = rng.random_range(1..=2);
        for _ in 0..branches {
            let t = rng.random_range(0.3..0.8);
            let at = bezier(pts, t);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let w = (width * rng.random_range(0.55..0.85)).max(1.0);
            let turn = side * rng.random_range(0.5..1.1);
            self.tree(rng, at, heading + turn, w, depth - 1);
        }
    }
}

fn one_image(rng: &mut ChaCha8Rng, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let s = size as f32;
    let mut canvas = Canvas::new(size);
    let trees = rng.random_range(1..=3);
    for _ in 0..trees {
        let start = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let heading = rng.random_range(0.0..TAU);
        let width = rng.random_range(2.5f32..4.0);
        canvas.tree(rng, start, heading, width, 2);
    }

    // low-frequency tint: a few random plane waves per channel
    let base = [rng.random_range(0.15..0.3), rng.random_range(0.06..0.15), rng.random_range(0.02..0.08)];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let a = rng.random_range(0.0..TAU);
            let f = rng.random_range(0.5..2.0) * TAU / s;
            (f * a.cos(), f * a.sin(), rng.random_range(0.0..TAU), rng.random_range(0.02..0.06))
        })
        .collect();
    let vessel = [rng.random_range(0.6..0.8), rng.random_range(0.45..0.65), rng.random_range(0.2..0.4)];

    let mut image = Tensor::zeros([1, 3, size, size]);
    let mut mask = Tensor::zeros([1, 1, size, size]);
    for y in 0..size {
        for x in 0..size {
            let e = canvas.excess[y * size + x];
            let cover = (0.5 - e).clamp(0.0, 1.0);
            let tint: f32 = waves.iter().map(|&(fy, fx, ph, amp)| amp * (fy * y as f32 + fx * x as f32 + ph).sin()).sum();
            for c in 0..3 {
                let bg = (base[c] + tint).clamp(0.0, 1.0);
                image.set(0, c, y, x, bg + cover * (vessel[c] - bg));
            }
            mask.set(0, 0, y, x, if e <= 0.0 { 1.0 } else { 0.0 });
        }
    }
    (image, mask)
}

/// Dark fundus-like backgrounds with bright anti-aliased Bézier vessel trees (widths 1–4 px);
/// the mask is the exact stroke stencil. Deterministic in `seed`.
pub fn synth_vessels(seed: u64, size: usize, count: usize) -> Result<Vec<Sample>> {
    check_size(size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (image, mask) = loop {
            let (image, mask) = one_image(&mut rng, size);
            let fg = mask.data().iter().filter(|&&m| m == 1.0).count() as f64 / (size * size) as f64;
            if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&fg) {
                break (image, mask);
            }
        };
        out.push(Sample::new(format!("synth_{i:03}"), DatasetKind::Synth, image, mask)?);
    }
    Ok(out)
}
