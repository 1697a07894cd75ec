use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BilinearTap, Tensor};

use super::Sample;

/// Probabilities and magnitudes of the training-time augmentations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_jitter: f64,
    pub p_scale: f64,
    pub p_shift: f64,
    /// Brightness and contrast factors are drawn from `1 ± jitter`.
    pub jitter: f64,
    /// Zoom factor drawn from `1 ± scale`.
    pub scale: f64,
    /// Translation drawn from `±shift` of each dimension.
    pub shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_jitter: 0.5,
            p_scale: 0.5,
            p_shift: 0.5,
            jitter: 0.2,
            scale: 0.1,
            shift: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_jitter: 0.0,
            p_scale: 0.0,
            p_shift: 0.0,
            ..Self::default()
        }
    }
}

fn flip(t: &mut Tensor<f32>, horizontal: bool) {
    let [n, c, h, w] = t.shape();
    let data = t.data_mut();
    for plane in data.chunks_mut(h * w).take(n * c) {
        if horizontal {
            plane.chunks_mut(w).for_each(<[f32]>::reverse);
        } else {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Resamples every plane at `src(y, x) = ((y, x) - centre) / zoom + centre - (dy, dx)`, zero outside.
fn warp(t: &Tensor<f32>, zoom: f32, dy: f32, dx: f32, nearest: bool) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = Tensor::zeros(t.shape());
    for item in 0..n {
        for ch in 0..c {
            let src = t.channel(item, ch);
            for y in 0..h {
                let sy = (y as f32 - cy) / zoom + cy - dy;
                for x in 0..w {
                    let sx = (x as f32 - cx) / zoom + cx - dx;
                    let v = if nearest {
                        let (ry, rx) = (sy.round(), sx.round());
                        if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                            src[ry as usize * w + rx as usize]
                        } else {
                            0.0
                        }
                    } else {
                        BilinearTap::new(sy, sx, h, w).interpolate(src, w)
                    };
                    out.set(item, ch, y, x, v);
                }
            }
        }
    }
    out
}

/// Flips, colour jitter, zoom and translation, each applied with its own probability. Every
/// random number is drawn regardless of which transforms fire, so the stream is fixed by `seed`.
pub fn augment(sample: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fire = |p: f64| rng.random::<f64>() < p;
    let (hflip, vflip, jitter, scale, shift) = (
        fire(cfg.p_hflip),
        fire(cfg.p_vflip),
        fire(cfg.p_jitter),
        fire(cfg.p_scale),
        fire(cfg.p_shift),
    );
    let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let brightness = 1.0 + draw(cfg.jitter);
    let contrast = 1.0 + draw(cfg.jitter);
    let zoom = 1.0 + draw(cfg.scale);
    let dy = draw(cfg.shift) * sample.height() as f64;
    let dx = draw(cfg.shift) * sample.width() as f64;

    let mut out = sample.clone();
    if hflip {
        flip(&mut out.image, true);
        flip(&mut out.mask, true);
    }
    if vflip {
        flip(&mut out.image, false);
        flip(&mut out.mask, false);
    }
    if jitter {
        let mean = out.image.data().iter().map(|&v| v as f64).sum::<f64>() / out.image.len().max(1) as f64;
        let (b, c, m) = (brightness as f32, contrast as f32, mean as f32);
        out.image = out.image.map(|v| (((v - m) * c + m) * b).clamp(0.0, 1.0));
    }
    if scale || shift {
        let z = if scale { zoom as f32 } else { 1.0 };
        let (ty, tx) = if shift { (dy as f32, dx as f32) } else { (0.0, 0.0) };
        out.image = warp(&out.image, z, ty, tx, false);
        out.mask = warp(&out.mask, z, ty, tx, true).map(|m| if m >= 0.5 { 1.0 } else { 0.0 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;

    fn sample() -> Sample {
        let image = Tensor::from_fn([1, 3, 16, 32], |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 17.0);
        let mask = Tensor::from_fn([1, 1, 16, 32], |_, _, y, x| ((x + 2 * y) % 5 == 0) as u8 as f32);
        Sample::new("s", DatasetKind::Synth, image, mask).unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = sample();
        assert_eq!(augment(&s, 3, &AugmentConfig::none()), s);
    }

    #[test]
    fn double_flip_restores() {
        let s = sample();
        for horizontal in [true, false] {
            let mut t = s.image.clone();
            flip(&mut t, horizontal);
            assert_ne!(t, s.image);
            flip(&mut t, horizontal);
            assert_eq!(t, s.image);
        }
    }

    #[test]
    fn vertical_flip_moves_rows() {
        let mut t = Tensor::from_fn([1, 1, 3, 2], |_, _, y, x| (y * 2 + x) as f32);
        flip(&mut t, false);
        assert_eq!(t.data(), &[4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn seeded_and_shape_preserving() {
        let s = sample();
        let cfg = AugmentConfig {
            p_hflip: 1.0,
            p_vflip: 1.0,
            p_jitter: 1.0,
            p_scale: 1.0,
            p_shift: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment(&s, 42, &cfg);
        assert_eq!(a, augment(&s, 42, &cfg));
        assert_ne!(a, augment(&s, 43, &cfg));
        assert_eq!(a.image.shape(), s.image.shape());
        assert!(a.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unit_warp_is_identity() {
        let s = sample();
        assert_eq!(warp(&s.image, 1.0, 0.0, 0.0, false), s.image);
        assert_eq!(warp(&s.mask, 1.0, 0.0, 0.0, true), s.mask);
    }
}
