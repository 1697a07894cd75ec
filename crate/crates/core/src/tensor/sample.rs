use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

use super::Tensor;

/// The four lattice neighbours of a fractional position and their bilinear weights.
///
/// Neighbours outside the `h × w` map are flagged invalid and read as zero.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub y0: isize,
    pub x0: isize,
    /// Fractional parts along rows and columns.
    pub ly: T,
    pub lx: T,
    /// Validity of (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1).
    pub valid: [bool; 4],
}

impl<T: Real> BilinearTap<T> {
    #[inline]
    pub fn new(row: T, col: T, h: usize, w: usize) -> Self {
        let fy = row.floor();
        let fx = col.floor();
        let y0 = fy.to_isize().unwrap_or(isize::MIN / 2);
        let x0 = fx.to_isize().unwrap_or(isize::MIN / 2);
        let iy = |y: isize| y >= 0 && y < h as isize;
        let ix = |x: isize| x >= 0 && x < w as isize;
        BilinearTap {
            y0,
            x0,
            ly: row - fy,
            lx: col - fx,
            valid: [
                iy(y0) && ix(x0),
                iy(y0) && ix(x0 + 1),
                iy(y0 + 1) && ix(x0),
                iy(y0 + 1) && ix(x0 + 1),
            ],
        }
    }

    #[inline]
    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// The four corner values of `plane` (zero where invalid).
    #[inline]
    pub fn corners(&self, plane: &[T], w: usize) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for (i, c) in v.iter_mut().enumerate() {
            if self.valid[i] {
                *c = plane[self.offset(i, w)];
            }
        }
        v
    }

    #[inline]
    pub fn offset(&self, corner: usize, w: usize) -> usize {
        let y = self.y0 + (corner / 2) as isize;
        let x = self.x0 + (corner % 2) as isize;
        y as usize * w + x as usize
    }

    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let (hy, hx) = (T::one() - self.ly, T::one() - self.lx);
        [hy * hx, hy * self.lx, self.ly * hx, self.ly * self.lx]
    }

    #[inline]
    pub fn interpolate(&self, plane: &[T], w: usize) -> T {
        let v = self.corners(plane, w);
        let wt = self.weights();
        wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3]
    }

    /// Partial derivatives of the interpolated value with respect to (row, col).
    #[inline]
    pub fn coord_grad(&self, plane: &[T], w: usize) -> (T, T) {
        let [v00, v01, v10, v11] = self.corners(plane, w);
        let (hy, hx) = (T::one() - self.ly, T::one() - self.lx);
        let d_row = hx * (v10 - v00) + self.lx * (v11 - v01);
        let d_col = hy * (v01 - v00) + self.ly * (v11 - v10);
        (d_row, d_col)
    }

    /// Adds `g` distributed by the bilinear weights into `grad_plane`.
    #[inline]
    pub fn scatter(&self, g: T, grad_plane: &mut [T], w: usize) {
        let wt = self.weights();
        for i in 0..4 {
            if self.valid[i] {
                grad_plane[self.offset(i, w)] += g * wt[i];
            }
        }
    }
}

/// Bilinear value of every channel of batch item `n` at fractional (row, col); positions off the
/// map contribute zero.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, n: usize, row: T, col: T) -> Vec<T> {
    let (h, w) = (map.height(), map.width());
    let tap = BilinearTap::new(row, col, h, w);
    (0..map.channels())
        .map(|c| tap.interpolate(map.channel(n, c), w))
        .collect()
}

/// Per output index along one axis: (low source index, high source index, high weight),
/// half-pixel-centre convention (align-corners = false).
fn axis_taps<T: Real>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

/// `a + (b − a)·t`, clamped to the closed interval spanned by `a` and `b` against rounding.
#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if out_h < h || out_w < w {
        return Err(Error::InvalidArgument(format!(
            "bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    if out_h == h && out_w == w {
        out.data_mut().copy_from_slice(x.data());
        return Ok(out);
    }
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    par::chunks_mut(out.data_mut(), out_h * out_w, |idx, plane| {
        let src = x.channel(idx / c, idx % c);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let row = &mut plane[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = lerp(r0[x0], r0[x1], lx);
                let bot = lerp(r1[x0], r1[x1], lx);
                row[ox] = lerp(top, bot, ly);
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`] for an input of spatial size `h × w`.
pub fn bilinear_upsample_backward<T: Real>(grad: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, out_h, out_w] = grad.shape();
    if out_h < h || out_w < w {
        return Err(Error::shape("bilinear_upsample_backward", grad.shape(), [n, c, h, w]));
    }
    let mut gx = Tensor::zeros([n, c, h, w]);
    if out_h == h && out_w == w {
        gx.data_mut().copy_from_slice(grad.data());
        return Ok(gx);
    }
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    par::chunks_mut(gx.data_mut(), h * w, |idx, plane| {
        let g = grad.channel(idx / c, idx % c);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let grow = &g[oy * out_w..(oy + 1) * out_w];
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = grow[ox];
                let hx = T::one() - lx;
                plane[y0 * w + x0] += v * hy * hx;
                plane[y0 * w + x1] += v * hy * lx;
                plane[y1 * w + x0] += v * ly * hx;
                plane[y1 * w + x1] += v * ly * lx;
            }
        }
    });
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn([1, 2, h, w], |_, c, y, x| (c * 100 + y * 7 + x * 3) as f64 + ((y * x) % 5) as f64 * 0.25)
    }

    #[test]
    fn lattice_points_are_exact() {
        let m = ramp(5, 6);
        assert_eq!(bilinear_sample(&m, 0, 2.0, 3.0), vec![m.at(0, 0, 2, 3), m.at(0, 1, 2, 3)]);
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(bilinear_sample(&m, 0, y as f64, x as f64)[1], m.at(0, 1, y, x));
            }
        }
    }

    #[test]
    fn two_by_two_midpoint() {
        let m = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0, 0.5, 0.5), vec![1.5]);
    }

    #[test]
    fn far_outside_is_zero() {
        let m = ramp(4, 4);
        assert_eq!(bilinear_sample(&m, 0, -5.0, -5.0), vec![0.0, 0.0]);
        assert_eq!(bilinear_sample(&m, 0, 10.0, 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_between_neighbours() {
        let m = ramp(5, 5);
        for (i, j) in [(0usize, 0usize), (1, 3), (3, 2)] {
            for t in [0.25, 0.5, 0.75] {
                let got = bilinear_sample(&m, 0, i as f64 + t, j as f64)[0];
                let want = (1.0 - t) * m.at(0, 0, i, j) + t * m.at(0, 0, i + 1, j);
                assert!((got - want).abs() < 1e-12);
                let got = bilinear_sample(&m, 0, i as f64, j as f64 + t)[1];
                let want = (1.0 - t) * m.at(0, 1, i, j) + t * m.at(0, 1, i, j + 1);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_outside_blends_with_zero() {
        let m = Tensor::<f64>::full([1, 1, 3, 3], 4.0);
        assert_eq!(bilinear_sample(&m, 0, -0.25, 1.0), vec![3.0]);
        assert_eq!(bilinear_sample(&m, 0, 2.5, 2.5), vec![1.0]);
    }

    #[test]
    fn upsample_constant_and_identity() {
        let x = Tensor::<f32>::full([2, 3, 4, 5], 7.0);
        let y = bilinear_upsample(&x, 8, 10).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let r = ramp(4, 5);
        assert_eq!(bilinear_upsample(&r, 4, 5).unwrap(), r);
    }

    #[test]
    fn upsample_half_pixel_centres() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_upsample(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_rejects_downscale() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert!(bilinear_upsample(&x, 2, 8).is_err());
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = ramp(3, 4);
        let y = bilinear_upsample(&x, 12, 8).unwrap();
        let g = Tensor::from_fn(y.shape(), |_, c, yy, xx| ((c + yy * 3 + xx * 5) % 7) as f64 - 3.0);
        let gx = bilinear_upsample_backward(&g, 3, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
