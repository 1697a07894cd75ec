use crate::error::{Error, Result};
use crate::par;
use crate::real::Real;

use super::Tensor;

/// Kernel (out_ch, in_ch / groups, k, k), optional bias, and the geometry of a 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> ConvWeights<T> {
    /// Zero-initialized square kernel.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups {groups} must divide in_ch {in_ch} and out_ch {out_ch}"
            )));
        }
        if stride == 0 || kernel_size == 0 {
            return Err(Error::InvalidArgument("stride and kernel size must be positive".into()));
        }
        Ok(ConvWeights {
            kernel: Tensor::zeros([out_ch, in_ch / groups, kernel_size, kernel_size]),
            bias: bias.then(|| vec![T::zero(); out_ch]),
            stride,
            padding,
            groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.channels() * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.height()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel_size();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn cast<U: Real>(&self) -> ConvWeights<U> {
        ConvWeights {
            kernel: self.kernel.cast(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|v| U::of(v.f64())).collect()),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.kernel.channels() == 1 && self.out_channels() == self.groups
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        if x.channels() != self.in_channels() {
            return Err(Error::shape("conv2d", x.shape(), self.kernel.shape()));
        }
        if self.kernel.height() != self.kernel.width() {
            return Err(Error::InvalidArgument("only square kernels are supported".into()));
        }
        self.output_hw(x.height(), x.width()).ok_or_else(|| {
            Error::shape("conv2d (input smaller than kernel)", x.shape(), self.kernel.shape())
        })
    }
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    let (oh, ow) = w.check_input(x)?;
    let [n, _, h, wd] = x.shape();
    let oc = w.out_channels();
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    let geo = Geometry::new(w, h, wd, oh, ow);

    if w.is_depthwise() {
        let k = &w.kernel;
        let p = oh * ow;
        par::chunks_mut(out.data_mut(), p, |idx, plane| {
            let (b, c) = (idx / oc, idx % oc);
            depthwise_plane(x.channel(b, c), k.channel(c, 0), &geo, plane);
        });
    } else {
        let cig = w.kernel.channels();
        let ocg = oc / w.groups;
        let ckk = cig * geo.k * geo.k;
        let p = oh * ow;
        let kernel = w.kernel.data();
        let mut cols = vec![T::zero(); ckk * p];
        for b in 0..n {
            let out_item = out.item_mut(b);
            for g in 0..w.groups {
                let src = &x.item(b)[g * cig * h * wd..(g + 1) * cig * h * wd];
                let col: &[T] = if geo.is_pointwise() {
                    src
                } else {
                    im2col(src, cig, &geo, &mut cols);
                    &cols
                };
                gemm_rows(
                    ocg,
                    ckk,
                    p,
                    &kernel[g * ocg * ckk..(g + 1) * ocg * ckk],
                    col,
                    &mut out_item[g * ocg * p..(g + 1) * ocg * p],
                );
            }
        }
    }

    if let Some(bias) = &w.bias {
        let p = oh * ow;
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = bias[i % oc];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, kernel and bias.
pub fn conv2d_backward<T: Real>(x: &Tensor<T>, w: &ConvWeights<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (oh, ow) = w.check_input(x)?;
    let [n, ci, h, wd] = x.shape();
    let oc = w.out_channels();
    if grad_out.shape() != [n, oc, oh, ow] {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), [n, oc, oh, ow]));
    }
    let geo = Geometry::new(w, h, wd, oh, ow);
    let p = oh * ow;
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_k = Tensor::zeros(w.kernel.shape());

    if w.is_depthwise() {
        let kk = geo.k * geo.k;
        // One task per channel: (grad_x planes for every item, kernel grad).
        let per_channel = par::map(ci, |c| {
            let mut gx = vec![T::zero(); n * h * wd];
            let mut gk = vec![T::zero(); kk];
            for b in 0..n {
                depthwise_plane_backward(
                    x.channel(b, c),
                    w.kernel.channel(c, 0),
                    grad_out.channel(b, c),
                    &geo,
                    &mut gx[b * h * wd..(b + 1) * h * wd],
                    &mut gk,
                );
            }
            (gx, gk)
        });
        for (c, (gx, gk)) in per_channel.into_iter().enumerate() {
            for b in 0..n {
                let start = (b * ci + c) * h * wd;
                grad_x.data_mut()[start..start + h * wd].copy_from_slice(&gx[b * h * wd..(b + 1) * h * wd]);
            }
            grad_k.data_mut()[c * kk..(c + 1) * kk].copy_from_slice(&gk);
        }
    } else {
        let cig = w.kernel.channels();
        let ocg = oc / w.groups;
        let ckk = cig * geo.k * geo.k;
        let kernel = w.kernel.data();
        let mut cols = vec![T::zero(); ckk * p];
        let mut grad_cols = vec![T::zero(); ckk * p];
        for b in 0..n {
            let g_item = grad_out.item(b);
            for g in 0..w.groups {
                let src = &x.item(b)[g * cig * h * wd..(g + 1) * cig * h * wd];
                let g_out = &g_item[g * ocg * p..(g + 1) * ocg * p];
                let col: &[T] = if geo.is_pointwise() {
                    src
                } else {
                    im2col(src, cig, &geo, &mut cols);
                    &cols
                };
                // dK[ocg × ckk] += dY[ocg × p] · colsᵀ
                gemm_rows_ex(
                    ocg,
                    p,
                    ckk,
                    g_out,
                    (p as isize, 1),
                    col,
                    (1, p as isize),
                    T::one(),
                    &mut grad_k.data_mut()[g * ocg * ckk..(g + 1) * ocg * ckk],
                );
                let gx = &mut grad_x.item_mut(b)[g * cig * h * wd..(g + 1) * cig * h * wd];
                let kg = &kernel[g * ocg * ckk..(g + 1) * ocg * ckk];
                if geo.is_pointwise() {
                    // dX[ckk × p] = Kᵀ · dY
                    gemm_rows_ex(ckk, ocg, p, kg, (1, ckk as isize), g_out, (p as isize, 1), T::zero(), gx);
                } else {
                    gemm_rows_ex(
                        ckk,
                        ocg,
                        p,
                        kg,
                        (1, ckk as isize),
                        g_out,
                        (p as isize, 1),
                        T::zero(),
                        &mut grad_cols,
                    );
                    col2im(&grad_cols, cig, &geo, gx);
                }
            }
        }
    }

    let grad_b = w.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); oc];
        for (i, plane) in grad_out.data().chunks(p).enumerate() {
            gb[i % oc] += plane.iter().copied().sum::<T>();
        }
        gb
    });
    Ok(ConvGrads {
        input: grad_x,
        kernel: grad_k,
        bias: grad_b,
    })
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Real>(cw: &ConvWeights<T>, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Geometry {
            h,
            w,
            oh,
            ow,
            k: cw.kernel_size(),
            stride: cw.stride,
            pad: cw.padding,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kj` (input column in bounds).
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, self.pad, kj)
    }

    #[inline]
    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, self.pad, ki)
    }
}

/// Output indices `o` for which `o·stride + tap − pad` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if len + pad > tap {
        ((len + pad - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(src: &[T], channels: usize, geo: &Geometry, cols: &mut [T]) {
    let Geometry { h, w, oh, ow, k, stride, pad } = *geo;
    let p = oh * ow;
    par::chunks_mut(&mut cols[..channels * k * k * p], p, |row, dst| {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let plane = &src[c * h * w..(c + 1) * h * w];
        let (c0, c1) = geo.valid_cols(kj);
        let (r0, r1) = geo.valid_rows(ki);
        dst.iter_mut().for_each(|v| *v = T::zero());
        for oy in r0..r1 {
            let iy = oy * stride + ki - pad;
            let line = &plane[iy * w..(iy + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            if c0 == c1 {
                continue;
            }
            if stride == 1 {
                let ix0 = c0 + kj - pad;
                drow[c0..c1].copy_from_slice(&line[ix0..ix0 + (c1 - c0)]);
            } else {
                for ox in c0..c1 {
                    drow[ox] = line[ox * stride + kj - pad];
                }
            }
        }
    });
}

fn col2im<T: Real>(cols: &[T], channels: usize, geo: &Geometry, dst: &mut [T]) {
    let Geometry { h, w, oh, ow, k, stride, pad } = *geo;
    let p = oh * ow;
    par::chunks_mut(&mut dst[..channels * h * w], h * w, |c, plane| {
        plane.iter_mut().for_each(|v| *v = T::zero());
        for ki in 0..k {
            let (r0, r1) = geo.valid_rows(ki);
            for kj in 0..k {
                let (c0, c1) = geo.valid_cols(kj);
                let src = &cols[((c * k + ki) * k + kj) * p..((c * k + ki) * k + kj + 1) * p];
                for oy in r0..r1 {
                    let iy = oy * stride + ki - pad;
                    let line = &mut plane[iy * w..(iy + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in c0..c1 {
                        line[ox * stride + kj - pad] += srow[ox];
                    }
                }
            }
        }
    });
}

fn depthwise_plane<T: Real>(src: &[T], kernel: &[T], geo: &Geometry, out: &mut [T]) {
    let Geometry { w, ow, k, stride, pad, .. } = *geo;
    for ki in 0..k {
        let (r0, r1) = geo.valid_rows(ki);
        for kj in 0..k {
            let kv = kernel[ki * k + kj];
            let (c0, c1) = geo.valid_cols(kj);
            for oy in r0..r1 {
                let iy = oy * stride + ki - pad;
                let line = &src[iy * w..(iy + 1) * w];
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                if stride == 1 {
                    let off = kj as isize - pad as isize;
                    for ox in c0..c1 {
                        orow[ox] += kv * line[(ox as isize + off) as usize];
                    }
                } else {
                    for ox in c0..c1 {
                        orow[ox] += kv * line[ox * stride + kj - pad];
                    }
                }
            }
        }
    }
}

fn depthwise_plane_backward<T: Real>(
    src: &[T],
    kernel: &[T],
    grad: &[T],
    geo: &Geometry,
    grad_src: &mut [T],
    grad_kernel: &mut [T],
) {
    let Geometry { w, ow, k, stride, pad, .. } = *geo;
    for ki in 0..k {
        let (r0, r1) = geo.valid_rows(ki);
        for kj in 0..k {
            let kv = kernel[ki * k + kj];
            let (c0, c1) = geo.valid_cols(kj);
            let mut acc = T::zero();
            for oy in r0..r1 {
                let iy = oy * stride + ki - pad;
                let grow = &grad[oy * ow..(oy + 1) * ow];
                for ox in c0..c1 {
                    let ix = iy * w + ox * stride + kj - pad;
                    acc += grow[ox] * src[ix];
                    grad_src[ix] += grow[ox] * kv;
                }
            }
            grad_kernel[ki * k + kj] += acc;
        }
    }
}

/// `c = a · b` for row-major `a[m×k]`, `b[k×n]`.
pub(crate) fn gemm_rows<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_rows_ex(m, k, n, a, (k as isize, 1), b, (n as isize, 1), T::zero(), c)
}

/// `c[m×n] = a · b + beta · c` with explicit (row, col) strides for `a` and `b`; rows of `c` are
/// split across workers in the parallel path. Each output scalar is reduced in the same order
/// regardless of the split.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rows_ex<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let rows_per_task = if par::is_parallel() { m.div_ceil(16).max(4) } else { m };
    par::chunks_mut(&mut c[..m * n], rows_per_task * n, |t, chunk| {
        let r0 = t * rows_per_task;
        let rows = chunk.len() / n;
        let a_off = r0 * rsa as usize;
        T::gemm(rows, k, n, T::one(), &a[a_off..], rsa, csa, b, rsb, csb, beta, chunk, n as isize);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple loop, independent of im2col/gemm.
    fn naive_conv(x: &Tensor<f64>, w: &ConvWeights<f64>) -> Tensor<f64> {
        let [n, _, h, wd] = x.shape();
        let (oh, ow) = w.output_hw(h, wd).unwrap();
        let oc = w.out_channels();
        let cig = w.kernel.channels();
        let ocg = oc / w.groups;
        let k = w.kernel_size();
        Tensor::from_fn([n, oc, oh, ow], |b, o, oy, ox| {
            let g = o / ocg;
            let mut acc = w.bias.as_ref().map_or(0.0, |bias| bias[o]);
            for ci in 0..cig {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * w.stride + ki) as isize - w.padding as isize;
                        let ix = (ox * w.stride + kj) as isize - w.padding as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        acc += w.kernel.at(o, ci, ki, kj) * x.at(b, g * cig + ci, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // Multiples of 1/64 so products and sums of a few hundred terms are exact in f64.
            ((s >> 40) % 129) as f64 / 64.0 - 1.0
        }
    }

    fn random_case(seed: u64, shape: [usize; 4], oc: usize, k: usize, s: usize, p: usize, g: usize) -> (Tensor<f64>, ConvWeights<f64>) {
        let mut r = lcg(seed);
        let x = Tensor::from_fn(shape, |_, _, _, _| r());
        let mut w = ConvWeights::new(shape[1], oc, k, s, p, g, true).unwrap();
        w.kernel.data_mut().iter_mut().for_each(|v| *v = r());
        w.bias.as_mut().unwrap().iter_mut().for_each(|v| *v = r());
        (x, w)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f32>::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f32);
        let mut w = ConvWeights::new(1, 1, 1, 1, 0, 1, false).unwrap();
        w.kernel.data_mut()[0] = 1.0;
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let mut w = ConvWeights::new(1, 1, 3, 1, 1, 1, false).unwrap();
        w.kernel.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let y = conv2d(&x, &w).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn depthwise_unit_kernels_are_identity() {
        let x = Tensor::<f32>::from_fn([2, 4, 5, 5], |n, c, y, x| (n * 7 + c * 3 + y * 5 + x) as f32 * 0.1);
        let mut w = ConvWeights::new(4, 4, 1, 1, 0, 4, false).unwrap();
        w.kernel.data_mut().iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let w = ConvWeights::<f32>::new(2, 4, 3, 1, 1, 1, false).unwrap();
        let msg = conv2d(&x, &w).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn output_geometry() {
        let w = ConvWeights::<f32>::new(3, 16, 3, 2, 1, 1, true).unwrap();
        assert_eq!(w.output_hw(512, 512), Some((256, 256)));
        assert_eq!(w.param_count(), 448);
        let w5 = ConvWeights::<f32>::new(1, 1, 5, 1, 0, 1, false).unwrap();
        assert_eq!(w5.output_hw(4, 4), None);
    }

    #[test]
    fn matches_naive_loop_exactly() {
        let cases = [
            ([2, 4, 8, 8], 3, 3, 1, 1, 1),
            ([1, 2, 7, 6], 5, 3, 2, 1, 1),
            ([2, 3, 8, 8], 2, 1, 1, 0, 1),
            ([1, 4, 8, 8], 4, 5, 2, 2, 4),
            ([2, 4, 6, 6], 6, 3, 1, 1, 2),
            ([1, 3, 5, 5], 3, 7, 1, 3, 3),
            ([1, 2, 6, 1], 2, 5, 1, 2, 1),
            ([1, 1, 1, 4], 1, 5, 1, 2, 1),
        ];
        for (seed, &(shape, oc, k, s, p, g)) in cases.iter().enumerate() {
            let (x, w) = random_case(seed as u64, shape, oc, k, s, p, g);
            let got = conv2d(&x, &w).unwrap();
            assert_eq!(got, naive_conv(&x, &w), "case {seed}");
        }
    }

    #[test]
    fn valid_range_covers_exactly_in_bounds_outputs() {
        for len in 1usize..9 {
            for k in [1, 3, 5] {
                for stride in 1..3 {
                    for pad in 0..=k / 2 {
                        let out_len = (len + 2 * pad).saturating_sub(k) / stride + 1;
                        for tap in 0..k {
                            let (lo, hi) = valid_range(out_len, len, stride, pad, tap);
                            for o in 0..out_len {
                                let i = (o * stride + tap) as isize - pad as isize;
                                let inside = i >= 0 && i < len as isize;
                                assert_eq!(inside, o >= lo && o < hi, "len {len} k {k} s {stride} p {pad} tap {tap} o {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <dY, conv(X)> is bilinear: its gradient w.r.t. X and K must satisfy
        // <dX, X> + <dK, K> = 2 <dY, conv(X) − b> when b is excluded.
        for (seed, (shape, oc, k, s, p, g)) in [([1, 4, 6, 6], 4, 3, 2, 1, 4), ([2, 2, 5, 5], 3, 3, 1, 1, 1)].into_iter().enumerate() {
            let (x, mut w) = random_case(seed as u64 + 10, shape, oc, k, s, p, g);
            w.bias = None;
            let y = conv2d(&x, &w).unwrap();
            let mut r = lcg(99);
            let gy = Tensor::from_fn(y.shape(), |_, _, _, _| r());
            let grads = conv2d_backward(&x, &w, &gy).unwrap();
            let lhs: f64 = grads.input.data().iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
                + grads.kernel.data().iter().zip(w.kernel.data()).map(|(a, b)| a * b).sum::<f64>();
            let rhs: f64 = 2.0 * gy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }
}
