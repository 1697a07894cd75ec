//! Dense NCHW tensors and the primitive differentiable kernels built on them.

pub(crate) mod activation;
pub(crate) mod conv;
mod norm;
mod sample;

pub use activation::{activate, activate_backward, Activation};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvWeights};
pub use norm::{BatchNorm, NormMode};
pub use sample::{bilinear_sample, bilinear_upsample, bilinear_upsample_backward, BilinearTap};

use crate::error::{Error, Result};
use crate::real::Real;

/// 4-D array laid out as (batch, channels, height, width), row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, c, h, w] = self.shape;
        write!(f, "Tensor({n}x{c}x{h}x{w})")
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape("from_vec", shape, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of scalars in one (H, W) plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The contiguous (C, H, W) block of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape[1] * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// The (H, W) plane of channel `c` of item `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", self.shape, other.shape));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Copies channels `start..end` into a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start > end || end > c {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{end} out of bounds for {c} channels"
            )));
        }
        let p = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * p);
        for b in 0..n {
            data.extend_from_slice(&self.data[(b * c + start) * p..(b * c + end) * p]);
        }
        Ok(Tensor {
            shape: [n, end - start, h, w],
            data,
        })
    }

    /// Writes `src` into channels `start..start + src.channels()`.
    pub fn write_channels(&mut self, start: usize, src: &Tensor<T>) -> Result<()> {
        let [n, c, h, w] = self.shape;
        let [sn, sc, sh, sw] = src.shape;
        if sn != n || sh != h || sw != w || start + sc > c {
            return Err(Error::shape("write_channels", self.shape, src.shape));
        }
        let p = h * w;
        for b in 0..n {
            self.data[(b * c + start) * p..(b * c + start + sc) * p]
                .copy_from_slice(&src.data[b * sc * p..(b + 1) * sc * p]);
        }
        Ok(())
    }

    /// Keeps batch items `items` (in order) as a new tensor.
    pub fn select_items(&self, items: &[usize]) -> Self {
        let [_, c, h, w] = self.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for &i in items {
            data.extend_from_slice(self.item(i));
        }
        Tensor {
            shape: [items.len(), c, h, w],
            data,
        }
    }

    /// Stacks tensors with equal (C, H, W) along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", first.shape, p.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }
}

/// Concatenates along channels, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape("concat_channels", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
    out.write_channels(0, a)?;
    out.write_channels(ca, b)?;
    Ok(out)
}

/// Backward of [`concat_channels`]: splits the upstream gradient at channel `ca`.
pub fn concat_channels_backward<T: Real>(grad: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((grad.slice_channels(0, ca)?, grad.slice_channels(ca, grad.channels())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn concat_with_empty_channel_tensor_is_identity() {
        let x = Tensor::<f32>::from_fn([2, 3, 4, 5], |n, c, y, x| (n * 100 + c * 20 + y * 5 + x) as f32);
        let empty = Tensor::zeros([2, 0, 4, 5]);
        assert_eq!(concat_channels(&x, &empty).unwrap(), x);
        assert_eq!(concat_channels(&empty, &x).unwrap(), x);
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let a = Tensor::<f32>::from_fn([1, 16, 3, 3], |_, c, y, x| (c * 9 + y * 3 + x) as f32);
        let b = Tensor::<f32>::from_fn([1, 24, 3, 3], |_, c, y, x| -((c * 9 + y * 3 + x) as f32));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [1, 40, 3, 3]);
        let (ra, rb) = concat_channels_backward(&cat, 16).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 2, 4, 5]);
        let err = concat_channels(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 2, 4, 5]"), "{err}");
    }
}
