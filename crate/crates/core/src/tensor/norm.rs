use crate::error::{Error, Result};
use crate::real::Real;

use super::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Infer,
}

/// Per-channel batch normalization with affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    /// When set, train mode still normalizes with batch statistics but leaves running stats alone.
    pub freeze_stats: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: NormMode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            freeze_stats: false,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(Error::shape("batchnorm", x.shape(), [self.channels()]));
        }
        let p = h * w;
        let eps = T::of(BN_EPS);
        let (mean, inv_std) = match mode {
            NormMode::Train => {
                let m = (n * p) as f64;
                let mut mean = vec![T::zero(); c];
                let mut inv_std = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x.channel(b, ch).iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += x.channel(b, ch).iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>();
                    }
                    let var = ss / m;
                    mean[ch] = T::of(mu);
                    inv_std[ch] = T::one() / (T::of(var) + eps).sqrt();
                    if !self.freeze_stats {
                        let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
                        let mom = T::of(BN_MOMENTUM);
                        self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * T::of(mu);
                        self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * T::of(unbiased);
                    }
                }
                (mean, inv_std)
            }
            NormMode::Infer => (
                self.running_mean.clone(),
                self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            ),
        };

        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * p;
                let (mu, is, g, be) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                let src = &x.data()[start..start + p];
                let xh = &mut xhat.data_mut()[start..start + p];
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mu) * is;
                }
                let o = &mut out.data_mut()[start..start + p];
                for (d, &v) in o.iter_mut().zip(&xhat.data()[start..start + p]) {
                    *d = g * v + be;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, mode });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("batchnorm backward without forward".into()))?;
        if grad.shape() != cache.xhat.shape() {
            return Err(Error::shape("batchnorm_backward", grad.shape(), cache.xhat.shape()));
        }
        let [n, c, h, w] = grad.shape();
        let p = h * w;
        let m = T::of((n * p) as f64);
        let mut gx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..n {
                let start = (b * c + ch) * p;
                for (&g, &xh) in grad.data()[start..start + p].iter().zip(&cache.xhat.data()[start..start + p]) {
                    sum_g += g;
                    sum_gx += g * xh;
                }
            }
            self.grad_beta[ch] += sum_g;
            self.grad_gamma[ch] += sum_gx;
            let scale = self.gamma[ch] * cache.inv_std[ch];
            for b in 0..n {
                let start = (b * c + ch) * p;
                let src = &grad.data()[start..start + p];
                let xh = &cache.xhat.data()[start..start + p];
                let dst = &mut gx.data_mut()[start..start + p];
                match cache.mode {
                    NormMode::Infer => {
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d = g * scale;
                        }
                    }
                    NormMode::Train => {
                        for ((d, &g), &xv) in dst.iter_mut().zip(src).zip(xh) {
                            *d = scale * (g - sum_g / m - xv * sum_gx / m);
                        }
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        BatchNorm {
            gamma: cv(&self.gamma),
            beta: cv(&self.beta),
            running_mean: cv(&self.running_mean),
            running_var: cv(&self.running_var),
            grad_gamma: cv(&self.grad_gamma),
            grad_beta: cv(&self.grad_beta),
            freeze_stats: self.freeze_stats,
            cache: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut bn = BatchNorm::<f32>::new(2);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![1.5, -2.0];
        let x = Tensor::from_fn([2, 2, 3, 3], |n, c, y, x| (n + c * 2 + y * x) as f32);
        for mode in [NormMode::Train, NormMode::Infer] {
            let y = bn.forward(&x, mode).unwrap();
            for b in 0..2 {
                assert!(y.channel(b, 0).iter().all(|&v| v == 1.5));
                assert!(y.channel(b, 1).iter().all(|&v| v == -2.0));
            }
        }
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        // Per channel: values ±1 in equal numbers → mean 0, biased variance 1.
        let x = Tensor::<f32>::from_fn([2, 3, 2, 2], |n, c, y, x| if (n + c + y + x) % 2 == 0 { 1.0 } else { -1.0 });
        let mut bn = BatchNorm::new(3);
        let y = bn.forward(&x, NormMode::Train).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_images_hand_statistics() {
        // Item 0 is all 2.0, item 1 all 6.0 on one channel: mean 4, biased var 4.
        let x = Tensor::<f64>::from_fn([2, 1, 2, 2], |n, _, _, _| if n == 0 { 2.0 } else { 6.0 });
        let mut bn = BatchNorm::new(1);
        let y = bn.forward(&x, NormMode::Train).unwrap();
        let expect = 2.0 / (4.0 + BN_EPS).sqrt();
        assert!((y.at(0, 0, 0, 0) + expect).abs() < 1e-12);
        assert!((y.at(1, 0, 1, 1) - expect).abs() < 1e-12);
        // Running stats: momentum 0.1 towards mean 4 and unbiased variance 32/7.
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 32.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn infer_mode_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean = vec![1.0];
        bn.running_var = vec![4.0 - BN_EPS];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 5.0]).unwrap();
        let y = bn.forward(&x, NormMode::Infer).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_stats_are_untouched() {
        let mut bn = BatchNorm::<f32>::new(1);
        bn.freeze_stats = true;
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 6.0]).unwrap();
        bn.forward(&x, NormMode::Train).unwrap();
        assert_eq!(bn.running_mean, vec![0.0]);
        assert_eq!(bn.running_var, vec![1.0]);
    }
}
