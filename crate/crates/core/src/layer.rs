//! Stateful layers: parameters, gradient buffers and the activations cached for backward.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{activate, activate_backward, conv2d, conv2d_backward, Activation, BatchNorm, ConvWeights, Tensor};

pub use crate::tensor::NormMode as Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm γ/β.
    NormAffine,
    /// Batch-norm running mean/variance: serialized, never optimized or counted.
    RunningStat,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: &'a mut [T],
    /// Empty for running statistics.
    pub grad: &'a mut [T],
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Layer<T: Real> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Propagates `grad` (w.r.t. the last forward output), accumulating parameter gradients and
    /// returning the gradient w.r.t. the last forward input.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn clear_cache(&mut self);

    /// Visits every batch norm owned by the layer.
    fn visit_norms(&mut self, _f: &mut dyn FnMut(&mut BatchNorm<T>)) {}

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut("", &mut ps);
        for p in ps {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Scalar parameters excluding running statistics.
    fn param_count(&self) -> usize {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps.iter().filter(|p| p.kind.is_trainable()).map(|p| p.value.len()).sum()
    }
}

pub(crate) fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward called without a cached forward pass"))
}

/// He-normal fill: N(0, 2 / fan_in).
pub(crate) fn he_normal<T: Real, R: Rng>(values: &mut [T], fan_in: usize, rng: &mut R) {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    values.iter_mut().for_each(|v| *v = T::of(dist.sample(rng) as f32 as f64));
}

/// A convolution with cached input and gradient buffers.
#[derive(Clone, Debug)]
pub struct Conv<T = f32> {
    pub weights: ConvWeights<T>,
    pub grad_kernel: Tensor<T>,
    pub grad_bias: Option<Vec<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv<T> {
    pub fn new(weights: ConvWeights<T>) -> Self {
        Conv {
            grad_kernel: Tensor::zeros(weights.kernel.shape()),
            grad_bias: weights.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            weights,
            input: None,
        }
    }

    pub fn he_init<R: Rng>(&mut self, rng: &mut R) {
        let [_, cig, k, _] = self.weights.kernel.shape();
        he_normal(self.weights.kernel.data_mut(), cig * k * k, rng);
    }

    pub fn cast<U: Real>(&self) -> Conv<U> {
        Conv::new(self.weights.cast())
    }
}

impl<T: Real> Layer<T> for Conv<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.weights)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv"))?;
        let g = conv2d_backward(x, &self.weights, grad)?;
        self.grad_kernel.add_assign(&g.kernel)?;
        if let (Some(acc), Some(gb)) = (self.grad_bias.as_mut(), g.bias) {
            acc.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }
        Ok(g.input)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push(ParamRef {
            name: join(prefix, "weight"),
            shape: self.weights.kernel.shape().to_vec(),
            kind: ParamKind::Weight,
            value: self.weights.kernel.data(),
        });
        if let Some(b) = &self.weights.bias {
            out.push(ParamRef {
                name: join(prefix, "bias"),
                shape: vec![b.len()],
                kind: ParamKind::Bias,
                value: b,
            });
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            shape: self.weights.kernel.shape().to_vec(),
            kind: ParamKind::Weight,
            value: self.weights.kernel.data_mut(),
            grad: self.grad_kernel.data_mut(),
        });
        if let (Some(b), Some(gb)) = (self.weights.bias.as_mut(), self.grad_bias.as_mut()) {
            out.push(ParamMut {
                name: join(prefix, "bias"),
                shape: vec![b.len()],
                kind: ParamKind::Bias,
                value: b,
                grad: gb,
            });
        }
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        BatchNorm::forward(self, x, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        BatchNorm::backward(self, grad)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let c = self.channels();
        for (name, kind, value) in [
            ("gamma", ParamKind::NormAffine, &self.gamma),
            ("beta", ParamKind::NormAffine, &self.beta),
            ("running_mean", ParamKind::RunningStat, &self.running_mean),
            ("running_var", ParamKind::RunningStat, &self.running_var),
        ] {
            out.push(ParamRef {
                name: join(prefix, name),
                shape: vec![c],
                kind,
                value,
            });
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let c = self.channels();
        out.push(ParamMut {
            name: join(prefix, "gamma"),
            shape: vec![c],
            kind: ParamKind::NormAffine,
            value: &mut self.gamma,
            grad: &mut self.grad_gamma,
        });
        out.push(ParamMut {
            name: join(prefix, "beta"),
            shape: vec![c],
            kind: ParamKind::NormAffine,
            value: &mut self.beta,
            grad: &mut self.grad_beta,
        });
        out.push(ParamMut {
            name: join(prefix, "running_mean"),
            shape: vec![c],
            kind: ParamKind::RunningStat,
            value: &mut self.running_mean,
            grad: &mut [],
        });
        out.push(ParamMut {
            name: join(prefix, "running_var"),
            shape: vec![c],
            kind: ParamKind::RunningStat,
            value: &mut self.running_var,
            grad: &mut [],
        });
    }

    fn clear_cache(&mut self) {
        BatchNorm::clear_cache(self);
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(self);
    }
}

/// Convolution → batch norm → optional activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct<T = f32> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    pub act: Option<Activation>,
    pre_act: Option<Tensor<T>>,
}

impl<T: Real> ConvBnAct<T> {
    pub fn new(weights: ConvWeights<T>, act: Option<Activation>) -> Self {
        let c = weights.out_channels();
        ConvBnAct {
            conv: Conv::new(weights),
            bn: BatchNorm::new(c),
            act,
            pre_act: None,
        }
    }

    pub fn cast<U: Real>(&self) -> ConvBnAct<U> {
        ConvBnAct {
            conv: self.conv.cast(),
            bn: self.bn.cast(),
            act: self.act,
            pre_act: None,
        }
    }
}

impl<T: Real> Layer<T> for ConvBnAct<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.bn.forward(&y, mode)?;
        match self.act {
            Some(act) => {
                let out = activate(&y, act);
                self.pre_act = Some(y);
                Ok(out)
            }
            None => Ok(y),
        }
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match self.act {
            Some(act) => {
                let pre = self.pre_act.as_ref().ok_or_else(|| missing_cache("conv_bn_act"))?;
                activate_backward(pre, grad, act)
            }
            None => grad.clone(),
        };
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
        self.pre_act = None;
    }

    fn visit_norms(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(&mut self.bn);
    }
}
