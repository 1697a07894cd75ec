use crate::real::Real;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    HSwish,
    Sigmoid,
    HSigmoid,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Relu, Activation::HSwish, Activation::Sigmoid, Activation::HSigmoid];

    #[inline]
    pub fn apply<T: Real>(self, t: T) -> T {
        match self {
            Activation::Relu => t.max(T::zero()),
            Activation::HSwish => t * h_sigmoid(t),
            Activation::Sigmoid => sigmoid(t),
            Activation::HSigmoid => h_sigmoid(t),
        }
    }

    /// Derivative at pre-activation `t`. Kinks take the right-hand value.
    #[inline]
    pub fn derivative<T: Real>(self, t: T) -> T {
        let three = T::of(3.0);
        match self {
            Activation::Relu => {
                if t > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::HSwish => {
                if t <= -three {
                    T::zero()
                } else if t >= three {
                    T::one()
                } else {
                    (T::of(2.0) * t + three) / T::of(6.0)
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(t);
                s * (T::one() - s)
            }
            Activation::HSigmoid => {
                if t <= -three || t >= three {
                    T::zero()
                } else {
                    T::one() / T::of(6.0)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::HSwish => "h_swish",
            Activation::Sigmoid => "sigmoid",
            Activation::HSigmoid => "h_sigmoid",
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn h_sigmoid<T: Real>(t: T) -> T {
    ((t + T::of(3.0)) / T::of(6.0)).max(T::zero()).min(T::one())
}

pub fn activate<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Gradient through the activation given its pre-activation input.
pub fn activate_backward<T: Real>(pre: &Tensor<T>, grad: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut out = grad.clone();
    out.data_mut()
        .iter_mut()
        .zip(pre.data())
        .for_each(|(g, &t)| *g *= kind.derivative(t));
    out
}
