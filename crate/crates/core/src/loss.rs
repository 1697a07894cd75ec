//! Combined cross-entropy + soft-overlap loss and its multi-stage sum.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Default weight of the cross-entropy term.
pub const LOSS_WEIGHT: f64 = 0.5;
/// Smoothing term of the per-pixel overlap ratio.
pub const OVERLAP_EPS: f64 = 1e-7;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logarithms.
pub const PROB_CLAMP: f64 = 1e-7;
/// Number of supervised decoder stages.
pub const MIXED_STAGES: usize = 4;

/// A scalar loss with its gradient w.r.t. the input probabilities.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: f64,
    pub bce: f64,
    pub overlap: f64,
    pub grad: Tensor<T>,
}

/// `w·BCE + (1−w)·(1 − mean(yŷ / (y + ŷ − yŷ + ε)))`, averaged over every pixel of the tensor.
pub fn combined_loss<T: Real>(yhat: &Tensor<T>, y: &Tensor<T>, w: f64) -> Result<LossOutput<T>> {
    if yhat.shape() != y.shape() {
        return Err(Error::shape("combined_loss", yhat.shape(), y.shape()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("loss weight must lie in [0, 1], got {w}")));
    }
    let n = yhat.len().max(1) as f64;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut bce = 0.0;
    let mut ratio = 0.0;
    let mut grad = Tensor::zeros(yhat.shape());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(yhat.data()).zip(y.data()) {
        let (p, t) = (p.f64(), t.f64());
        let pc = p.clamp(lo, hi);
        bce -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        let d_bce = if p > lo && p < hi { -t / pc + (1.0 - t) / (1.0 - pc) } else { 0.0 };
        let den = t + p - t * p + OVERLAP_EPS;
        ratio += t * p / den;
        let d_ratio = (t * den - t * p * (1.0 - t)) / (den * den);
        *g = T::of((w * d_bce - (1.0 - w) * d_ratio) / n);
    }
    let bce = bce / n;
    let overlap = 1.0 - ratio / n;
    Ok(LossOutput {
        value: w * bce + (1.0 - w) * overlap,
        bce,
        overlap,
        grad,
    })
}

/// Multi-stage loss with gradients for each stage.
#[derive(Clone, Debug)]
pub struct MixedLoss<T> {
    pub value: f64,
    /// Unscaled combined loss of each stage.
    pub stage_values: Vec<f64>,
    pub grads: Vec<Tensor<T>>,
}

/// `(1 + 1/n) · Σᵢ combined_loss(stageᵢ, gt, w)` over exactly [`MIXED_STAGES`] stages.
pub fn mixed_loss<T: Real>(stages: &[Tensor<T>], gt: &Tensor<T>, w: f64) -> Result<MixedLoss<T>> {
    if stages.len() != MIXED_STAGES {
        return Err(Error::InvalidArgument(format!(
            "mixed loss needs {MIXED_STAGES} stage outputs, got {}",
            stages.len()
        )));
    }
    let scale = 1.0 + 1.0 / MIXED_STAGES as f64;
    let mut value = 0.0;
    let mut stage_values = Vec::with_capacity(stages.len());
    let mut grads = Vec::with_capacity(stages.len());
    for s in stages {
        let mut l = combined_loss(s, gt, w)?;
        value += l.value;
        stage_values.push(l.value);
        l.grad.scale(T::of(scale));
        grads.push(l.grad);
    }
    Ok(MixedLoss {
        value: scale * value,
        stage_values,
        grads,
    })
}

/// Chains a probability gradient through the sigmoid: `g · p(1 − p)`.
pub fn prob_grad_to_logits<T: Real>(prob: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if prob.shape() != grad.shape() {
        return Err(Error::shape("sigmoid backward", prob.shape(), grad.shape()));
    }
    let mut out = grad.clone();
    out.data_mut()
        .iter_mut()
        .zip(prob.data())
        .for_each(|(g, &p)| *g *= p * (T::one() - p));
    Ok(out)
}
