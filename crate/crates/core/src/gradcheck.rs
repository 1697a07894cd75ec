//! Finite-difference verification of every hand-written backward pass.
//!
//! Analytic gradients are computed in the precision under test; the numeric reference always
//! comes from an `f64` shadow instance holding identical values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dcn::{dcn_backward, dcn_forward, DcnLayer};
use crate::error::{Error, Result};
use crate::layer::{Conv, Layer, Mode};
use crate::loss::{combined_loss, mixed_loss, MIXED_STAGES};
use crate::mixconv::{MixConv, MnBlock, MnBlockSpec, SqueezeExcite};
use crate::network::{EncoderSpec, Model};
use crate::real::Real;
use crate::tensor::{
    activate, activate_backward, bilinear_upsample, bilinear_upsample_backward, Activation, BatchNorm, ConvWeights,
    Tensor,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

/// One-sided slope disagreement (relative) above which the stencil is assumed to straddle a kink.
pub const KINK_SKEW: f64 = 1e-4;
/// Relative agreement between the coarse and fine estimates that rules out a kink.
pub const KINK_AGREE: f64 = 1e-6;
/// Times the step is divided by ten when a kink is detected.
pub const KINK_REFINEMENTS: usize = 2;
/// Refinement never goes below this step; smaller steps are dominated by round-off.
pub const MIN_STEP: f64 = 1e-6;

/// A function of several real-valued slots with a hand-written vector-Jacobian product.
pub trait Differentiable<T: Real> {
    fn slot_names(&self) -> Vec<String>;
    fn slot_mut(&mut self, i: usize) -> &mut [T];
    fn forward(&mut self) -> Result<Vec<T>>;
    /// Gradients of `Σ upstream·output` for every slot, valid for the last forward call.
    fn backward(&mut self, upstream: &[T]) -> Result<Vec<Vec<T>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Largest relative error of each slot.
    pub per_parameter: Vec<(String, f64)>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic`'s gradients with central differences on `shadow`. `max_coords` limits the
/// number of coordinates probed per slot (`None` probes all of them).
pub fn grad_check<T: Real>(
    op_name: &str,
    analytic: &mut dyn Differentiable<T>,
    shadow: &mut dyn Differentiable<f64>,
    tol: f64,
    seed: u64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport> {
    grad_check_with_step(op_name, analytic, shadow, tol, seed, max_coords, FD_STEP)
}

/// [`grad_check`] with an explicit finite-difference step.
pub fn grad_check_with_step<T: Real>(
    op_name: &str,
    analytic: &mut dyn Differentiable<T>,
    shadow: &mut dyn Differentiable<f64>,
    tol: f64,
    seed: u64,
    max_coords: Option<usize>,
    step: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let y = analytic.forward()?;
    let upstream: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0f64..1.0) as f32 as f64).collect();
    let up_t: Vec<T> = upstream.iter().map(|&u| T::of(u)).collect();
    let grads = analytic.backward(&up_t)?;
    let names = analytic.slot_names();
    if grads.len() != names.len() {
        return Err(Error::InvalidArgument(format!("{op_name}: backward returned {} slots", grads.len())));
    }
    let objective = |d: &mut dyn Differentiable<f64>| -> Result<f64> {
        let out = d.forward()?;
        Ok(out.iter().zip(&upstream).map(|(a, b)| a * b).sum())
    };
    let base = objective(shadow)?;
    let mut per_parameter = Vec::with_capacity(names.len());
    for (s, (name, g)) in names.iter().zip(&grads).enumerate() {
        let len = shadow.slot_mut(s).len();
        if len != g.len() {
            return Err(Error::InvalidArgument(format!("{op_name}: slot {name} has {} grads for {len} values", g.len())));
        }
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < len => (0..m).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for i in coords {
            let numeric = central_difference(shadow, s, i, step, base, &objective)?;
            let a = g[i].f64();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        per_parameter.push((name.clone(), worst));
    }
    let max_rel_err = per_parameter.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err,
        per_parameter,
        tol,
        passed: max_rel_err < tol,
    })
}

/// Central difference at `step`. When the one-sided slopes disagree the estimate is compared
/// with one at a tenth of the step: agreement means plain curvature and the coarse value is kept,
/// disagreement means a kink (activation or sampling lattice) inside the stencil and the finer
/// step takes over.
fn central_difference(
    shadow: &mut dyn Differentiable<f64>,
    s: usize,
    i: usize,
    step: f64,
    base: f64,
    objective: &dyn Fn(&mut dyn Differentiable<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut probe = |h: f64| -> Result<(f64, f64)> {
        let orig = shadow.slot_mut(s)[i];
        shadow.slot_mut(s)[i] = orig + h;
        let plus = objective(shadow)?;
        shadow.slot_mut(s)[i] = orig - h;
        let minus = objective(shadow)?;
        shadow.slot_mut(s)[i] = orig;
        let central = (plus - minus) / (2.0 * h);
        let skew = ((plus - base) / h - (base - minus) / h).abs() / central.abs().max(REL_FLOOR);
        Ok((central, skew))
    };
    let mut h = step;
    let (mut central, mut skew) = probe(h)?;
    for _ in 0..KINK_REFINEMENTS {
        if skew <= KINK_SKEW || h / 10.0 < MIN_STEP * 0.999 {
            break;
        }
        let (fine, fine_skew) = probe(h / 10.0)?;
        if (fine - central).abs() / fine.abs().max(REL_FLOOR) <= KINK_AGREE {
            break;
        }
        h /= 10.0;
        central = fine;
        skew = fine_skew;
    }
    Ok(central)
}

/// Fills values from `rng`, rounded through f32 so every precision holds the same numbers.
fn fill<T: Real>(rng: &mut ChaCha8Rng, values: &mut [T], lo: f64, hi: f64) {
    values.iter_mut().for_each(|v| *v = T::of(rng.random_range(lo..hi) as f32 as f64));
}

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    fill(rng, t.data_mut(), lo, hi);
    t
}

/// Values away from the kinks of every activation (0, ±3).
fn kink_free<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let x = loop {
            let x = rng.random_range(-4.0f64..4.0) as f32 as f64;
            if [0.0, 3.0, -3.0].iter().all(|k| (x - k).abs() > 0.05) {
                break x;
            }
        };
        *v = T::of(x);
    }
    t
}

fn randomize_layer<T: Real, L: Layer<T>>(layer: &mut L, rng: &mut ChaCha8Rng, scale: f64) {
    let mut ps = Vec::new();
    layer.params_mut("", &mut ps);
    for p in ps {
        if p.kind.is_trainable() {
            fill(rng, p.value, -scale, scale);
        }
    }
}

/// Input plus every trainable parameter of a layer.
pub struct LayerCase<T: Real, L: Layer<T>> {
    pub layer: L,
    pub input: Tensor<T>,
    pub mode: Mode,
    out_shape: [usize; 4],
}

impl<T: Real, L: Layer<T>> LayerCase<T, L> {
    pub fn new(layer: L, input: Tensor<T>, mode: Mode) -> Self {
        LayerCase {
            layer,
            input,
            mode,
            out_shape: [0; 4],
        }
    }
}

impl<T: Real, L: Layer<T>> Differentiable<T> for LayerCase<T, L> {
    fn slot_names(&self) -> Vec<String> {
        let mut ps = Vec::new();
        self.layer.params("", &mut ps);
        std::iter::once("input".to_string())
            .chain(ps.into_iter().filter(|p| p.kind.is_trainable()).map(|p| p.name))
            .collect()
    }

    fn slot_mut(&mut self, i: usize) -> &mut [T] {
        if i == 0 {
            return self.input.data_mut();
        }
        let mut ps = Vec::new();
        self.layer.params_mut("", &mut ps);
        ps.into_iter().filter(|p| p.kind.is_trainable()).nth(i - 1).expect("slot index").value
    }

    fn forward(&mut self) -> Result<Vec<T>> {
        let y = self.layer.forward(&self.input, self.mode)?;
        self.out_shape = y.shape();
        Ok(y.into_vec())
    }

    fn backward(&mut self, upstream: &[T]) -> Result<Vec<Vec<T>>> {
        self.layer.zero_grad();
        let g = Tensor::from_vec(self.out_shape, upstream.to_vec())?;
        let gx = self.layer.backward(&g)?;
        let mut ps = Vec::new();
        self.layer.params_mut("", &mut ps);
        Ok(std::iter::once(gx.into_vec())
            .chain(ps.into_iter().filter(|p| p.kind.is_trainable()).map(|p| p.grad.to_vec()))
            .collect())
    }
}

/// Elementwise activation.
struct ActivationCase<T> {
    kind: Activation,
    x: Tensor<T>,
}

impl<T: Real> Differentiable<T> for ActivationCase<T> {
    fn slot_names(&self) -> Vec<String> {
        vec!["input".into()]
    }
    fn slot_mut(&mut self, _: usize) -> &mut [T] {
        self.x.data_mut()
    }
    fn forward(&mut self) -> Result<Vec<T>> {
        Ok(activate(&self.x, self.kind).into_vec())
    }
    fn backward(&mut self, up: &[T]) -> Result<Vec<Vec<T>>> {
        let g = Tensor::from_vec(self.x.shape(), up.to_vec())?;
        Ok(vec![activate_backward(&self.x, &g, self.kind).into_vec()])
    }
}

struct UpsampleCase<T> {
    x: Tensor<T>,
    out: (usize, usize),
}

impl<T: Real> Differentiable<T> for UpsampleCase<T> {
    fn slot_names(&self) -> Vec<String> {
        vec!["input".into()]
    }
    fn slot_mut(&mut self, _: usize) -> &mut [T] {
        self.x.data_mut()
    }
    fn forward(&mut self) -> Result<Vec<T>> {
        Ok(bilinear_upsample(&self.x, self.out.0, self.out.1)?.into_vec())
    }
    fn backward(&mut self, up: &[T]) -> Result<Vec<Vec<T>>> {
        let [n, c, h, w] = self.x.shape();
        let g = Tensor::from_vec([n, c, self.out.0, self.out.1], up.to_vec())?;
        Ok(vec![bilinear_upsample_backward(&g, h, w)?.into_vec()])
    }
}

/// The deformable sampling operator with explicit offsets and modulation.
struct DcnOpCase<T> {
    weights: ConvWeights<T>,
    x: Tensor<T>,
    offsets: Tensor<T>,
    modulation: Tensor<T>,
}

impl<T: Real> Differentiable<T> for DcnOpCase<T> {
    fn slot_names(&self) -> Vec<String> {
        ["input", "kernel", "bias", "offsets", "modulation"].map(String::from).to_vec()
    }
    fn slot_mut(&mut self, i: usize) -> &mut [T] {
        match i {
            0 => self.x.data_mut(),
            1 => self.weights.kernel.data_mut(),
            2 => self.weights.bias.as_mut().expect("bias"),
            3 => self.offsets.data_mut(),
            _ => self.modulation.data_mut(),
        }
    }
    fn forward(&mut self) -> Result<Vec<T>> {
        Ok(dcn_forward(&self.weights, &self.x, &self.offsets, &self.modulation)?.into_vec())
    }
    fn backward(&mut self, up: &[T]) -> Result<Vec<Vec<T>>> {
        let [n, _, h, w] = self.x.shape();
        let g = Tensor::from_vec([n, self.weights.out_channels(), h, w], up.to_vec())?;
        let d = dcn_backward(&self.weights, &self.x, &self.offsets, &self.modulation, &g)?;
        Ok(vec![
            d.input.into_vec(),
            d.kernel.into_vec(),
            d.bias.unwrap_or_default(),
            d.offsets.into_vec(),
            d.modulation.into_vec(),
        ])
    }
}

struct CombinedLossCase<T> {
    yhat: Tensor<T>,
    y: Tensor<T>,
    w: f64,
    grad: Option<Tensor<T>>,
}

impl<T: Real> Differentiable<T> for CombinedLossCase<T> {
    fn slot_names(&self) -> Vec<String> {
        vec!["yhat".into()]
    }
    fn slot_mut(&mut self, _: usize) -> &mut [T] {
        self.yhat.data_mut()
    }
    fn forward(&mut self) -> Result<Vec<T>> {
        let l = combined_loss(&self.yhat, &self.y, self.w)?;
        self.grad = Some(l.grad);
        Ok(vec![T::of(l.value)])
    }
    fn backward(&mut self, up: &[T]) -> Result<Vec<Vec<T>>> {
        let g = self.grad.as_ref().ok_or_else(|| Error::InvalidArgument("loss backward before forward".into()))?;
        Ok(vec![g.data().iter().map(|&v| v * up[0]).collect()])
    }
}

struct MixedLossCase<T> {
    stages: Vec<Tensor<T>>,
    y: Tensor<T>,
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Differentiable<T> for MixedLossCase<T> {
    fn slot_names(&self) -> Vec<String> {
        (0..self.stages.len()).map(|i| format!("stage{i}")).collect()
    }
    fn slot_mut(&mut self, i: usize) -> &mut [T] {
        self.stages[i].data_mut()
    }
    fn forward(&mut self) -> Result<Vec<T>> {
        let l = mixed_loss(&self.stages, &self.y, 0.5)?;
        self.grads = l.grads;
        Ok(vec![T::of(l.value)])
    }
    fn backward(&mut self, up: &[T]) -> Result<Vec<Vec<T>>> {
        Ok(self.grads.iter().map(|g| g.data().iter().map(|&v| v * up[0]).collect()).collect())
    }
}

/// The whole network, output = all stage logits concatenated.
pub struct ModelCase<T: Real> {
    pub model: Model<T>,
    pub input: Tensor<T>,
    pub mode: Mode,
    shapes: Vec<[usize; 4]>,
}

impl<T: Real> ModelCase<T> {
    fn trainable(&mut self) -> Vec<crate::layer::ParamMut<'_, T>> {
        let mut ps = Vec::new();
        self.model.params_mut("", &mut ps);
        ps.retain(|p| p.kind.is_trainable());
        ps
    }
}

impl<T: Real> Differentiable<T> for ModelCase<T> {
    fn slot_names(&self) -> Vec<String> {
        let mut ps = Vec::new();
        self.model.params("", &mut ps);
        std::iter::once("input".to_string())
            .chain(ps.into_iter().filter(|p| p.kind.is_trainable()).map(|p| p.name))
            .collect()
    }
    fn slot_mut(&mut self, i: usize) -> &mut [T] {
        if i == 0 {
            return self.input.data_mut();
        }
        self.trainable().into_iter().nth(i - 1).expect("slot index").value
    }
    fn forward(&mut self) -> Result<Vec<T>> {
        let out = self.model.forward(&self.input, self.mode)?;
        self.shapes = out.stage_logits.iter().map(Tensor::shape).collect();
        Ok(out.stage_logits.into_iter().flat_map(Tensor::into_vec).collect())
    }
    fn backward(&mut self, up: &[T]) -> Result<Vec<Vec<T>>> {
        self.model.zero_grad();
        let mut grads = Vec::with_capacity(self.shapes.len());
        let mut at = 0;
        for &s in &self.shapes {
            let n = s.iter().product::<usize>();
            grads.push(Some(Tensor::from_vec(s, up[at..at + n].to_vec())?));
            at += n;
        }
        let gx = self.model.backward(&grads)?;
        Ok(std::iter::once(gx.into_vec())
            .chain(self.trainable().into_iter().map(|p| p.grad.to_vec()))
            .collect())
    }
}

/// Every registered differentiable operation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCase {
    Conv2d,
    BatchNormInfer,
    BatchNormFrozen,
    Activation(Activation),
    Upsample,
    DcnOp,
    DcnLayer,
    MixConv,
    SqueezeExcite,
    MnBlock,
    CombinedLoss,
    MixedLoss,
    TinyModel,
}

impl GradCase {
    /// All cases, whole-model last.
    pub fn all() -> Vec<GradCase> {
        let mut v = vec![GradCase::Conv2d, GradCase::BatchNormInfer, GradCase::BatchNormFrozen];
        v.extend(Activation::ALL.iter().map(|&a| GradCase::Activation(a)));
        v.extend([
            GradCase::Upsample,
            GradCase::DcnOp,
            GradCase::DcnLayer,
            GradCase::MixConv,
            GradCase::SqueezeExcite,
            GradCase::MnBlock,
            GradCase::CombinedLoss,
            GradCase::MixedLoss,
            GradCase::TinyModel,
        ]);
        v
    }

    /// Every case except the whole model.
    pub fn ops() -> Vec<GradCase> {
        Self::all().into_iter().filter(|c| *c != GradCase::TinyModel).collect()
    }

    pub fn name(&self) -> String {
        match self {
            GradCase::Conv2d => "conv2d".into(),
            GradCase::BatchNormInfer => "batchnorm_infer".into(),
            GradCase::BatchNormFrozen => "batchnorm_frozen".into(),
            GradCase::Activation(a) => a.name().into(),
            GradCase::Upsample => "bilinear_upsample".into(),
            GradCase::DcnOp => "dcn_forward".into(),
            GradCase::DcnLayer => "dcn_layer".into(),
            GradCase::MixConv => "mixconv".into(),
            GradCase::SqueezeExcite => "se_block".into(),
            GradCase::MnBlock => "mnblock".into(),
            GradCase::CombinedLoss => "combined_loss".into(),
            GradCase::MixedLoss => "mixed_loss".into(),
            GradCase::TinyModel => "tiny_model".into(),
        }
    }

    /// Coordinates probed per slot; the whole model is sampled.
    fn max_coords(&self) -> Option<usize> {
        match self {
            GradCase::TinyModel => Some(3),
            _ => None,
        }
    }

    /// Builds the instance for `seed`; identical values for every precision.
    pub fn instance<T: Real>(&self, seed: u64) -> Result<Box<dyn Differentiable<T>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        Ok(match *self {
            GradCase::Conv2d => {
                let mut conv = Conv::new(ConvWeights::new(2, 3, 3, 1, 1, 1, true)?);
                randomize_layer(&mut conv, r, 1.0);
                Box::new(LayerCase::new(conv, rand_tensor(r, [1, 2, 5, 5], -1.0, 1.0), Mode::Train))
            }
            GradCase::BatchNormInfer | GradCase::BatchNormFrozen => {
                let mut bn = BatchNorm::new(3);
                randomize_layer(&mut bn, r, 1.5);
                fill(r, &mut bn.running_mean, -0.5, 0.5);
                fill(r, &mut bn.running_var, 0.5, 2.0);
                bn.freeze_stats = true;
                let mode = if *self == GradCase::BatchNormInfer { Mode::Infer } else { Mode::Train };
                Box::new(LayerCase::new(bn, rand_tensor(r, [2, 3, 3, 4], -2.0, 2.0), mode))
            }
            GradCase::Activation(kind) => Box::new(ActivationCase {
                kind,
                x: kink_free(r, [1, 2, 4, 4]),
            }),
            GradCase::Upsample => Box::new(UpsampleCase {
                x: rand_tensor(r, [1, 2, 3, 4], -1.0, 1.0),
                out: (6, 8),
            }),
            GradCase::DcnOp => {
                let mut weights = ConvWeights::new(2, 3, 3, 1, 1, 1, true)?;
                fill(r, weights.kernel.data_mut(), -1.0, 1.0);
                fill(r, weights.bias.as_mut().expect("bias"), -1.0, 1.0);
                let mut offsets = Tensor::zeros([1, 18, 6, 6]);
                for v in offsets.data_mut() {
                    let whole = r.random_range(-1i32..=1) as f64;
                    let frac = r.random_range(0.1f64..0.4) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
                    *v = T::of((whole + frac) as f32 as f64);
                }
                Box::new(DcnOpCase {
                    weights,
                    x: rand_tensor(r, [1, 2, 6, 6], -1.0, 1.0),
                    offsets,
                    modulation: rand_tensor(r, [1, 9, 6, 6], 0.1, 0.9),
                })
            }
            GradCase::DcnLayer => {
                let mut l = DcnLayer::new(2, 3, 3)?;
                randomize_layer(&mut l.main, r, 1.0);
                randomize_layer(&mut l.branch, r, 0.3);
                Box::new(LayerCase::new(l, rand_tensor(r, [1, 2, 6, 6], -1.0, 1.0), Mode::Train))
            }
            GradCase::MixConv => {
                let mut m = MixConv::new(6, &[3, 5, 7], 2)?;
                randomize_layer(&mut m, r, 1.0);
                Box::new(LayerCase::new(m, rand_tensor(r, [1, 6, 7, 7], -1.0, 1.0), Mode::Train))
            }
            GradCase::SqueezeExcite => {
                let mut se = SqueezeExcite::new(4, 2)?;
                randomize_layer(&mut se, r, 1.0);
                Box::new(LayerCase::new(se, rand_tensor(r, [2, 4, 3, 3], -1.0, 1.0), Mode::Train))
            }
            GradCase::MnBlock => {
                let mut b = MnBlock::new(MnBlockSpec {
                    in_ch: 4,
                    out_ch: 4,
                    stride: 1,
                    expansion: 2.0,
                    kernel_sizes: vec![3, 5],
                    se_ratio: Some(0.5),
                })?;
                randomize_layer(&mut b, r, 1.0);
                b.visit_norms(&mut |bn| bn.freeze_stats = true);
                Box::new(LayerCase::new(b, rand_tensor(r, [2, 4, 5, 5], -1.0, 1.0), Mode::Train))
            }
            GradCase::CombinedLoss => Box::new(CombinedLossCase {
                yhat: rand_tensor(r, [1, 1, 4, 4], 0.2, 0.8),
                y: rand_tensor::<T>(r, [1, 1, 4, 4], 0.0, 1.0).map(|v| if v.f64() < 0.5 { T::zero() } else { T::one() }),
                w: 0.5,
                grad: None,
            }),
            GradCase::MixedLoss => Box::new(MixedLossCase {
                stages: (0..MIXED_STAGES).map(|_| rand_tensor(r, [1, 1, 4, 4], 0.2, 0.8)).collect(),
                y: rand_tensor::<T>(r, [1, 1, 4, 4], 0.0, 1.0).map(|v| if v.f64() < 0.5 { T::zero() } else { T::one() }),
                grads: Vec::new(),
            }),
            GradCase::TinyModel => Box::new(tiny_model_case(r, Mode::Infer)?),
        })
    }

    /// Runs the check for one seed.
    pub fn run(&self, seed: u64, precision: Precision, tol: f64) -> Result<GradCheckReport> {
        let name = format!("{}[{}]", self.name(), precision.name());
        let mut shadow = self.instance::<f64>(seed)?;
        match precision {
            Precision::F64 => {
                let mut analytic = self.instance::<f64>(seed)?;
                grad_check(&name, analytic.as_mut(), shadow.as_mut(), tol, seed, self.max_coords())
            }
            Precision::F32 => {
                let mut analytic = self.instance::<f32>(seed)?;
                grad_check(&name, analytic.as_mut(), shadow.as_mut(), tol, seed, self.max_coords())
            }
        }
    }
}

/// Widths divided by 8, input 1×3×32×32, every parameter and running statistic randomized
/// (including the deformable branches). Train mode normalizes with frozen batch statistics.
pub fn tiny_model_case<T: Real>(rng: &mut ChaCha8Rng, mode: Mode) -> Result<ModelCase<T>> {
    let spec = EncoderSpec::hybridnetseg().scaled(8);
    let mut model = Model::<T>::new(&spec)?;
    let mut ps = Vec::new();
    model.params_mut("", &mut ps);
    for p in ps {
        if !p.kind.is_trainable() {
            let (lo, hi) = if p.name.ends_with("running_var") { (0.5, 2.0) } else { (-0.2, 0.2) };
            fill(rng, p.value, lo, hi);
            continue;
        }
        let fan_in = if p.shape.len() == 4 { p.shape[1] * p.shape[2] * p.shape[3] } else { 1 };
        let s = match p.kind {
            crate::layer::ParamKind::Weight => (3.0 / fan_in as f64).sqrt(),
            crate::layer::ParamKind::Bias => 0.1,
            _ => 0.5,
        };
        if p.name.ends_with("gamma") {
            fill(rng, p.value, 0.5, 1.5);
        } else {
            fill(rng, p.value, -s, s);
        }
    }
    model.set_freeze_stats(true);
    Ok(ModelCase {
        model,
        input: rand_tensor(rng, [1, 3, 32, 32], -1.0, 1.0),
        mode,
        shapes: Vec::new(),
    })
}

/// Runs `cases` for seeds `0..seeds`.
pub fn run_suite(cases: &[GradCase], seeds: u64, precision: Precision, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for case in cases {
        for seed in 0..seeds {
            let mut r = case.run(seed, precision, tol)?;
            r.op_name = format!("{}#{seed}", r.op_name);
            out.push(r);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tolerance_always_fails() {
        let r = GradCase::Conv2d.run(0, Precision::F64, 0.0).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut c = GradCase::Conv2d.instance::<f64>(1).unwrap();
        let n = c.forward().unwrap().len();
        for g in c.backward(&vec![0.0; n]).unwrap() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn every_op_in_f64() {
        for case in GradCase::ops() {
            for seed in 0..5 {
                let r = case.run(seed, Precision::F64, 1e-6).unwrap();
                assert!(r.passed, "{} seed {seed}: {:?}", r.op_name, r.per_parameter);
            }
        }
    }

    #[test]
    fn every_op_in_f32() {
        for case in GradCase::ops() {
            for seed in 0..5 {
                let r = case.run(seed, Precision::F32, 1e-3).unwrap();
                assert!(r.passed, "{} seed {seed}: {:?}", r.op_name, r.per_parameter);
            }
        }
    }

    #[test]
    fn tiny_model_train_mode_with_small_step() {
        let mut a = tiny_model_case::<f64>(&mut ChaCha8Rng::seed_from_u64(1), Mode::Train).unwrap();
        let mut b = tiny_model_case::<f64>(&mut ChaCha8Rng::seed_from_u64(1), Mode::Train).unwrap();
        let r = grad_check_with_step("tiny_model_train", &mut a, &mut b, 1e-3, 1, Some(3), 1e-6).unwrap();
        assert!(r.passed, "{:?}", r.per_parameter.iter().filter(|p| p.1 >= 1e-3).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_model_in_f64() {
        let r = GradCase::TinyModel.run(0, Precision::F64, 1e-3).unwrap();
        assert!(r.passed, "{:?}", r.per_parameter.iter().filter(|p| p.1 >= 1e-3).collect::<Vec<_>>());
    }
}
