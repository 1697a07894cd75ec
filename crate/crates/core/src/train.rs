//! AdamW, the training loop with early stopping, and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, batch, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::layer::{Mode, ParamMut};
use crate::loss::{combined_loss, mixed_loss, prob_grad_to_logits, LOSS_WEIGHT};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};
use crate::network::{Model, ModelOutput};
use crate::real::Real;
use crate::tensor::{activation::sigmoid, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Decoupled-weight-decay Adam. Moments are kept per trainable tensor, in parameter order.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every trainable parameter; weight decay applies to weights only. A non-finite
    /// gradient rejects the whole step before anything changes.
    pub fn update<T: Real>(&mut self, params: Vec<ParamMut<'_, T>>, lr: f64, weight_decay: f64) -> Result<()> {
        let params: Vec<ParamMut<'_, T>> = params.into_iter().filter(|p| p.kind.is_trainable()).collect();
        if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite {
                what: "gradient",
                name: p.name.clone(),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.value.len()) {
            return Err(Error::InvalidArgument("optimizer state does not match the parameter set".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let wd = if p.kind.decays() { weight_decay } else { 0.0 };
            for (((x, &g), m), v) in p.value.iter_mut().zip(p.grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.f64();
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let (mh, vh) = (*m / c1, *v / c2);
                let old = x.f64();
                *x = T::of(old - lr * mh / (vh.sqrt() + ADAM_EPS) - lr * wd * old);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Supervise all four stages (`true`) or only the final head.
    pub mixed_loss: bool,
    pub loss_weight: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 2,
            max_epochs: 500,
            patience: 30,
            mixed_loss: true,
            loss_weight: LOSS_WEIGHT,
            seed: 0,
            augment: AugmentConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch size, patience and max epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.loss_weight) {
            return bad(format!("loss weight must lie in [0, 1], got {}", self.loss_weight));
        }
        Ok(())
    }

    pub fn loss_mode(&self) -> &'static str {
        if self.mixed_loss {
            "mixed"
        } else {
            "single"
        }
    }
}

/// Loss and forward output of one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub output: ModelOutput<f32>,
}

/// Owns the model, optimizer state and the seeded data stream.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub optimizer: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            optimizer: AdamW::new(),
            rng,
        })
    }

    /// Shuffles and augments one epoch of `set` into stacked batches.
    pub fn epoch_batches(&mut self, set: &[Sample]) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut self.rng);
        let augmented: Vec<Sample> = order
            .iter()
            .map(|&i| {
                let seed = self.rng.random::<u64>();
                augment(&set[i], seed, &self.cfg.augment)
            })
            .collect();
        augmented
            .chunks(self.cfg.batch_size)
            .map(|c| batch(&c.iter().collect::<Vec<_>>()))
            .collect()
    }

    /// Loss value and per-stage logit gradients (unsupervised stages get `None`).
    pub fn loss(&self, output: &ModelOutput<f32>, masks: &Tensor<f32>) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
        let probs: Vec<Tensor<f32>> = output.stage_logits.iter().map(|l| l.map(sigmoid)).collect();
        let w = self.cfg.loss_weight;
        if self.cfg.mixed_loss {
            let l = mixed_loss(&probs, masks, w)?;
            let grads = probs
                .iter()
                .zip(&l.grads)
                .map(|(p, g)| prob_grad_to_logits(p, g).map(Some))
                .collect::<Result<_>>()?;
            Ok((l.value, grads))
        } else {
            let last = probs.len() - 1;
            let l = combined_loss(&probs[last], masks, w)?;
            let mut grads = vec![None; probs.len()];
            grads[last] = Some(prob_grad_to_logits(&probs[last], &l.grad)?);
            Ok((l.value, grads))
        }
    }

    pub fn step(&mut self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<StepReport> {
        let output = self.model.forward(images, Mode::Train)?;
        let (loss, grads) = self.loss(&output, masks)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: format!("optimizer step {}", self.optimizer.step + 1),
            });
        }
        self.model.zero_grad();
        self.model.backward(&grads)?;
        let mut ps = Vec::new();
        self.model.params_mut("", &mut ps);
        self.optimizer.update(ps, self.cfg.lr, self.cfg.weight_decay)?;
        self.model.clear_cache();
        Ok(StepReport { loss, output })
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_mode: &'static str,
    pub train_loss: f64,
    pub val: MetricsReport,
}

pub const HISTORY_HEADER: &str = "epoch,loss_mode,train_loss,val_dice,val_acc,val_sen,val_sp,val_iou,val_auc";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let v = &r.val;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.loss_mode, r.train_loss, v.f1, v.acc, v.sen, v.sp, v.iou, v.auc
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the highest validation Dice.
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains until `patience` epochs pass without a validation Dice improvement or `max_epochs`.
pub fn train(
    model: Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(Model<f32>, usize, f64)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let batches = trainer.epoch_batches(train_set)?;
        let mut total = 0.0;
        for (i, (images, masks)) in batches.iter().enumerate() {
            let r = trainer.step(images, masks).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    name: format!("epoch {epoch}, step {}", i + 1),
                },
                other => other,
            })?;
            total += r.loss;
        }
        let (_, val) = evaluate(&mut trainer.model, val_set, cfg.threshold)?;
        let record = EpochRecord {
            epoch,
            loss_mode: cfg.loss_mode(),
            train_loss: total / batches.len() as f64,
            val,
        };
        on_epoch(&record);
        let dice = record.val.f1;
        history.push(record);
        if best.as_ref().is_none_or(|b| dice > b.2) {
            best = Some((trainer.model.clone(), epoch, dice));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best, best_epoch, best_dice) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dice,
        history,
        stopped_early,
    })
}

/// Inference-mode metrics for every sample plus their unweighted mean.
pub fn evaluate(model: &mut Model<f32>, set: &[Sample], threshold: f64) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    let mut reports = Vec::with_capacity(set.len());
    for s in set {
        let out = model.forward(&s.image, Mode::Infer)?;
        reports.push(MetricsReport::evaluate(&s.id, &out.prob, &s.mask, threshold)?);
    }
    model.clear_cache();
    let mean = MetricsReport::mean("mean", &reports)
        .ok_or_else(|| Error::InvalidArgument("evaluation set is empty".into()))?;
    Ok((reports, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::ParamKind;

    fn one<'a>(value: &'a mut [f64], grad: &'a mut [f64], kind: ParamKind) -> Vec<ParamMut<'a, f64>> {
        vec![ParamMut {
            name: "p".into(),
            shape: vec![value.len()],
            kind,
            value,
            grad,
        }]
    }

    #[test]
    fn scalar_oracle() {
        let (g, lr, wd) = (0.3f64, 0.01, 0.1);
        let mut p = [1.5f64];
        let mut grad = [g];
        let mut opt = AdamW::new();
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for k in 1..=7 {
            opt.update(one(&mut p, &mut grad, ParamKind::Weight), lr, wd).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x = x - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * x;
            assert!((p[0] - x).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_decay_only_on_weights() {
        let (mut w, mut b) = ([2.0], [2.0]);
        AdamW::new().update(one(&mut w, &mut [0.0], ParamKind::Weight), 0.1, 0.5).unwrap();
        AdamW::new().update(one(&mut b, &mut [0.0], ParamKind::Bias), 0.1, 0.5).unwrap();
        assert!((w[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut w = [0.7];
        AdamW::new().update(one(&mut w, &mut [0.0], ParamKind::Weight), 0.1, 0.0).unwrap();
        assert_eq!(w[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut opt = AdamW::new();
        let err = opt.update(one(&mut [1.0], &mut [f64::NAN], ParamKind::Weight), 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref name, .. } if name == "p"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
