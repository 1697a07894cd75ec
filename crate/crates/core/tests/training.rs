use hybridseg::data::{synth_vessels, AugmentConfig};
use hybridseg::layer::Mode;
use hybridseg::network::{build_model, EncoderSpec, Model};
use hybridseg::train::{evaluate, train, TrainConfig, Trainer};
use hybridseg::Tensor;

fn quick(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        patience,
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    }
}

#[test]
fn early_stopping_returns_the_best_snapshot() {
    let set = synth_vessels(1, 32, 4).unwrap();
    let cfg = quick(12, 2);
    let model = build_model(&EncoderSpec::hybridnetseg(), 0).unwrap();
    let mut epochs = 0;
    let mut out = train(model, &set, &set, &cfg, &mut |_| epochs += 1).unwrap();
    assert_eq!(epochs, out.history.len());

    let best = out.history.iter().map(|r| r.val.f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_dice, best);
    assert_eq!(out.history[out.best_epoch - 1].val.f1, best);
    assert!(out.history[..out.best_epoch - 1].iter().all(|r| r.val.f1 < best));
    if out.stopped_early {
        assert_eq!(out.history.len(), out.best_epoch + cfg.patience);
    } else {
        assert_eq!(out.history.len(), cfg.max_epochs);
    }

    let (_, mean) = evaluate(&mut out.best, &set, cfg.threshold).unwrap();
    assert_eq!(mean.f1.to_bits(), best.to_bits());
}

#[test]
fn patience_one_stops_after_the_first_stall() {
    let set = synth_vessels(2, 32, 2).unwrap();
    let out = train(build_model(&EncoderSpec::hybridnetseg(), 0).unwrap(), &set, &set, &quick(40, 1), &mut |_| {}).unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut stall = None;
    for (i, r) in out.history.iter().enumerate() {
        if r.val.f1 > best {
            best = r.val.f1;
        } else {
            stall = Some(i + 1);
            break;
        }
    }
    assert_eq!(out.history.len(), stall.unwrap_or(40));
    assert_eq!(out.stopped_early, stall.is_some());
}

#[test]
fn mixed_loss_reaches_every_parameter() {
    let set = synth_vessels(5, 32, 2).unwrap();
    let mut trainer = Trainer::new(build_model(&EncoderSpec::hybridnetseg(), 4).unwrap(), quick(1, 1)).unwrap();
    let (x, y) = trainer.epoch_batches(&set).unwrap().remove(0);
    let out = trainer.model.forward(&x, Mode::Train).unwrap();
    let (loss, grads) = trainer.loss(&out, &y).unwrap();
    assert!(loss.is_finite());
    trainer.model.backward(&grads).unwrap();
    let mut ps = Vec::new();
    trainer.model.params_mut("", &mut ps);
    let dead: Vec<String> = ps
        .iter()
        .filter(|p| p.kind.is_trainable())
        .filter(|p| {
            let norm: f64 = p.grad.iter().map(|g| (*g as f64).powi(2)).sum();
            !(norm > 0.0 && norm.is_finite())
        })
        .map(|p| p.name.clone())
        .collect();
    assert!(dead.is_empty(), "no gradient reached {dead:?}");
}

#[test]
fn overfit_loss_keeps_improving_over_fifty_epoch_windows() {
    let set = synth_vessels(0, 64, 4).unwrap();
    let cfg = quick(150, 150);
    let out = train(build_model(&EncoderSpec::hybridnetseg(), cfg.seed).unwrap(), &set, &set, &cfg, &mut |_| {}).unwrap();
    let loss: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
    for end in (50..=loss.len()).step_by(10).skip(1) {
        let before = loss[..end - 50].iter().copied().fold(f64::INFINITY, f64::min);
        let window = loss[end - 50..end].iter().copied().fold(f64::INFINITY, f64::min);
        assert!(window < before, "no improvement in epochs {}..{end}: {window} vs {before}", end - 50);
    }
}

#[test]
fn saturated_negative_model_has_zero_sensitivity_and_repeatable_reports() {
    let set = synth_vessels(6, 32, 3).unwrap();
    let mut model = Model::<f32>::new(&EncoderSpec::hybridnetseg()).unwrap();
    let last = model.heads.len() - 1;
    model.heads[last].weights.bias.as_mut().unwrap()[0] = -20.0;
    let (rows, mean) = evaluate(&mut model, &set, 0.5).unwrap();
    assert!(rows.iter().all(|r| r.sen == 0.0 && r.sp == 1.0));
    let (again, mean_again) = evaluate(&mut model, &set, 0.5).unwrap();
    assert_eq!(rows, again);
    assert_eq!(mean, mean_again);
}

#[test]
fn forward_caches_do_not_leak_between_steps() {
    let set = synth_vessels(7, 32, 2).unwrap();
    let cfg = quick(1, 1);
    let mut a = Trainer::new(build_model(&EncoderSpec::hybridnetseg(), 2).unwrap(), cfg.clone()).unwrap();
    let mut b = Trainer::new(build_model(&EncoderSpec::hybridnetseg(), 2).unwrap(), cfg).unwrap();
    let (x, y) = a.epoch_batches(&set).unwrap().remove(0);
    let noise = Tensor::from_fn(x.shape(), |_, c, r, col| ((c + r * col) % 7) as f32 / 7.0);
    a.model.forward(&noise, Mode::Train).unwrap();
    a.model.clear_cache();
    let ra = a.step(&x, &y).unwrap();
    let rb = b.step(&x, &y).unwrap();
    assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
}
