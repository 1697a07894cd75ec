use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use hybridseg::data::{self, list_pairs, load_image, load_sample, make_splits, AugmentConfig, DatasetKind, Sample};
use hybridseg::gradcheck::{GradCase, Precision};
use hybridseg::layer::Mode;
use hybridseg::metrics::metrics_csv;
use hybridseg::network::{build_model, checkpoint_size, count_macs, count_params, load_checkpoint, save_checkpoint, EncoderSpec};
use hybridseg::train::{evaluate, history_csv, train, TrainConfig};

use crate::config::ConfigFile;
use crate::{Command, EvalArgs, GradcheckArgs, InferArgs, SummaryArgs, SynthArgs, TrainArgs, Validation};

pub fn run(cmd: Command, file: &ConfigFile) -> Result<()> {
    match cmd {
        Command::Summary(a) => summary(a, file),
        Command::Gradcheck(a) => gradcheck(a, file),
        Command::Train(a) => train_cmd(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Infer(a) => infer(a, file),
        Command::Synth(a) => synth(a, file),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Validation::new(format!("missing required --{flag}")).into())
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Validation::new(format!("input size must look like WxH, got `{s}`"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    Ok((w, h))
}

fn dataset(v: Option<String>, default: DatasetKind) -> Result<DatasetKind> {
    Ok(match v {
        Some(s) => s.parse()?,
        None => default,
    })
}

fn summary(a: SummaryArgs, file: &ConfigFile) -> Result<()> {
    file.check_keys("summary", &["input_size"])?;
    let size = file.pick(a.input_size, "input_size")?.unwrap_or_else(|| "512x512".into());
    let (w, h) = parse_size(&size)?;
    let model = build_model(&EncoderSpec::hybridnetseg(), 0)?;
    let macs = count_macs(&model, [3, h, w])?;
    let params = count_params(&model);
    println!("input          3x{h}x{w}");
    println!("params         {params} ({:.3} M)", params as f64 / 1e6);
    println!("encoder_params {}", model.encoder_param_count());
    println!("macs           {} ({:.3} G)", macs.total(), macs.total() as f64 / 1e9);
    println!("macs_conv      {}", macs.conv);
    println!("macs_sampling  {}", macs.sampling);
    println!("macs_se        {}", macs.se);
    println!("checkpoint     {} bytes", checkpoint_size(&model));
    Ok(())
}

fn gradcheck(a: GradcheckArgs, file: &ConfigFile) -> Result<()> {
    file.check_keys("gradcheck", &["tol", "seed", "seeds", "precision"])?;
    let tol = file.pick(a.tol, "tol")?.unwrap_or(1e-4);
    let seed = file.pick(a.seed, "seed")?.unwrap_or(0);
    let seeds = file.pick(a.seeds, "seeds")?.unwrap_or(1).max(1);
    let precision = match file.pick(a.precision, "precision")?.as_deref() {
        None | Some("f64") => Precision::F64,
        Some("f32") => Precision::F32,
        Some(p) => bail!(Validation::new(format!("precision must be f64 or f32, got `{p}`"))),
    };
    if !(tol >= 0.0) {
        bail!(Validation::new(format!("tolerance must be non-negative, got {tol}")));
    }
    println!("{:<28} {:>12}  status", "case", "max_rel_err");
    let mut failed = 0;
    for case in GradCase::all() {
        for s in seed..seed + seeds {
            let r = case.run(s, precision, tol)?;
            let status = if r.passed { "pass" } else { "FAIL" };
            failed += usize::from(!r.passed);
            println!("{:<28} {:>12.3e}  {status}", format!("{}#{s}", r.op_name), r.max_rel_err);
        }
    }
    if failed > 0 {
        bail!(Validation::new(format!("{failed} gradient check(s) failed at tol {tol:e}")));
    }
    println!("all gradient checks passed at tol {tol:e}");
    Ok(())
}

fn load_dir(root: &Path, kind: DatasetKind, ids: Option<&[String]>) -> Result<Vec<Sample>> {
    let pairs = list_pairs(root)?;
    pairs
        .iter()
        .filter(|p| ids.is_none_or(|ids| ids.contains(&p.id)))
        .map(|p| load_sample(&p.image, &p.mask, kind).map_err(Into::into))
        .collect()
}

fn train_cmd(a: TrainArgs, file: &ConfigFile) -> Result<()> {
    file.check_keys(
        "train",
        &[
            "data", "dataset", "out", "no_mixed_loss", "seed", "lr", "weight_decay", "batch_size", "max_epochs",
            "patience", "loss_weight", "augment", "threshold", "synth_count", "size",
        ],
    )?;
    let kind = dataset(file.pick(a.dataset, "dataset")?, DatasetKind::Synth)?;
    let data_dir: Option<PathBuf> = file.pick(a.data, "data")?;
    let out: PathBuf = required(file.pick(a.out, "out")?, "out")?;
    let seed = file.pick(a.seed, "seed")?.unwrap_or(0);
    let defaults = TrainConfig::default();
    let augment_on = match file.pick(a.augment, "augment")?.as_deref() {
        None => kind != DatasetKind::Synth,
        Some("on") | Some("true") => true,
        Some("off") | Some("false") => false,
        Some(v) => bail!(Validation::new(format!("--augment must be on or off, got `{v}`"))),
    };
    let cfg = TrainConfig {
        lr: file.pick(a.lr, "lr")?.unwrap_or(defaults.lr),
        weight_decay: file.pick(a.weight_decay, "weight_decay")?.unwrap_or(defaults.weight_decay),
        batch_size: file.pick(a.batch_size, "batch_size")?.unwrap_or(kind.batch_size()),
        max_epochs: file.pick(a.max_epochs, "max_epochs")?.unwrap_or(defaults.max_epochs),
        patience: file.pick(a.patience, "patience")?.unwrap_or(defaults.patience),
        mixed_loss: !file.switch(a.no_mixed_loss, "no_mixed_loss")?,
        loss_weight: file.pick(a.loss_weight, "loss_weight")?.unwrap_or(defaults.loss_weight),
        seed,
        augment: if augment_on { AugmentConfig::default() } else { AugmentConfig::none() },
        threshold: file.pick(a.threshold, "threshold")?.unwrap_or(defaults.threshold),
    };
    cfg.validate()?;

    let (train_set, val_set) = match (&data_dir, kind) {
        (None, DatasetKind::Synth) => {
            let size = file.pick(a.size, "size")?.unwrap_or(64);
            let count = file.pick(a.synth_count, "synth_count")?.unwrap_or(4);
            let set = data::synth_vessels(seed, size, count)?;
            (set.clone(), set)
        }
        (None, _) => bail!(Validation::new(format!("--data is required for {kind}"))),
        (Some(root), DatasetKind::Synth) => {
            let set = load_dir(root, kind, None)?;
            (set.clone(), set)
        }
        (Some(root), _) => {
            let split = make_splits(root, kind)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("split.txt"), split.to_text())?;
            (load_dir(root, kind, Some(&split.train))?, load_dir(root, kind, Some(&split.test))?)
        }
    };
    if train_set.is_empty() {
        bail!(Validation::new("training set is empty"));
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    eprintln!(
        "training on {} image(s), validating on {}, loss {}, seed {seed}",
        train_set.len(),
        val_set.len(),
        cfg.loss_mode()
    );
    let model = build_model(&EncoderSpec::hybridnetseg(), seed)?;
    let outcome = train(model, &train_set, &val_set, &cfg, &mut |r| {
        eprintln!("epoch {:>4}  loss {:.5}  val_dice {:.4}", r.epoch, r.train_loss, r.val.f1);
    })?;
    save_checkpoint(&outcome.best, out.join("best.hseg"))?;
    fs::write(out.join("history.csv"), history_csv(&outcome.history))?;
    let best = &outcome.history[outcome.best_epoch - 1].val;
    println!("loss_mode={}", cfg.loss_mode());
    println!("epochs={}", outcome.history.len());
    println!("best_epoch={}", outcome.best_epoch);
    println!("stopped_early={}", outcome.stopped_early);
    print!("{}", best.key_values());
    println!("checkpoint={}", out.join("best.hseg").display());
    Ok(())
}

fn eval(a: EvalArgs, file: &ConfigFile) -> Result<()> {
    file.check_keys("eval", &["checkpoint", "data", "dataset", "threshold", "split", "out"])?;
    let ckpt: PathBuf = required(file.pick(a.checkpoint, "checkpoint")?, "checkpoint")?;
    let root: PathBuf = required(file.pick(a.data, "data")?, "data")?;
    let kind = dataset(file.pick(a.dataset, "dataset")?, DatasetKind::Synth)?;
    let threshold = file.pick(a.threshold, "threshold")?.unwrap_or(0.5);
    let split = file
        .pick(a.split, "split")?
        .unwrap_or_else(|| if kind == DatasetKind::Synth { "all".into() } else { "test".into() });
    let ids = match split.as_str() {
        "all" => None,
        "train" => Some(make_splits(&root, kind)?.train),
        "test" => Some(make_splits(&root, kind)?.test),
        other => bail!(Validation::new(format!("--split must be train, test or all, got `{other}`"))),
    };
    let set = load_dir(&root, kind, ids.as_deref())?;
    let mut model = load_checkpoint(&ckpt, &EncoderSpec::hybridnetseg())?;
    let (rows, mean) = evaluate(&mut model, &set, threshold)?;
    let mut csv = metrics_csv(&rows);
    csv.push_str(&mean.csv_row());
    csv.push('\n');
    print!("{csv}");
    if let Some(path) = file.pick::<PathBuf>(a.out, "out")? {
        fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn infer(a: InferArgs, file: &ConfigFile) -> Result<()> {
    file.check_keys("infer", &["checkpoint", "image", "out", "dataset"])?;
    let ckpt: PathBuf = required(file.pick(a.checkpoint, "checkpoint")?, "checkpoint")?;
    let image: PathBuf = required(file.pick(a.image, "image")?, "image")?;
    let out: PathBuf = required(file.pick(a.out, "out")?, "out")?;
    let kind = dataset(file.pick(a.dataset, "dataset")?, DatasetKind::Synth)?;
    let x = load_image(&image, kind)?;
    let mut model = load_checkpoint(&ckpt, &EncoderSpec::hybridnetseg())?;
    let prob = model.forward(&x, Mode::Infer)?.prob;
    data::save_prob_map(&prob, &out)?;
    println!("{} ({}x{})", out.display(), prob.width(), prob.height());
    Ok(())
}

fn synth(a: SynthArgs, file: &ConfigFile) -> Result<()> {
    file.check_keys("synth", &["seed", "size", "count", "out"])?;
    let out: PathBuf = required(file.pick(a.out, "out")?, "out")?;
    let seed = file.pick(a.seed, "seed")?.unwrap_or(0);
    let size = file.pick(a.size, "size")?.unwrap_or(64);
    let count = file.pick(a.count, "count")?.unwrap_or(4);
    let set = data::synth_vessels(seed, size, count)?;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    for s in &set {
        data::save_sample(s, &out)?;
    }
    println!("wrote {count} image/mask pair(s) of {size}x{size} to {}", out.display());
    Ok(())
}
