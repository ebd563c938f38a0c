//! Dataset loading, the training loop and model checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cscnet_core::checkpoint::Checkpoint;
use cscnet_core::data::{self, augment, channel_stats, Dataset, Split};
use cscnet_core::nn::{cross_entropy, Mode, SdNetLite, SgdState};
use cscnet_core::robust::{evaluate, EvalReport};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, RunConfig};

pub const METRICS_HEADER: &str = "epoch,train_loss,test_acc,lr,mean_residual";

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = cfg.data_path();
    let ds = match cfg.dataset {
        DatasetKind::Mnist => data::load_mnist(&dir, split),
        DatasetKind::Cifar10 => data::load_cifar10(&dir, split),
    }
    .with_context(|| format!("loading {} from {}", cfg.dataset, dir.display()))?;
    let limit = match split {
        Split::Train => cfg.train_limit,
        Split::Test => cfg.test_limit,
    };
    Ok(if limit > 0 { ds.take(limit) } else { ds })
}

/// A freshly initialized model with standardization fitted to `train`.
pub fn init_model(cfg: &RunConfig, train: &Dataset) -> Result<SdNetLite> {
    let mut model = SdNetLite::build(&cfg.arch, train.item_shape(), cfg.fista(), cfg.seed)?;
    if model.layers().first().is_some_and(|l| l.kind() == "std") {
        let (mean, std) = channel_stats(&train.images);
        model.set_standardization(mean, std)?;
    }
    Ok(model)
}

pub fn to_checkpoint(cfg: &RunConfig, model: &SdNetLite) -> Checkpoint {
    let mut ck = Checkpoint {
        config: cfg.to_pairs(),
        tensors: model.state(),
    };
    let [c, h, w] = model.input_shape();
    ck.set("input_shape", format!("{c},{h},{w}"));
    ck
}

pub fn save_model(path: &Path, cfg: &RunConfig, model: &SdNetLite) -> Result<()> {
    to_checkpoint(cfg, model)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, SdNetLite)> {
    let cfg = RunConfig::from_pairs(&ck.config)?;
    let dims: Vec<usize> = ck
        .require("input_shape")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .context("bad input_shape in checkpoint")?;
    let [c, h, w] = dims[..] else {
        bail!("input_shape needs three extents");
    };
    let mut model = SdNetLite::build(&cfg.arch, [c, h, w], cfg.fista(), cfg.seed)?;
    model.load_state(&ck.tensors)?;
    Ok((cfg, model))
}

pub fn load_model(path: &Path) -> Result<(RunConfig, SdNetLite)> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    from_checkpoint(&ck).with_context(|| format!("restoring model from {}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub mean_residual: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.test_acc, self.lr, self.mean_residual
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub struct TrainOutcome {
    pub model: SdNetLite,
    pub metrics: Vec<EpochMetrics>,
    pub final_path: PathBuf,
    pub best_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Trains on pre-loaded data, writing `metrics.csv`, `best.ckpt` and
/// `final.ckpt` into `out_dir`.
pub fn train_on(cfg: &RunConfig, train: &Dataset, test: &Dataset, out_dir: &Path, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let final_path = out_dir.join("final.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let mut model = init_model(cfg, train)?;
    let mut sgd = SgdState::new(cfg.sgd(), &model)?;
    let aug = cfg.augment();
    let mut metrics = Vec::new();
    let mut best = f64::NEG_INFINITY;
    fs::write(&metrics_path, metrics_csv(&metrics))?;
    if cfg.epochs == 0 {
        save_model(&final_path, cfg, &model)?;
        save_model(&best_path, cfg, &model)?;
    }

    let n = train.len();
    let batches = n.div_ceil(cfg.batch);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1_000 + epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let mut x = train.images.select(idx);
            if let Some(spec) = aug {
                let seed = cfg.seed.wrapping_add(((epoch as u64) << 32) | b as u64);
                x = augment(&x, spec, seed);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let out = model.forward(&x, Mode::Train)?;
            let (loss, grad) = cross_entropy(&out.logits, &labels)?;
            if !loss.is_finite() {
                bail!("training diverged at epoch {} batch {b}", epoch + 1);
            }
            loss_sum += loss * idx.len() as f64;
            let grads = model.backward(&grad)?;
            sgd.step(&mut model, &grads.params, epoch as f64 + b as f64 / batches as f64)?;
            if verbose && (b + 1) % 50 == 0 {
                eprintln!("epoch {} batch {}/{batches} loss {loss:.4}", epoch + 1, b + 1);
            }
        }
        for layer in model.csc_layers_mut() {
            layer.clear_cache();
        }
        let report = evaluate(&mut model, test, cfg.eval_batch)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n.max(1) as f64,
            test_acc: report.accuracy(),
            lr: sgd.lr_at(epoch as f64),
            mean_residual: report.mean_residual,
        };
        if verbose {
            eprintln!(
                "epoch {} loss {:.4} test acc {:.4} ({:.0}s)",
                row.epoch,
                row.train_loss,
                row.test_acc,
                started.elapsed().as_secs_f64()
            );
        }
        if row.test_acc > best {
            best = row.test_acc;
            save_model(&best_path, cfg, &model)?;
        }
        metrics.push(row);
        fs::write(&metrics_path, metrics_csv(&metrics))?;
    }
    if cfg.epochs > 0 {
        save_model(&final_path, cfg, &model)?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        final_path,
        best_path,
        metrics_path,
    })
}

pub fn train(cfg: &RunConfig, out_dir: &Path, verbose: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    train_on(cfg, &train, &test, out_dir, verbose)
}

/// Evaluation report for a model on a dataset, honoring an optional
/// lambda override.
pub fn eval_report(model: &mut SdNetLite, data: &Dataset, batch: usize, lambda: Option<f64>) -> Result<EvalReport> {
    Ok(match lambda {
        Some(l) => cscnet_core::robust::with_lambda(model, l, |m| evaluate(m, data, batch))?,
        None => evaluate(model, data, batch)?,
    })
}
