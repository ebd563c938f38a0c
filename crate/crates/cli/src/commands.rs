//! Experiment drivers behind the subcommands. Each returns its results and
//! writes its artifacts into a caller-chosen directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cscnet_core::data::Dataset;
use cscnet_core::fista::{self, kkt_residual};
use cscnet_core::nn::{accuracy, Layer, Mode, SdNetLite};
use cscnet_core::robust::{
    adaptive_eval, calibrate, corrupt_dataset, evaluate, lambda_sweep, max_perturbation, pgd_attack, with_lambda,
    AdaptiveReport, CalibrationRun, CalibrationSettings, Level, PgdConfig,
};
use cscnet_core::viz::{dictionary_grid, psnr, reconstruct, sparsity_histogram, Image};
use cscnet_core::{ConvDictionary, Tensor};

use crate::config::RunConfig;
use crate::train::train_on;

fn limited(data: &Dataset, n: usize) -> Dataset {
    if n > 0 {
        data.take(n)
    } else {
        data.clone()
    }
}

pub fn sweep_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("lambda,accuracy\n");
    for (l, a) in points {
        let _ = writeln!(s, "{l},{a}");
    }
    s
}

/// Accuracy over the configured lambda grid.
pub fn sweep(model: &mut SdNetLite, cfg: &RunConfig, data: &Dataset) -> Result<Vec<(f64, f64)>> {
    Ok(lambda_sweep(model, data, &cfg.lambdas, cfg.eval_batch)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustRow {
    pub level: Level,
    /// Lambda the calibration picked for this level on training data.
    pub fitted_lambda: f64,
    pub report: AdaptiveReport,
}

pub struct RobustOutcome {
    pub run: CalibrationRun,
    pub rows: Vec<RobustRow>,
}

impl RobustOutcome {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("severity,fixed_acc,adaptive_acc,fitted_lambda,lambda_used,residual\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.level, r.report.fixed_accuracy, r.report.accuracy, r.fitted_lambda, r.report.lambda_used, r.report.r_test
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("severity,residual,lambda,accuracy\n");
        for c in &self.run.curves {
            for (l, a) in &c.accuracies {
                let _ = writeln!(s, "{},{},{l},{a}", c.level, c.residual);
            }
        }
        s
    }
}

/// Calibrates on corrupted training data, then runs the two-pass adaptive
/// evaluation on the test set at every configured level.
pub fn robust(model: &mut SdNetLite, cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RobustOutcome> {
    let settings = CalibrationSettings {
        kind: cfg.noise,
        levels: cfg.levels.clone(),
        lambdas: cfg.lambdas.clone(),
        subsample: cfg.subsample,
        batch: cfg.eval_batch,
        seed: cfg.seed,
    };
    let run = calibrate(model, train, &settings)?;
    let test = limited(test, cfg.eval_limit);
    let mut rows = Vec::with_capacity(cfg.levels.len());
    for (i, (&level, curve)) in cfg.levels.iter().zip(&run.curves).enumerate() {
        let seed = cfg.seed.wrapping_add(10_000 + i as u64);
        let data = corrupt_dataset(&test, cfg.noise, level, seed)?;
        rows.push(RobustRow {
            level,
            fitted_lambda: curve.best_lambda,
            report: adaptive_eval(model, &data, &run.calibration, cfg.eval_batch)?,
        });
    }
    Ok(RobustOutcome { run, rows })
}

pub fn write_robust(outcome: &RobustOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("calibration.txt"), outcome.run.calibration.to_text())?;
    fs::write(dir.join("robust.csv"), outcome.table_csv())?;
    fs::write(dir.join("curves.csv"), outcome.curves_csv())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateRow {
    pub k: usize,
    pub clean_acc: f64,
    pub corrupted_acc: f64,
    /// Mean per-item KKT violation of the first CSC layer.
    pub kkt_residual: f64,
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("k,clean_acc,corrupted_acc,kkt_residual\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.k, r.clean_acc, r.corrupted_acc, r.kkt_residual);
    }
    s
}

/// Mean KKT violation of the first CSC layer over the first `n` items.
pub fn first_layer_kkt(model: &mut SdNetLite, data: &Dataset, n: usize) -> Result<f64> {
    let first = model.csc_indices()[0];
    let n = n.min(data.len());
    let mut total = 0.0;
    for i in 0..n {
        let mut x = data.images.select(&[i]);
        for layer in &mut model.layers_mut()[..first] {
            x = layer.forward(&x, Mode::Eval)?;
        }
        let Layer::Csc(csc) = &mut model.layers_mut()[first] else {
            unreachable!("csc_indices points at CSC layers")
        };
        let z = csc.forward(&x)?;
        total += kkt_residual(csc.dict(), &x, &z, csc.lambda())?;
        csc.clear_cache();
    }
    Ok(total / n.max(1) as f64)
}

fn ablate_row(model: &mut SdNetLite, cfg: &RunConfig, k: usize, test: &Dataset, noisy: &Dataset) -> Result<AblateRow> {
    model.set_iters(k)?;
    Ok(AblateRow {
        k,
        clean_acc: evaluate(model, test, cfg.eval_batch)?.accuracy(),
        corrupted_acc: evaluate(model, noisy, cfg.eval_batch)?.accuracy(),
        kkt_residual: first_layer_kkt(model, test, 100)?,
    })
}

/// Number of FISTA iterations versus clean and corrupted accuracy. With a
/// model, each K only changes the unroll depth at test time; otherwise a
/// fresh model is trained per K under `out_dir/k<K>`.
pub fn ablate_k(
    cfg: &RunConfig,
    model: Option<&mut SdNetLite>,
    train: &Dataset,
    test: &Dataset,
    out_dir: &Path,
) -> Result<Vec<AblateRow>> {
    ensure!(!cfg.ablate_ks.is_empty(), "K list is empty");
    let test = limited(test, cfg.eval_limit);
    let level = Level::Severity(cfg.ablate_severity);
    let noisy = corrupt_dataset(&test, cfg.noise, level, cfg.seed.wrapping_add(20_000))?;
    let mut rows = Vec::new();
    match model {
        Some(model) => {
            let saved = model.iters();
            for &k in &cfg.ablate_ks {
                rows.push(ablate_row(model, cfg, k, &test, &noisy)?);
            }
            model.set_iters(saved)?;
        }
        None => {
            for &k in &cfg.ablate_ks {
                let mut c = cfg.clone();
                c.iters = k;
                let mut out = train_on(&c, train, &test, &out_dir.join(format!("k{k}")), false)?;
                rows.push(ablate_row(&mut out.model, &c, k, &test, &noisy)?);
            }
        }
    }
    Ok(rows)
}

pub struct VizOutcome {
    /// `psnr[i][l]` for image `i` reconstructed from CSC layer `l + 1`.
    pub psnr: Vec<Vec<f64>>,
    pub zero_fraction: f64,
    pub files: Vec<PathBuf>,
}

/// Writes inputs, per-layer reconstructions, renderable dictionary grids
/// and the first-layer sparsity histogram.
pub fn viz(model: &mut SdNetLite, data: &Dataset, upto: usize, count: usize, batch: usize, dir: &Path) -> Result<VizOutcome> {
    let depth = model.csc_indices().len();
    ensure!(upto >= 1 && upto <= depth, "layer {upto} outside the CSC depth 1..={depth}");
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut save = |name: String, img: &Image| -> Result<()> {
        let path = dir.join(name);
        img.save_ppm(&path).with_context(|| format!("writing {}", path.display()))?;
        files.push(path);
        Ok(())
    };
    let n = count.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let x = data.images.select(&idx);
    let mut table = vec![Vec::new(); n];
    for l in 1..=upto {
        let rec = reconstruct(model, &x, l)?;
        for (i, row) in table.iter_mut().enumerate() {
            let xi = x.select(&[i]);
            let ri = rec.select(&[i]);
            row.push(psnr(&xi, &ri)?);
            save(format!("recon_{i}_l{l}.ppm"), &Image::from_item(&rec, i)?)?;
        }
    }
    for i in 0..n {
        save(format!("input_{i}.ppm"), &Image::from_item(&x, i)?)?;
    }
    let dicts: Vec<ConvDictionary> = model.csc_layers().map(|l| l.dict().clone()).collect();
    for (j, d) in dicts.iter().enumerate() {
        if matches!(d.signal_channels(), 1 | 3) {
            save(format!("dict_l{}.ppm", j + 1), &dictionary_grid(d)?)?;
        }
    }
    let hist = sparsity_histogram(model, data, batch)?;
    let hist_path = dir.join("histogram.csv");
    fs::write(&hist_path, hist.to_csv())?;
    files.push(hist_path);
    for layer in model.csc_layers_mut() {
        layer.clear_cache();
    }
    Ok(VizOutcome {
        psnr: table,
        zero_fraction: hist.zero_fraction(),
        files,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub count: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub max_perturbation: f64,
    pub lambda: f64,
}

/// PGD on the first `attack_count` test images, optionally at a manually
/// chosen lambda for both the attack and the evaluation.
pub fn attack(model: &mut SdNetLite, cfg: &RunConfig, test: &Dataset) -> Result<(AttackReport, Tensor)> {
    let data = test.take(cfg.attack_count);
    let lambda = cfg.attack_lambda.unwrap_or(model.lambda());
    let pgd = PgdConfig {
        step: cfg.attack_step(),
        iters: cfg.attack_iters,
        ..PgdConfig::new(cfg.attack_norm, cfg.attack_eps, cfg.seed)
    };
    let batch = cfg.eval_batch;
    with_lambda(model, lambda, |m| {
        let mut adv_parts = Vec::new();
        let mut clean = 0;
        let mut robust = 0;
        for start in (0..data.len()).step_by(batch) {
            let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
            let x = data.images.select(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            clean += accuracy(&m.forward(&x, Mode::Eval)?.logits, &labels);
            let adv = pgd_attack(m, &x, &labels, &pgd)?;
            robust += accuracy(&m.forward(&adv, Mode::Eval)?.logits, &labels);
            adv_parts.push(adv);
        }
        for layer in m.csc_layers_mut() {
            layer.clear_cache();
        }
        let adv = Tensor::concat(&adv_parts)?;
        let n = data.len().max(1) as f64;
        Ok((
            AttackReport {
                count: data.len(),
                clean_acc: clean as f64 / n,
                robust_acc: robust as f64 / n,
                max_perturbation: max_perturbation(&adv, &data.images, cfg.attack_norm),
                lambda,
            },
            adv,
        ))
    })
    .map_err(Into::into)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub objective: f64,
    pub kkt_residual: f64,
    pub residual_norm: f64,
    pub zero_fraction: f64,
    pub psnr: f64,
}

/// Converts a decoded image to the dictionary's channel count (averaging
/// RGB to gray when needed).
pub fn image_tensor(img: &Image, channels: usize) -> Result<Tensor> {
    let (h, w) = (img.height, img.width);
    Ok(match (img.channels, channels) {
        (a, b) if a == b => Tensor::from_vec([1, a, h, w], img.data.clone())?,
        (3, 1) => Tensor::from_fn([1, 1, h, w], |[_, _, i, j]| (0..3).map(|c| img.get(c, i, j)).sum::<f64>() / 3.0),
        (1, 3) => Tensor::from_fn([1, 3, h, w], |[_, _, i, j]| img.get(0, i, j)),
        (a, b) => bail!("cannot map a {a}-channel image onto {b} dictionary channels"),
    })
}

/// Standalone lasso solve of one image against `dict`; returns the
/// reconstruction alongside the report.
pub fn solve(dict: &ConvDictionary, img: &Image, lambda: f64, iters: usize) -> Result<(SolveReport, Tensor)> {
    let x = image_tensor(img, dict.signal_channels())?;
    let cfg = cscnet_core::FistaConfig::new(lambda, iters);
    let trace = fista::solve(dict, &x, &cfg, None)?;
    let z = trace.output();
    let rec = x.sub(&trace.residual)?;
    Ok((
        SolveReport {
            objective: trace.objective,
            kkt_residual: kkt_residual(dict, &x, z, lambda)?,
            residual_norm: trace.residual.l2(),
            zero_fraction: z.count_zeros() as f64 / z.len().max(1) as f64,
            psnr: psnr(&x, &rec)?,
        },
        rec,
    ))
}
