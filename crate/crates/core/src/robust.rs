//! Residual-driven test-time lambda selection and PGD evaluation.
//!
//! Calibration corrupts a training subsample at several strengths, records
//! the mean CSC residual at the training lambda and the lambda that
//! maximizes accuracy, and fits lambda as an affine function of the
//! residual. At test time one pass at the training lambda measures the
//! residual, and a second pass runs at the fitted lambda.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{corrupt_with, Dataset, NoiseKind};
use crate::error::{invalid, Error, Result};
use crate::nn::{accuracy, cross_entropy, Mode, SdNetLite};
use crate::tensor::Tensor;

/// Aggregate numbers from one pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// Per-item residual averaged over CSC layers, then over items.
    pub mean_residual: f64,
    /// Fraction of exact zeros in the first CSC layer's output.
    pub zero_fraction: f64,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Eval-mode pass in batches of `batch` items.
pub fn evaluate(model: &mut SdNetLite, data: &Dataset, batch: usize) -> Result<EvalReport> {
    if batch == 0 {
        return invalid("batch size must be positive");
    }
    let n = data.len();
    let mut correct = 0;
    let mut residual_sum = 0.0;
    let mut zeros = 0usize;
    let mut entries = 0usize;
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let x = data.images.select(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let out = model.forward(&x, Mode::Eval)?;
        correct += accuracy(&out.logits, &labels);
        residual_sum += model.item_residuals().iter().sum::<f64>();
        if let Some(first) = model.csc_layers().next() {
            for t in first.last_traces() {
                zeros += t.output().count_zeros();
                entries += t.output().len();
            }
        }
    }
    for layer in model.csc_layers_mut() {
        layer.clear_cache();
    }
    Ok(EvalReport {
        correct,
        total: n,
        mean_residual: if n == 0 { 0.0 } else { residual_sum / n as f64 },
        zero_fraction: if entries == 0 { 0.0 } else { zeros as f64 / entries as f64 },
    })
}

/// Runs `f` with a temporarily different shared lambda and restores the
/// previous value afterwards.
pub fn with_lambda<T>(model: &mut SdNetLite, lambda: f64, f: impl FnOnce(&mut SdNetLite) -> Result<T>) -> Result<T> {
    let saved = model.lambda();
    model.set_lambda(lambda)?;
    let out = f(model);
    model.set_lambda(saved)?;
    out
}

/// Accuracy at each lambda of `grid`.
pub fn lambda_sweep(model: &mut SdNetLite, data: &Dataset, grid: &[f64], batch: usize) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&l| with_lambda(model, l, |m| Ok((l, evaluate(m, data, batch)?.accuracy()))))
        .collect()
}

/// Corruption strength used during calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Clean,
    /// Tabulated severity 0..=4.
    Severity(usize),
}

impl Level {
    pub fn param(self, kind: NoiseKind) -> Result<f64> {
        match self {
            Level::Clean => Ok(kind.clean_param()),
            Level::Severity(s) => kind.severity_param(s),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Clean => f.write_str("clean"),
            Level::Severity(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "clean" => Ok(Level::Clean),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&v| v <= 4)
                .map(Level::Severity)
                .ok_or_else(|| Error::InvalidArgument(format!("bad severity level {other:?}"))),
        }
    }
}

/// Corrupts a whole dataset at `level`.
pub fn corrupt_dataset(data: &Dataset, kind: NoiseKind, level: Level, seed: u64) -> Result<Dataset> {
    Dataset::new(
        corrupt_with(&data.images, kind, level.param(kind)?, seed)?,
        data.labels.clone(),
        format!("{}-{kind}-{level}", data.name),
    )
}

/// Affine map from residual to lambda, clamped to the sweep range.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaCalibration {
    pub kind: NoiseKind,
    /// `(lambda_c, r_c)` per calibration level.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl LambdaCalibration {
    /// Least-squares fit of `lambda = slope * r + intercept`. When every
    /// residual is the same the fit is the constant mean lambda.
    pub fn fit(kind: NoiseKind, points: Vec<(f64, f64)>, lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if points.len() < 2 {
            return invalid("a lambda fit needs at least two points");
        }
        if !(lambda_min > 0.0 && lambda_min <= lambda_max) {
            return invalid("lambda range must be positive and ordered");
        }
        let n = points.len() as f64;
        let mean_l = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_r = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.1 - mean_r).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.1 - mean_r) * (p.0 - mean_l)).sum();
        let slope = if sxx > f64::EPSILON * mean_r.abs().max(1.0).powi(2) { sxy / sxx } else { 0.0 };
        Ok(Self {
            kind,
            points,
            slope,
            intercept: mean_l - slope * mean_r,
            lambda_min,
            lambda_max,
        })
    }

    pub fn lambda_for(&self, residual: f64) -> f64 {
        (self.slope * residual + self.intercept).clamp(self.lambda_min, self.lambda_max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind={}", self.kind);
        let _ = writeln!(s, "slope={}", self.slope);
        let _ = writeln!(s, "intercept={}", self.intercept);
        let _ = writeln!(s, "lambda_min={}", self.lambda_min);
        let _ = writeln!(s, "lambda_max={}", self.lambda_max);
        for (l, r) in &self.points {
            let _ = writeln!(s, "point={l},{r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("calibration record: {what}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad(&format!("bad number {v:?}")));
        let mut kind = None;
        let (mut slope, mut intercept, mut lo, mut hi) = (None, None, None, None);
        let mut points = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("line without '='"))?;
            match k.trim() {
                "kind" => kind = Some(v.trim().parse::<NoiseKind>()?),
                "slope" => slope = Some(num(v)?),
                "intercept" => intercept = Some(num(v)?),
                "lambda_min" => lo = Some(num(v)?),
                "lambda_max" => hi = Some(num(v)?),
                "point" => {
                    let (a, b) = v.split_once(',').ok_or_else(|| bad("point needs two values"))?;
                    points.push((num(a)?, num(b)?));
                }
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        Ok(Self {
            kind: kind.ok_or_else(|| bad("missing kind"))?,
            points,
            slope: slope.ok_or_else(|| bad("missing slope"))?,
            intercept: intercept.ok_or_else(|| bad("missing intercept"))?,
            lambda_min: lo.ok_or_else(|| bad("missing lambda_min"))?,
            lambda_max: hi.ok_or_else(|| bad("missing lambda_max"))?,
        })
    }
}

/// Per-level calibration measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelCurve {
    pub level: Level,
    /// Mean residual at the training lambda.
    pub residual: f64,
    /// `(lambda, accuracy)` over the sweep grid.
    pub accuracies: Vec<(f64, f64)>,
    pub best_lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRun {
    pub calibration: LambdaCalibration,
    pub curves: Vec<LevelCurve>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSettings {
    pub kind: NoiseKind,
    pub levels: Vec<Level>,
    /// Ascending sweep grid.
    pub lambdas: Vec<f64>,
    pub subsample: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Index of the first maximum.
fn first_argmax(values: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.1 > values[best].1 {
            best = i;
        }
    }
    best
}

/// Sweeps lambda on corrupted training subsamples and fits the residual map.
/// The model's lambda is treated as the training value and is left as found.
pub fn calibrate(model: &mut SdNetLite, train: &Dataset, s: &CalibrationSettings) -> Result<CalibrationRun> {
    if s.lambdas.is_empty() {
        return invalid("lambda grid is empty");
    }
    if s.lambdas.windows(2).any(|w| w[0] >= w[1]) || !(s.lambdas[0] > 0.0) {
        return invalid("lambda grid must be positive and strictly ascending");
    }
    if s.levels.len() < 2 {
        return invalid("calibration needs at least two levels");
    }
    let lambda0 = model.lambda();
    let subset = train.subsample(s.subsample, s.seed);
    let mut curves = Vec::with_capacity(s.levels.len());
    for (i, &level) in s.levels.iter().enumerate() {
        let data = corrupt_dataset(&subset, s.kind, level, s.seed.wrapping_add(1 + i as u64))?;
        let residual = with_lambda(model, lambda0, |m| Ok(evaluate(m, &data, s.batch)?.mean_residual))?;
        let accuracies = lambda_sweep(model, &data, &s.lambdas, s.batch)?;
        let best_lambda = accuracies[first_argmax(&accuracies)].0;
        curves.push(LevelCurve {
            level,
            residual,
            accuracies,
            best_lambda,
        });
    }
    let points = curves.iter().map(|c| (c.best_lambda, c.residual)).collect();
    let calibration = LambdaCalibration::fit(s.kind, points, s.lambdas[0], *s.lambdas.last().expect("non-empty"))?;
    Ok(CalibrationRun { calibration, curves })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveReport {
    /// Accuracy of the first pass at the training lambda.
    pub fixed_accuracy: f64,
    pub accuracy: f64,
    pub lambda_used: f64,
    pub r_test: f64,
}

/// Two-pass evaluation: measure the residual at the training lambda, then
/// evaluate at the calibrated lambda for that residual.
pub fn adaptive_eval(model: &mut SdNetLite, test: &Dataset, cal: &LambdaCalibration, batch: usize) -> Result<AdaptiveReport> {
    let first = evaluate(model, test, batch)?;
    let lambda_used = cal.lambda_for(first.mean_residual);
    let accuracy = if lambda_used == model.lambda() {
        first.accuracy()
    } else {
        with_lambda(model, lambda_used, |m| Ok(evaluate(m, test, batch)?.accuracy()))?
    };
    Ok(AdaptiveReport {
        fixed_accuracy: first.accuracy(),
        accuracy,
        lambda_used,
        r_test: first.mean_residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackNorm {
    Linf,
    L2,
}

impl FromStr for AttackNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(AttackNorm::Linf),
            "l2" => Ok(AttackNorm::L2),
            other => invalid(format!("unknown attack norm {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    pub norm: AttackNorm,
    pub eps: f64,
    pub step: f64,
    pub iters: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl PgdConfig {
    /// Step `eps / 4`, 20 iterations, one random start.
    pub fn new(norm: AttackNorm, eps: f64, seed: u64) -> Self {
        Self {
            norm,
            eps,
            step: eps / 4.0,
            iters: 20,
            random_start: true,
            seed,
        }
    }
}

/// Projects `x` onto `{|x - x0|_inf <= eps} ∩ [0,1]` so that the
/// constraints hold when re-checked in floating point.
fn project_linf(x: &mut [f64], x0: &[f64], eps: f64) {
    for (v, &o) in x.iter_mut().zip(x0) {
        let mut p = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        while p - o > eps {
            p = p.next_down();
        }
        while o - p > eps {
            p = p.next_up();
        }
        *v = p;
    }
}

fn l2_dist(x: &[f64], x0: &[f64]) -> f64 {
    x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Projects onto the L2 ball around `x0`, then the box. Clamping towards a
/// point inside the box only shrinks the perturbation, so the ball still
/// holds; the shrink loop absorbs rounding.
fn project_l2(x: &mut [f64], x0: &[f64], eps: f64) {
    loop {
        let norm = l2_dist(x, x0);
        if norm <= eps {
            break;
        }
        let scale = eps / norm * (1.0 - 1e-12);
        for (v, &o) in x.iter_mut().zip(x0) {
            *v = o + (*v - o) * scale;
        }
    }
    for v in x.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Gradient of the mean cross-entropy with respect to the input, in eval mode.
pub fn input_gradient(model: &mut SdNetLite, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let out = model.forward(x, Mode::Eval)?;
    let (_, g) = cross_entropy(&out.logits, labels)?;
    Ok(model.backward(&g)?.input)
}

/// Projected gradient ascent on the cross-entropy inside a per-image
/// `eps`-ball intersected with `[0, 1]`.
pub fn pgd_attack(model: &mut SdNetLite, images: &Tensor, labels: &[usize], cfg: &PgdConfig) -> Result<Tensor> {
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return invalid(format!("eps must be positive, got {}", cfg.eps));
    }
    if !(cfg.step > 0.0) {
        return invalid("attack step must be positive");
    }
    let n = images.shape()[0];
    let mut adv = images.clone();
    if cfg.random_start {
        for b in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64);
            let item = adv.item_mut(b);
            match cfg.norm {
                AttackNorm::Linf => item.iter_mut().for_each(|v| *v += rng.random_range(-cfg.eps..=cfg.eps)),
                AttackNorm::L2 => {
                    let dir: Vec<f64> = item.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let radius = cfg.eps * rng.random::<f64>().powf(1.0 / item.len() as f64);
                    item.iter_mut().zip(&dir).for_each(|(v, d)| *v += radius * d / norm);
                }
            }
        }
    }
    let project = |adv: &mut Tensor| {
        for b in 0..n {
            match cfg.norm {
                AttackNorm::Linf => project_linf(adv.item_mut(b), images.item(b), cfg.eps),
                AttackNorm::L2 => project_l2(adv.item_mut(b), images.item(b), cfg.eps),
            }
        }
    };
    project(&mut adv);
    for _ in 0..cfg.iters {
        let g = input_gradient(model, &adv, labels)?;
        for b in 0..n {
            let gi = g.item(b);
            match cfg.norm {
                AttackNorm::Linf => {
                    for (v, &d) in adv.item_mut(b).iter_mut().zip(gi) {
                        *v += cfg.step * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                AttackNorm::L2 => {
                    let norm = gi.iter().map(|d| d * d).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for (v, &d) in adv.item_mut(b).iter_mut().zip(gi) {
                            *v += cfg.step * d / norm;
                        }
                    }
                }
            }
        }
        project(&mut adv);
    }
    for layer in model.csc_layers_mut() {
        layer.clear_cache();
    }
    Ok(adv)
}

/// Largest per-image perturbation size in the attack norm.
pub fn max_perturbation(adv: &Tensor, clean: &Tensor, norm: AttackNorm) -> f64 {
    (0..adv.shape()[0])
        .map(|b| match norm {
            AttackNorm::Linf => adv
                .item(b)
                .iter()
                .zip(clean.item(b))
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max),
            AttackNorm::L2 => l2_dist(adv.item(b), clean.item(b)),
        })
        .fold(0.0, f64::max)
}
