//! Flat `key=value` run configuration.

use std::env;
use std::fmt;
use std::path::PathBuf;

use anyhow::{anyhow, bail, ensure, Context, Result};
use cscnet_core::data::{AugmentSpec, NoiseKind};
use cscnet_core::nn::{Schedule, SgdConfig, REFERENCE_ARCH};
use cscnet_core::robust::{AttackNorm, Level};
use cscnet_core::FistaConfig;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "CSCNET_DATA";

pub const CIFAR_ARCH: &str =
    "std,csc:64:3,bn,relu,maxpool:2,csc:128:3,bn,relu,maxpool:2,csc:256:3,bn,relu,avgpool:8,flatten,linear:10";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    MultiStep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Overrides `$CSCNET_DATA/<dataset dir>`.
    pub data_dir: Option<PathBuf>,
    pub arch: String,
    pub lambda: f64,
    pub iters: usize,
    pub epochs: usize,
    pub batch: usize,
    pub eval_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub seed: u64,
    pub augment_pad: usize,
    pub augment_flip: bool,
    /// Use only the first `n` training / test items (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub noise: NoiseKind,
    pub levels: Vec<Level>,
    pub lambdas: Vec<f64>,
    pub subsample: usize,
    pub eval_limit: usize,
    pub attack_norm: AttackNorm,
    pub attack_eps: f64,
    /// Defaults to `eps / 4`.
    pub attack_step: Option<f64>,
    pub attack_iters: usize,
    pub attack_count: usize,
    pub attack_lambda: Option<f64>,
    pub ablate_ks: Vec<usize>,
    pub ablate_severity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: None,
            arch: REFERENCE_ARCH.to_string(),
            lambda: 0.1,
            iters: 2,
            epochs: 5,
            batch: 128,
            eval_batch: 500,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            schedule: ScheduleKind::Cosine,
            milestones: Vec::new(),
            gamma: 0.1,
            seed: 0,
            augment_pad: 0,
            augment_flip: false,
            train_limit: 0,
            test_limit: 0,
            noise: NoiseKind::Gaussian,
            levels: (0..5).map(Level::Severity).collect(),
            lambdas: linspace(0.1, 1.5, 15),
            subsample: 2000,
            eval_limit: 0,
            attack_norm: AttackNorm::Linf,
            attack_eps: 0.1,
            attack_step: None,
            attack_iters: 20,
            attack_count: 500,
            attack_lambda: None,
            ablate_ks: vec![2, 4, 8],
            ablate_severity: 2,
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| f(s.trim())).collect()
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.parse::<T>().with_context(|| format!("cannot parse {s:?}"))
}

fn boolean(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("expected a boolean, got {s:?}"),
    }
}

fn optional<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
    if s.is_empty() || s == "none" {
        Ok(None)
    } else {
        f(s).map(Some)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The longer CIFAR-10 recipe: 220 epochs, crop-and-flip augmentation
    /// and a three-stage CSC network.
    pub fn cifar_recipe() -> Self {
        Self {
            dataset: DatasetKind::Cifar10,
            arch: CIFAR_ARCH.to_string(),
            epochs: 220,
            augment_pad: 4,
            augment_flip: true,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let res: Result<()> = (|| {
            match key.trim() {
                "dataset" => {
                    self.dataset = match v {
                        "mnist" => DatasetKind::Mnist,
                        "cifar10" => DatasetKind::Cifar10,
                        _ => bail!("unknown dataset {v:?}"),
                    }
                }
                "data_dir" => self.data_dir = optional(v, |s| Ok(PathBuf::from(s)))?,
                "arch" => self.arch = v.to_string(),
                "lambda" => self.lambda = num(v)?,
                "iters" => self.iters = num(v)?,
                "epochs" => self.epochs = num(v)?,
                "batch" => self.batch = num(v)?,
                "eval_batch" => self.eval_batch = num(v)?,
                "lr" => self.lr = num(v)?,
                "momentum" => self.momentum = num(v)?,
                "nesterov" => self.nesterov = boolean(v)?,
                "weight_decay" => self.weight_decay = num(v)?,
                "schedule" => {
                    self.schedule = match v {
                        "constant" => ScheduleKind::Constant,
                        "cosine" => ScheduleKind::Cosine,
                        "multistep" => ScheduleKind::MultiStep,
                        _ => bail!("unknown schedule {v:?}"),
                    }
                }
                "milestones" => self.milestones = parse_list(v, num)?,
                "gamma" => self.gamma = num(v)?,
                "seed" => self.seed = num(v)?,
                "augment_pad" => self.augment_pad = num(v)?,
                "augment_flip" => self.augment_flip = boolean(v)?,
                "train_limit" => self.train_limit = num(v)?,
                "test_limit" => self.test_limit = num(v)?,
                "noise" => self.noise = v.parse()?,
                "levels" => self.levels = parse_list(v, |s| Ok(s.parse()?))?,
                "lambdas" => {
                    self.lambdas = match v.split(':').collect::<Vec<_>>()[..] {
                        [a, b, n] => linspace(num(a)?, num(b)?, num(n)?),
                        _ => parse_list(v, num)?,
                    }
                }
                "subsample" => self.subsample = num(v)?,
                "eval_limit" => self.eval_limit = num(v)?,
                "attack_norm" => self.attack_norm = v.parse()?,
                "attack_eps" => self.attack_eps = num(v)?,
                "attack_step" => self.attack_step = optional(v, num)?,
                "attack_iters" => self.attack_iters = num(v)?,
                "attack_count" => self.attack_count = num(v)?,
                "attack_lambda" => self.attack_lambda = optional(v, num)?,
                "ablate_ks" => self.ablate_ks = parse_list(v, num)?,
                "ablate_severity" => self.ablate_severity = num(v)?,
                other => bail!("unknown config key {other:?}"),
            }
            Ok(())
        })();
        res.with_context(|| format!("config key {key:?}"))
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", n + 1))?;
            self.set(k, v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |o: &Option<f64>| o.map_or("none".to_string(), |v| v.to_string());
        let schedule = match self.schedule {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::MultiStep => "multistep",
        };
        let norm = match self.attack_norm {
            AttackNorm::Linf => "linf",
            AttackNorm::L2 => "l2",
        };
        [
            ("dataset", self.dataset.to_string()),
            ("data_dir", self.data_dir.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("arch", self.arch.clone()),
            ("lambda", self.lambda.to_string()),
            ("iters", self.iters.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("nesterov", self.nesterov.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("schedule", schedule.to_string()),
            ("milestones", join(&self.milestones)),
            ("gamma", self.gamma.to_string()),
            ("seed", self.seed.to_string()),
            ("augment_pad", self.augment_pad.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("noise", self.noise.to_string()),
            ("levels", join(&self.levels)),
            ("lambdas", join(&self.lambdas)),
            ("subsample", self.subsample.to_string()),
            ("eval_limit", self.eval_limit.to_string()),
            ("attack_norm", norm.to_string()),
            ("attack_eps", self.attack_eps.to_string()),
            ("attack_step", opt(&self.attack_step)),
            ("attack_iters", self.attack_iters.to_string()),
            ("attack_count", self.attack_count.to_string()),
            ("attack_lambda", opt(&self.attack_lambda)),
            ("ablate_ks", join(&self.ablate_ks)),
            ("ablate_severity", self.ablate_severity.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Rebuilds a config from stored pairs, ignoring keys it does not know.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let known: Vec<String> = cfg.to_pairs().into_iter().map(|(k, _)| k).collect();
        for (k, v) in pairs {
            if known.contains(k) {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fista().validate()?;
        self.sgd().validate()?;
        ensure!(self.batch > 0 && self.eval_batch > 0, "batch sizes must be positive");
        ensure!(!self.lambdas.is_empty(), "lambda grid is empty");
        ensure!(
            self.lambdas.windows(2).all(|w| w[0] < w[1]) && self.lambdas[0] > 0.0,
            "lambda grid must be positive and strictly ascending"
        );
        ensure!(self.levels.len() >= 2, "at least two corruption levels are needed");
        ensure!(self.subsample > 0, "subsample must be positive");
        ensure!(self.attack_eps.is_finite() && self.attack_eps > 0.0, "attack_eps must be positive");
        if let Some(s) = self.attack_step {
            ensure!(s.is_finite() && s > 0.0, "attack_step must be positive");
        }
        if let Some(l) = self.attack_lambda {
            ensure!(l.is_finite() && l >= 0.0, "attack_lambda must be non-negative");
        }
        ensure!(self.attack_iters > 0 && self.attack_count > 0, "attack_iters and attack_count must be positive");
        ensure!(!self.ablate_ks.is_empty(), "ablate_ks is empty");
        ensure!(self.ablate_ks.iter().all(|&k| k > 0), "ablate_ks entries must be positive");
        ensure!(self.ablate_severity <= 4, "ablate_severity must be in 0..=4");
        ensure!(
            self.schedule != ScheduleKind::MultiStep || !self.milestones.is_empty(),
            "multistep schedule needs milestones"
        );
        Ok(())
    }

    pub fn fista(&self) -> FistaConfig {
        FistaConfig::new(self.lambda, self.iters)
    }

    pub fn sgd(&self) -> SgdConfig {
        let schedule = match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Cosine => Schedule::Cosine {
                total_epochs: self.epochs.max(1) as f64,
            },
            ScheduleKind::MultiStep => Schedule::MultiStep {
                milestones: self.milestones.clone(),
                gamma: self.gamma,
            },
        };
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            schedule,
        }
    }

    pub fn augment(&self) -> Option<AugmentSpec> {
        (self.augment_pad > 0 || self.augment_flip).then_some(AugmentSpec {
            pad_crop: self.augment_pad,
            hflip: self.augment_flip,
        })
    }

    pub fn data_path(&self) -> PathBuf {
        match &self.data_dir {
            Some(p) => p.clone(),
            None => {
                let root = env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
                root.join(self.dataset.dir_name())
            }
        }
    }

    pub fn attack_step(&self) -> f64 {
        self.attack_step.unwrap_or(self.attack_eps / 4.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let mut cfg = RunConfig::cifar_recipe();
        cfg.apply_text("# comment\nlambda=0.25\nlambdas=0.1:0.5:5\nattack_lambda=0.3\nmilestones=1.5,3\n").unwrap();
        let back = RunConfig::from_pairs(&cfg.to_pairs()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.lambdas.len(), 5);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("lambda", "abc").is_err());
        assert!(cfg.set("colour", "red").is_err());
        assert!(cfg.apply_text("lambda 0.1").is_err());
        cfg.set("lambdas", "0.5,0.2").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("batch", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "-1").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("epochs=3\nseed=4").unwrap();
        cfg.apply_overrides(&["epochs=1"]).unwrap();
        assert_eq!((cfg.epochs, cfg.seed), (1, 4));
    }
}
