//! Dataset loading (MNIST IDX, CIFAR-10 binary), additive corruptions and
//! training augmentation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return invalid(format!("{} images but {} labels", images.shape()[0], labels.len()));
        }
        Ok(Self {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Item shape `(c, h, w)`.
    pub fn item_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        }
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// A seeded random subset of `n` distinct items (or all of them).
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an IDX image file (magic 2051) into `(n, 1, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 {
        return Err(Error::Format("IDX image header truncated".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != 2051 {
        return Err(Error::Format(format!("bad IDX image magic {magic}")));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, header promises {need}",
            body.len()
        )));
    }
    Tensor::from_vec([n, 1, rows, cols], body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Parses an IDX label file (magic 2049).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(Error::Format("IDX label header truncated".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != 2049 {
        return Err(Error::Format(format!("bad IDX label magic {magic}")));
    }
    let n = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX label body has {} bytes, header promises {n}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads MNIST from the four uncompressed IDX files in `dir`.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = parse_idx_images(&read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?)?;
    let labels = parse_idx_labels(&read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format(format!(
            "MNIST count mismatch: {} images, {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    Dataset::new(images, labels, format!("mnist-{prefix}"))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses concatenated CIFAR-10 binary records (label byte + 3072 CHW pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR-10 label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Tensor::from_vec([n, 3, 32, 32], data)?, labels))
}

/// Loads CIFAR-10 from the binary batches in `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let (x, y) = parse_cifar10(&read(&dir.join(f))?)?;
        if x.shape()[0] != 10_000 {
            return Err(Error::Format(format!("{f}: {} records, expected 10000", x.shape()[0])));
        }
        images.push(x);
        labels.extend(y);
    }
    let name = match split {
        Split::Train => "cifar10-train",
        Split::Test => "cifar10-test",
    };
    Dataset::new(Tensor::concat(&images)?, labels, name)
}

/// Per-channel mean and (population) standard deviation.
pub fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = images.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for &v in &images.data()[(b * c + ch) * plane..][..plane] {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= count;
            (s / count - *m * *m).max(0.0).sqrt()
        })
        .collect();
    (mean, std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Shot,
    Speckle,
    Impulse,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::Gaussian, NoiseKind::Shot, NoiseKind::Speckle, NoiseKind::Impulse];

    /// Strength parameter at severity 0..=4: sigma for gaussian and
    /// speckle, photon count for shot, replaced fraction for impulse.
    pub fn severity_param(self, severity: usize) -> Result<f64> {
        const GAUSSIAN: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
        const SHOT: [f64; 5] = [500.0, 250.0, 100.0, 75.0, 50.0];
        const SPECKLE: [f64; 5] = [0.06, 0.1, 0.12, 0.16, 0.2];
        const IMPULSE: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.07];
        let table = match self {
            NoiseKind::Gaussian => &GAUSSIAN,
            NoiseKind::Shot => &SHOT,
            NoiseKind::Speckle => &SPECKLE,
            NoiseKind::Impulse => &IMPULSE,
        };
        table
            .get(severity)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("severity {severity} outside 0..=4")))
    }

    /// Strength at which the corruption is the identity.
    pub fn clean_param(self) -> f64 {
        match self {
            NoiseKind::Shot => f64::INFINITY,
            _ => 0.0,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Shot => "shot",
            NoiseKind::Speckle => "speckle",
            NoiseKind::Impulse => "impulse",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "shot" => Ok(NoiseKind::Shot),
            "speckle" => Ok(NoiseKind::Speckle),
            "impulse" => Ok(NoiseKind::Impulse),
            other => invalid(format!("unknown noise kind {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub severity: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn param(&self) -> Result<f64> {
        self.kind.severity_param(self.severity)
    }
}

/// Applies a tabulated corruption.
pub fn corrupt(images: &Tensor, spec: NoiseSpec) -> Result<Tensor> {
    corrupt_with(images, spec.kind, spec.param()?, spec.seed)
}

/// Unclamped corruption of one pixel value.
fn perturb(kind: NoiseKind, param: f64, v: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    match kind {
        NoiseKind::Gaussian => v + param * normal.sample(rng),
        NoiseKind::Speckle => v + v * param * normal.sample(rng),
        NoiseKind::Shot => {
            let rate = v * param;
            if rate > 0.0 {
                Poisson::new(rate).expect("positive finite rate").sample(rng) / param
            } else {
                0.0
            }
        }
        NoiseKind::Impulse => {
            if rng.random::<f64>() < param {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        }
    }
}

/// Applies `kind` at an explicit strength, clamping to `[0, 1]`. Each
/// image draws from its own stream of the seeded generator, so results do
/// not depend on batch composition order.
pub fn corrupt_with(images: &Tensor, kind: NoiseKind, param: f64, seed: u64) -> Result<Tensor> {
    corrupt_items(images, kind, param, seed, true)
}

fn corrupt_items(images: &Tensor, kind: NoiseKind, param: f64, seed: u64, clamp: bool) -> Result<Tensor> {
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return invalid("corruption input must lie in [0, 1]");
    }
    let valid = match kind {
        NoiseKind::Gaussian | NoiseKind::Speckle => param >= 0.0 && param.is_finite(),
        NoiseKind::Shot => param > 0.0,
        NoiseKind::Impulse => (0.0..=1.0).contains(&param),
    };
    if !valid {
        return invalid(format!("invalid {kind} strength {param}"));
    }
    if param == kind.clean_param() {
        return Ok(images.clone());
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = images.clone();
    for b in 0..images.shape()[0] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        for v in out.item_mut(b) {
            let p = perturb(kind, param, *v, &mut rng, &normal);
            *v = if clamp { p.clamp(0.0, 1.0) } else { p };
        }
    }
    Ok(out)
}

/// The corruption without the final clamp, for checking noise statistics.
pub fn corrupt_unclamped(images: &Tensor, kind: NoiseKind, param: f64, seed: u64) -> Result<Tensor> {
    corrupt_items(images, kind, param, seed, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentSpec {
    pub pad_crop: usize,
    pub hflip: bool,
}

/// Per-image random shift and flip decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: isize,
    pub dx: isize,
    pub flip: bool,
}

impl AugmentSpec {
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        let p = self.pad_crop as i64;
        AugmentDraw {
            dy: rng.random_range(-p..=p) as isize,
            dx: rng.random_range(-p..=p) as isize,
            flip: self.hflip && rng.random::<bool>(),
        }
    }
}

/// Shifts one image by `(dy, dx)` with zero fill (pad-then-crop) and
/// optionally mirrors it horizontally.
pub fn apply_draw(images: &Tensor, item: usize, draw: AugmentDraw) -> Vec<f64> {
    let [_, c, h, w] = images.shape();
    let src = images.item(item);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize + draw.dy;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let jj = if draw.flip { w - 1 - j } else { j };
                let sj = jj as isize + draw.dx;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                out[(ch * h + i) * w + j] = src[(ch * h + si as usize) * w + sj as usize];
            }
        }
    }
    out
}

pub fn augment(images: &Tensor, spec: AugmentSpec, seed: u64) -> Tensor {
    let mut out = images.zeros_like();
    for b in 0..images.shape()[0] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let draw = spec.draw(&mut rng);
        out.item_mut(b).copy_from_slice(&apply_draw(images, b, draw));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Tensor {
        Tensor::from_fn([n, 1, 6, 6], |[b, _, i, j]| ((b + i * 6 + j) % 11) as f64 / 10.0)
    }

    #[test]
    fn zero_strength_is_identity() {
        let x = ramp(3);
        for kind in NoiseKind::ALL {
            assert_eq!(corrupt_with(&x, kind, kind.clean_param(), 1).unwrap(), x, "{kind}");
        }
    }

    #[test]
    fn full_impulse_gives_binary_pixels() {
        let out = corrupt_with(&ramp(4), NoiseKind::Impulse, 1.0, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn corruption_is_seeded_and_clamped() {
        let x = ramp(5);
        for kind in NoiseKind::ALL {
            for sev in 0..5 {
                let spec = NoiseSpec { kind, severity: sev, seed: 9 };
                let a = corrupt(&x, spec).unwrap();
                assert_eq!(a, corrupt(&x, spec).unwrap());
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(corrupt(&x, NoiseSpec { kind: NoiseKind::Shot, severity: 5, seed: 0 }).is_err());
    }

    #[test]
    fn per_image_streams_ignore_batch_order() {
        let x = ramp(4);
        let full = corrupt_with(&x, NoiseKind::Gaussian, 0.1, 7).unwrap();
        let first = corrupt_with(&x.select(&[0]), NoiseKind::Gaussian, 0.1, 7).unwrap();
        assert_eq!(full.item(0), first.item(0));
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let x = Tensor::filled([1, 1, 2, 2], 1.5);
        assert!(corrupt_with(&x, NoiseKind::Gaussian, 0.1, 0).is_err());
    }

    #[test]
    fn augment_contracts() {
        let x = ramp(3);
        let none = AugmentSpec { pad_crop: 0, hflip: false };
        assert_eq!(augment(&x, none, 4), x);
        let full = AugmentSpec { pad_crop: 4, hflip: true };
        assert_eq!(augment(&x, full, 4).shape(), x.shape());
        let flip = AugmentDraw { dy: 0, dx: 0, flip: true };
        let once = Tensor::from_vec([1, 1, 6, 6], apply_draw(&x, 0, flip)).unwrap();
        assert_eq!(apply_draw(&once, 0, flip), x.item(0));
    }

    #[test]
    fn idx_parsing_contracts() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102]);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert!(parse_idx_images(&img[..19]).is_err());
        let mut bad = img.clone();
        bad[3] = 1;
        assert!(parse_idx_images(&bad).is_err());
        assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap(), vec![7, 3]);
        assert!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 3]).is_err());
    }

    #[test]
    fn cifar_parsing_contracts() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1] = 255;
        let (x, y) = parse_cifar10(&bytes).unwrap();
        assert_eq!(x.shape(), [2, 3, 32, 32]);
        assert_eq!(y, vec![0, 9]);
        assert_eq!(x.get([1, 0, 0, 0]), 1.0);
        assert!(parse_cifar10(&bytes[..CIFAR_RECORD + 5]).is_err());
        bytes[0] = 10;
        assert!(parse_cifar10(&bytes).is_err());
    }

    #[test]
    fn channel_stats_of_constant_image() {
        let (m, s) = channel_stats(&Tensor::filled([2, 3, 4, 4], 0.25));
        assert_eq!(m, vec![0.25; 3]);
        assert!(s.iter().all(|v| v.abs() < 1e-12));
    }
}
