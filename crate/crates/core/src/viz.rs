//! Reconstructions from deep codes, dictionary atom grids, PPM images and
//! feature-sparsity histograms.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::conv::ConvDictionary;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{Layer, Mode, SdNetLite};
use crate::tensor::Tensor;

/// A `(c, h, w)` image with `c` of 1 or 3 and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return invalid(format!("images need 1 or 3 channels, got {channels}"));
        }
        if data.len() != channels * height * width {
            return invalid("image data length does not match its shape");
        }
        Ok(Self {
            channels,
            height,
            width,
            data: data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect(),
        })
    }

    /// One batch item of a tensor, clamped to `[0, 1]`.
    pub fn from_item(t: &Tensor, item: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        Self::new(c, h, w, t.item(item).to_vec())
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Binary PPM (P6), grayscale replicated to RGB.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c };
                    out.push((self.get(src, i, j) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Parses a P6 file with maxval 255 into a 3-channel image.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("PPM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
        if body.len() != width * height * 3 {
            return Err(bad("pixel data length mismatch"));
        }
        let mut data = vec![0.0; 3 * width * height];
        for (p, rgb) in body.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * width * height + p] = rgb[c] as f64 / 255.0;
            }
        }
        Self::new(3, height, width, data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Peak signal-to-noise ratio for peak value 1, `10 log10(1 / MSE)`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.sub(b)?;
    let mse = diff.l2().powi(2) / diff.len().max(1) as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

fn upsample_nearest(t: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, th, tw] = t.shape();
    if (th, tw) == (h, w) {
        return t.clone();
    }
    Tensor::from_fn([n, c, h, w], |[b, ch, i, j]| t.get([b, ch, i * th / h, j * tw / w]))
}

/// Renders the code of the `upto`-th CSC layer (1-based) back into input
/// space by applying the dictionaries in reverse order. Layers between CSC
/// layers are skipped; spatial sizes lost to pooling are restored by
/// nearest-neighbour upsampling. A leading standardization is inverted.
pub fn reconstruct(model: &mut SdNetLite, x: &Tensor, upto: usize) -> Result<Tensor> {
    let depth = model.csc_indices().len();
    if upto == 0 || upto > depth {
        return invalid(format!("layer {upto} outside the CSC depth 1..={depth}"));
    }
    let mut cur = x.clone();
    let mut input_hw = Vec::new();
    let mut code = None;
    for layer in model.layers_mut() {
        if let Layer::Csc(_) = layer {
            input_hw.push((cur.shape()[2], cur.shape()[3]));
        }
        cur = layer.forward(&cur, Mode::Eval)?;
        if let Layer::Csc(_) = layer {
            if input_hw.len() == upto {
                code = Some(cur);
                break;
            }
        }
    }
    let mut cur = code.expect("loop stops at the requested layer");
    let dicts: Vec<ConvDictionary> = model.csc_layers().take(upto).map(|l| l.dict().clone()).collect();
    for (dict, &(h, w)) in dicts.iter().zip(&input_hw).rev() {
        let (zh, zw) = dict.code_hw(h, w);
        cur = dict.apply_sized(&upsample_nearest(&cur, zh, zw), (h, w))?;
    }
    let [_, _, h, w] = x.shape();
    cur = upsample_nearest(&cur, h, w);
    if let Some(Layer::Standardize(s)) = model.layers().first() {
        cur = s.invert(&cur);
    }
    Ok(cur)
}

/// Tiles every code channel's `(M, k, k)` atom, min-max normalized, into a
/// near-square grid with 1-pixel white separators. Unused cells are white.
pub fn dictionary_grid(dict: &ConvDictionary) -> Result<Image> {
    let (m, c, k) = (dict.signal_channels(), dict.code_channels(), dict.size());
    if m != 1 && m != 3 {
        return invalid(format!("cannot render atoms with {m} channels"));
    }
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (height, width) = (rows * k + rows - 1, cols * k + cols - 1);
    let mut data = vec![1.0; m * height * width];
    let kernel = dict.kernel();
    for atom in 0..c {
        let (r, q) = (atom / cols, atom % cols);
        let values: Vec<f64> = (0..m)
            .flat_map(|ch| (0..k * k).map(move |p| (ch, p)))
            .map(|(ch, p)| kernel.get([ch, atom, p / k, p % k]))
            .collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for ch in 0..m {
            for p in 0..k {
                for s in 0..k {
                    let v = values[(ch * k + p) * k + s];
                    let norm = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    let (y, x) = (r * (k + 1) + p, q * (k + 1) + s);
                    data[(ch * height + y) * width + x] = norm;
                }
            }
        }
    }
    Image::new(m, height, width, data)
}

pub const HISTOGRAM_BINS: usize = 101;

/// Histogram of non-zero values plus a separate exact-zero count.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `(left, right, count)` over `[-max|v|, max|v|]`.
    pub bins: Vec<(f64, f64, u64)>,
    pub zero_count: u64,
    pub total: u64,
}

impl Histogram {
    pub fn new(max_abs: f64) -> Self {
        let width = 2.0 * max_abs / HISTOGRAM_BINS as f64;
        let bins = (0..HISTOGRAM_BINS)
            .map(|i| (-max_abs + i as f64 * width, -max_abs + (i + 1) as f64 * width, 0))
            .collect();
        Self {
            bins,
            zero_count: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, values: &[f64]) {
        let n = self.bins.len();
        let lo = self.bins[0].0;
        let width = self.bins[0].1 - lo;
        for &v in values {
            self.total += 1;
            if v == 0.0 {
                self.zero_count += 1;
            } else if width > 0.0 {
                let i = (((v - lo) / width).floor().max(0.0) as usize).min(n - 1);
                self.bins[i].2 += 1;
            }
        }
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.zero_count as f64 / self.total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (l, r, c) in &self.bins {
            let _ = writeln!(s, "{l},{r},{c}");
        }
        s
    }
}

fn for_each_first_code(model: &mut SdNetLite, data: &Dataset, batch: usize, mut f: impl FnMut(&Tensor)) -> Result<()> {
    if batch == 0 {
        return invalid("batch size must be positive");
    }
    let first = *model
        .csc_indices()
        .first()
        .ok_or_else(|| Error::InvalidArgument("model has no CSC layer".into()))?;
    let n = data.len();
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let mut cur = data.images.select(&idx);
        for layer in &mut model.layers_mut()[..=first] {
            cur = layer.forward(&cur, Mode::Eval)?;
        }
        f(&cur);
    }
    if let Some(Layer::Csc(l)) = model.layers_mut().get_mut(first) {
        l.clear_cache();
    }
    Ok(())
}

/// Histogram of the first CSC layer's outputs over `data` (two passes: one
/// for the range, one for the counts).
pub fn sparsity_histogram(model: &mut SdNetLite, data: &Dataset, batch: usize) -> Result<Histogram> {
    let mut max_abs: f64 = 0.0;
    for_each_first_code(model, data, batch, |z| max_abs = max_abs.max(z.norms().linf))?;
    let mut hist = Histogram::new(max_abs);
    for_each_first_code(model, data, batch, |z| hist.add(z.data()))?;
    Ok(hist)
}
