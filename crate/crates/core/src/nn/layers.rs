use crate::conv::ConvDictionary;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

use super::Mode;

fn missing_cache() -> Error {
    Error::NoForwardCache
}

/// Fixed per-channel `(x - mean) / std` applied to raw pixels.
#[derive(Clone, Debug)]
pub struct Standardize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardize {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.mean.len() {
            return invalid(format!("standardize expects {} channels, got {c}", self.mean.len()));
        }
        let mut out = x.clone();
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                out.data_mut()[(b * c + ch) * plane..][..plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v - m) / s);
            }
        }
        Ok(out)
    }

    /// Inverse map back to pixel space.
    pub fn invert(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let mut out = x.clone();
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c.min(self.mean.len()) {
                let (m, s) = (self.mean[ch], self.std[ch]);
                out.data_mut()[(b * c + ch) * plane..][..plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * s + m);
            }
        }
        out
    }

    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = grad.shape();
        let mut out = grad.clone();
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c {
                let s = self.std[ch];
                out.data_mut()[(b * c + ch) * plane..][..plane]
                    .iter_mut()
                    .for_each(|v| *v /= s);
            }
        }
        Ok(out)
    }
}

/// Ordinary 2-D convolution (cross-correlation) with "same" padding and a
/// bias, weight layout `(out, in, k, k)`.
///
/// Runs on the dictionary machinery: a correlation with `W` is the adjoint
/// operator of the dictionary whose atoms are `W` flipped, with signal and
/// code channels swapped.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let [out_ch, _, k, kw] = weight.shape();
        if k != kw || k % 2 == 0 || stride == 0 {
            return invalid("conv needs odd square kernels and a positive stride");
        }
        if bias.len() != out_ch {
            return invalid("conv bias length must equal output channels");
        }
        Ok(Self {
            weight,
            bias,
            stride,
            input: None,
        })
    }

    fn as_dictionary(&self) -> Result<ConvDictionary> {
        let [o, i, k, _] = self.weight.shape();
        let w = &self.weight;
        let kernel = Tensor::from_fn([i, o, k, k], |[ci, co, p, q]| w.get([co, ci, k - 1 - p, k - 1 - q]));
        ConvDictionary::new(kernel, self.stride)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.as_dictionary()?.adjoint(x)?;
        let [n, c, h, w] = y.shape();
        let plane = h * w;
        for b in 0..n {
            for ch in 0..c {
                let bias = self.bias.data()[ch];
                y.data_mut()[(b * c + ch) * plane..][..plane]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&self, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        let dict = self.as_dictionary()?;
        let [_, _, h, w] = x.shape();
        let grad_x = dict.apply_sized(grad, (h, w))?;
        let mut g_dict = dict.kernel().zeros_like();
        dict.accumulate_kernel_grad(x, grad, &mut g_dict)?;
        let [o, i, k, _] = self.weight.shape();
        let grad_w = Tensor::from_fn([o, i, k, k], |[co, ci, p, q]| g_dict.get([ci, co, k - 1 - p, k - 1 - q]));
        let [n, c, gh, gw] = grad.shape();
        let mut grad_b = Tensor::zeros(self.bias.shape());
        for b in 0..n {
            for ch in 0..c {
                grad_b.data_mut()[ch] += grad.data()[(b * c + ch) * gh * gw..][..gh * gw].iter().sum::<f64>();
            }
        }
        Ok((grad_x, vec![grad_w, grad_b]))
    }
}

/// Batch normalization over `(n, h, w)` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: Tensor::filled(shape, 1.0),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::filled(shape, 1.0),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return invalid(format!("batch norm expects {} channels, got {c}", self.channels()));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                if n * plane < 2 {
                    return invalid("batch norm in train mode needs at least two values per channel");
                }
                for b in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        *m += x.data()[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let mu = mean[ch];
                        var[ch] += x.data()[(b * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbias = count / (count - 1.0);
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ch] * unbias;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(self.running_mean.data());
                var.copy_from_slice(self.running_var.data());
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let (mu, is, g, be) = (mean[ch], inv_std[ch], self.gamma.data()[ch], self.beta.data()[ch]);
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (nv, ov) in normalized.data_mut()[range.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[range])
                {
                    *nv = (*nv - mu) * is;
                    *ov = g * *nv + be;
                }
            }
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&self, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let cache = self.cache.as_ref().ok_or_else(missing_cache)?;
        let [n, c, h, w] = grad.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let xhat = &cache.normalized;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy[ch] += grad.data()[i];
                    sum_dy_xhat[ch] += grad.data()[i] * xhat.data()[i];
                }
            }
        }
        let mut grad_x = grad.clone();
        for b in 0..n {
            for ch in 0..c {
                let g = self.gamma.data()[ch];
                let is = cache.inv_std[ch];
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    grad_x.data_mut()[i] = match cache.mode {
                        Mode::Eval => grad.data()[i] * g * is,
                        Mode::Train => {
                            g * is / count * (count * grad.data()[i] - sum_dy[ch] - xhat.data()[i] * sum_dy_xhat[ch])
                        }
                    };
                }
            }
        }
        let grad_gamma = Tensor::from_vec(self.gamma.shape(), sum_dy_xhat)?;
        let grad_beta = Tensor::from_vec(self.beta.shape(), sum_dy)?;
        Ok((grad_x, vec![grad_gamma, grad_beta]))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        Ok(x.map(|v| v.max(0.0)))
    }

    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let mask = self.mask.as_ref().ok_or_else(missing_cache)?;
        let mut out = grad.clone();
        for (g, &m) in out.data_mut().iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Non-overlapping `size x size` pooling; trailing rows/columns that do
/// not fill a window are dropped.
#[derive(Clone, Debug)]
pub struct Pool {
    pub kind: PoolKind,
    pub size: usize,
    input_shape: Option<[usize; 4]>,
    argmax: Vec<usize>,
}

impl Pool {
    pub fn new(kind: PoolKind, size: usize) -> Result<Self> {
        if size == 0 {
            return invalid("pool size must be positive");
        }
        Ok(Self {
            kind,
            size,
            input_shape: None,
            argmax: Vec::new(),
        })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape();
        let s = self.size;
        let (oh, ow) = (h / s, w / s);
        if oh == 0 || ow == 0 {
            return invalid(format!("pool {s} does not fit a {h}x{w} input"));
        }
        let mut out = Tensor::zeros([n, c, oh, ow]);
        self.argmax.clear();
        let inv = 1.0 / (s * s) as f64;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        let mut sum = 0.0;
                        for p in 0..s {
                            for q in 0..s {
                                let idx = base + (i * s + p) * w + j * s + q;
                                let v = x.data()[idx];
                                sum += v;
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = out.index([b, ch, i, j]);
                        match self.kind {
                            PoolKind::Max => {
                                out.data_mut()[o] = best;
                                self.argmax.push(best_idx);
                            }
                            PoolKind::Avg => out.data_mut()[o] = sum * inv,
                        }
                    }
                }
            }
        }
        self.input_shape = Some(x.shape());
        Ok(out)
    }

    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.ok_or_else(missing_cache)?;
        let mut out = Tensor::zeros(shape);
        match self.kind {
            PoolKind::Max => {
                for (&idx, &g) in self.argmax.iter().zip(grad.data()) {
                    out.data_mut()[idx] += g;
                }
            }
            PoolKind::Avg => {
                let [n, c, h, w] = shape;
                let s = self.size;
                let inv = 1.0 / (s * s) as f64;
                let [_, _, oh, ow] = grad.shape();
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let g = grad.get([b, ch, i, j]) * inv;
                                for p in 0..s {
                                    for q in 0..s {
                                        out.data_mut()[((b * c + ch) * h + i * s + p) * w + j * s + q] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_shape: Option<[usize; 4]>,
}

impl Flatten {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_shape = Some(x.shape());
        let n = x.shape()[0];
        x.clone().reshape([n, x.item_len(), 1, 1])
    }

    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.ok_or_else(missing_cache)?;
        grad.clone().reshape(shape)
    }
}

/// Fully connected layer, weight `(out, in, 1, 1)`, input flattened per item.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [o, _, a, b] = weight.shape();
        if a != 1 || b != 1 || bias.len() != o {
            return invalid("linear weight must be (out, in, 1, 1) with a matching bias");
        }
        Ok(Self {
            weight,
            bias,
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let (i, o) = (self.in_features(), self.out_features());
        if x.item_len() != i {
            return invalid(format!("linear expects {i} inputs per item, got {}", x.item_len()));
        }
        let mut y = Tensor::zeros([n, o, 1, 1]);
        for b in 0..n {
            let xi = x.item(b);
            let yi = y.item_mut(b);
            for (r, out) in yi.iter_mut().enumerate() {
                let row = &self.weight.data()[r * i..(r + 1) * i];
                *out = self.bias.data()[r] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&self, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        let n = x.shape()[0];
        let (i, o) = (self.in_features(), self.out_features());
        let mut grad_x = x.zeros_like();
        let mut grad_w = self.weight.zeros_like();
        let mut grad_b = self.bias.zeros_like();
        for b in 0..n {
            let xi = x.item(b);
            let gi = grad.item(b);
            for r in 0..o {
                let g = gi[r];
                if g == 0.0 {
                    continue;
                }
                grad_b.data_mut()[r] += g;
                let wrow = &self.weight.data()[r * i..(r + 1) * i];
                for (dst, &wv) in grad_x.item_mut(b).iter_mut().zip(wrow) {
                    *dst += g * wv;
                }
                for (dst, &xv) in grad_w.data_mut()[r * i..(r + 1) * i].iter_mut().zip(xi) {
                    *dst += g * xv;
                }
            }
        }
        Ok((grad_x, vec![grad_w, grad_b]))
    }
}
