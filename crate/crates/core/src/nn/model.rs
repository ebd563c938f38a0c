use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvDictionary;
use crate::csc_layer::CscLayer;
use crate::error::{invalid, Error, Result};
use crate::fista::FistaConfig;
use crate::tensor::Tensor;

use super::layers::{BatchNorm2d, Conv2d, Flatten, Linear, Pool, PoolKind, Relu, Standardize};
use super::Mode;

/// Two CSC stages and a linear head, sized for 28x28 grayscale digits.
pub const REFERENCE_ARCH: &str = "std,csc:32:5,bn,relu,maxpool:2,csc:64:5,bn,relu,maxpool:2,flatten,linear:10";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Dictionary,
    Weight,
    Bias,
    Scale,
    Shift,
}

impl ParamKind {
    /// Whether weight decay applies. Dictionaries are renormalized after
    /// every step, so radial decay would be undone anyway.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias | ParamKind::Scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug)]
pub enum Layer {
    Standardize(Standardize),
    Csc(CscLayer),
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu(Relu),
    Pool(Pool),
    Flatten(Flatten),
    Linear(Linear),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Standardize(_) => "std",
            Layer::Csc(_) => "csc",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu(_) => "relu",
            Layer::Pool(p) if p.kind == PoolKind::Max => "maxpool",
            Layer::Pool(_) => "avgpool",
            Layer::Flatten(_) => "flatten",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Standardize(l) => l.forward(x),
            Layer::Csc(l) => l.forward(x),
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => l.forward(x),
            Layer::Pool(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
        }
    }

    /// Input gradient and parameter gradients in [`params`](Self::params) order.
    pub fn backward(&self, grad: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match self {
            Layer::Standardize(l) => Ok((l.backward(grad)?, vec![])),
            Layer::Csc(l) => {
                let g = l.backward(grad)?;
                Ok((g.input, vec![g.dict]))
            }
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Relu(l) => Ok((l.backward(grad)?, vec![])),
            Layer::Pool(l) => Ok((l.backward(grad)?, vec![])),
            Layer::Flatten(l) => Ok((l.backward(grad)?, vec![])),
            Layer::Linear(l) => l.backward(grad),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, ParamKind, &Tensor)> {
        match self {
            Layer::Csc(l) => vec![("dict", ParamKind::Dictionary, l.dict().kernel())],
            Layer::Conv(l) => vec![
                ("weight", ParamKind::Weight, &l.weight),
                ("bias", ParamKind::Bias, &l.bias),
            ],
            Layer::BatchNorm(l) => vec![
                ("gamma", ParamKind::Scale, &l.gamma),
                ("beta", ParamKind::Shift, &l.beta),
            ],
            Layer::Linear(l) => vec![
                ("weight", ParamKind::Weight, &l.weight),
                ("bias", ParamKind::Bias, &l.bias),
            ],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Csc(l) => vec![l.dict_mut().kernel_mut()],
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    /// Non-trainable state that a checkpoint must carry.
    pub fn buffers(&self) -> Vec<(&'static str, Tensor)> {
        match self {
            Layer::Standardize(l) => {
                let c = l.mean.len();
                vec![
                    ("mean", Tensor::from_vec([1, c, 1, 1], l.mean.clone()).expect("length matches")),
                    ("std", Tensor::from_vec([1, c, 1, 1], l.std.clone()).expect("length matches")),
                ]
            }
            Layer::Csc(l) => vec![("lambda_dom", Tensor::filled([1, 1, 1, 1], l.cached_lambda_dom()))],
            Layer::BatchNorm(l) => vec![
                ("running_mean", l.running_mean.clone()),
                ("running_var", l.running_var.clone()),
            ],
            _ => vec![],
        }
    }

    fn set_buffer(&mut self, name: &str, value: &Tensor) -> Result<()> {
        match (self, name) {
            (Layer::Standardize(l), "mean") => l.mean = value.data().to_vec(),
            (Layer::Standardize(l), "std") => l.std = value.data().to_vec(),
            (Layer::Csc(l), "lambda_dom") => l.restore_step(value.data()[0])?,
            (Layer::BatchNorm(l), "running_mean") => l.running_mean = value.clone(),
            (Layer::BatchNorm(l), "running_var") => l.running_var = value.clone(),
            (_, other) => return invalid(format!("unknown buffer {other}")),
        }
        Ok(())
    }
}

/// Result of a model forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Tensor,
    /// Mean per-item residual norm of each CSC layer, in layer order.
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub input: Tensor,
    /// Aligned with [`SdNetLite::params`].
    pub params: Vec<Tensor>,
}

/// A feed-forward classifier whose convolutions are CSC layers.
#[derive(Clone, Debug)]
pub struct SdNetLite {
    layers: Vec<Layer>,
    arch: String,
    input_shape: [usize; 3],
    num_classes: usize,
}

fn parse_args(token: &str, n_min: usize, n_max: usize) -> Result<(String, Vec<usize>)> {
    let mut parts = token.split(':');
    let name = parts.next().unwrap_or_default().trim().to_string();
    let args = parts
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad number {p:?} in layer {token:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if args.len() < n_min || args.len() > n_max {
        return invalid(format!("layer {token:?} takes {n_min} to {n_max} arguments"));
    }
    Ok((name, args))
}

fn arity(name: &str) -> Option<(usize, usize)> {
    Some(match name {
        "std" | "bn" | "relu" | "flatten" => (0, 0),
        "csc" | "conv" => (2, 3),
        "maxpool" | "avgpool" | "linear" => (1, 1),
        _ => return None,
    })
}

impl SdNetLite {
    /// Builds a model from a comma-separated layer list such as
    /// [`REFERENCE_ARCH`]. Tokens: `std`, `csc:C:k[:s]`, `conv:C:k[:s]`,
    /// `bn`, `relu`, `maxpool:s`, `avgpool:s`, `flatten`, `linear:N`.
    /// Channel counts are inferred from `input_shape = (c, h, w)`.
    pub fn build(arch: &str, input_shape: [usize; 3], fista: FistaConfig, seed: u64) -> Result<Self> {
        fista.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = input_shape;
        if c == 0 || h == 0 || w == 0 {
            return invalid("input shape must be non-empty");
        }
        let mut flat = false;
        let mut layers = Vec::new();
        for (index, token) in arch.split(',').map(str::trim).enumerate() {
            let name = token.split(':').next().unwrap_or_default();
            let (lo, hi) = arity(name).ok_or_else(|| Error::InvalidArgument(format!("unknown layer {token:?}")))?;
            let (name, args) = parse_args(token, lo, hi)?;
            if flat && name != "linear" {
                return invalid(format!("layer {index} ({name}) cannot follow flatten"));
            }
            let layer = match name.as_str() {
                "std" => Layer::Standardize(Standardize::identity(c)),
                "csc" | "conv" => {
                    let (out, k, s) = (args[0], args[1], args.get(2).copied().unwrap_or(1));
                    if out == 0 || k % 2 == 0 || s == 0 {
                        return invalid(format!("layer {index}: need channels > 0, odd k, stride > 0"));
                    }
                    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
                    let layer = if name == "csc" {
                        let dict = ConvDictionary::random(c, out, k, s, &mut rng)?;
                        Layer::Csc(CscLayer::new(dict, fista, (oh, ow), seed.wrapping_add(1 + index as u64))?)
                    } else {
                        let bound = 1.0 / ((c * k * k) as f64).sqrt();
                        let weight = Tensor::from_fn([out, c, k, k], |_| rng.random_range(-bound..bound));
                        let bias = Tensor::from_fn([1, out, 1, 1], |_| rng.random_range(-bound..bound));
                        Layer::Conv(Conv2d::new(weight, bias, s)?)
                    };
                    (c, h, w) = (out, oh, ow);
                    layer
                }
                "bn" => Layer::BatchNorm(BatchNorm2d::new(c)),
                "relu" => Layer::Relu(Relu::default()),
                "maxpool" | "avgpool" => {
                    let s = args[0];
                    let kind = if name == "maxpool" { PoolKind::Max } else { PoolKind::Avg };
                    let pool = Pool::new(kind, s)?;
                    if h / s == 0 || w / s == 0 {
                        return invalid(format!("layer {index}: pool {s} does not fit {h}x{w}"));
                    }
                    (h, w) = (h / s, w / s);
                    Layer::Pool(pool)
                }
                "flatten" => {
                    flat = true;
                    (c, h, w) = (c * h * w, 1, 1);
                    Layer::Flatten(Flatten::default())
                }
                "linear" => {
                    let inputs = c * h * w;
                    let out = args[0];
                    let bound = 1.0 / (inputs as f64).sqrt();
                    let weight = Tensor::from_fn([out, inputs, 1, 1], |_| rng.random_range(-bound..bound));
                    let bias = Tensor::from_fn([1, out, 1, 1], |_| rng.random_range(-bound..bound));
                    flat = true;
                    (c, h, w) = (out, 1, 1);
                    Layer::Linear(Linear::new(weight, bias)?)
                }
                _ => unreachable!("arity table covers every name"),
            };
            layers.push(layer);
        }
        if !layers.iter().any(|l| matches!(l, Layer::Csc(_))) {
            return invalid("a model needs at least one CSC layer");
        }
        if h != 1 || w != 1 {
            return invalid(format!("model output is {c}x{h}x{w}, expected a flat class vector"));
        }
        Ok(Self {
            layers,
            arch: arch.to_string(),
            input_shape,
            num_classes: c,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Layer indices of the CSC layers.
    pub fn csc_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Csc(_)))
            .collect()
    }

    pub fn csc_layers(&self) -> impl Iterator<Item = &CscLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Csc(c) => Some(c),
            _ => None,
        })
    }

    pub fn csc_layers_mut(&mut self) -> impl Iterator<Item = &mut CscLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Csc(c) => Some(c),
            _ => None,
        })
    }

    /// Lambda of the first CSC layer.
    pub fn lambda(&self) -> f64 {
        self.csc_layers().next().expect("model has a CSC layer").lambda()
    }

    /// Sets one shared lambda on every CSC layer.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        self.csc_layers_mut().try_for_each(|l| l.set_lambda(lambda))
    }

    pub fn iters(&self) -> usize {
        self.csc_layers().next().expect("model has a CSC layer").config().iters
    }

    pub fn set_iters(&mut self, iters: usize) -> Result<()> {
        self.csc_layers_mut().try_for_each(|l| l.set_iters(iters))
    }

    /// Sets the input standardization, if the model has one.
    pub fn set_standardization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.input_shape[0] || std.len() != mean.len() || std.iter().any(|s| !(*s > 0.0)) {
            return invalid("standardization needs one mean and one positive std per input channel");
        }
        for layer in &mut self.layers {
            if let Layer::Standardize(s) = layer {
                s.mean.clone_from(&mean);
                s.std.clone_from(&std);
            }
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ModelOutput> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.input_shape {
            return invalid(format!(
                "model expects items of shape {:?}, got {:?}",
                self.input_shape,
                [c, h, w]
            ));
        }
        let mut cur = x.clone();
        let mut residuals = Vec::new();
        for (index, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur, mode).map_err(|e| Error::Layer {
                index,
                kind: layer.kind(),
                source: Box::new(e),
            })?;
            if let Layer::Csc(l) = layer {
                let r = l.last_residual_norm();
                residuals.push(r.iter().sum::<f64>() / r.len().max(1) as f64);
            }
        }
        Ok(ModelOutput {
            logits: cur,
            residuals,
        })
    }

    /// Per-item residual of the last forward pass, averaged over CSC layers.
    pub fn item_residuals(&self) -> Vec<f64> {
        let layers: Vec<&[f64]> = self.csc_layers().map(|l| l.last_residual_norm()).collect();
        let n = layers.first().map_or(0, |r| r.len());
        (0..n)
            .map(|i| layers.iter().map(|r| r[i]).sum::<f64>() / layers.len() as f64)
            .collect()
    }

    pub fn backward(&self, grad_logits: &Tensor) -> Result<ModelGrads> {
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut grad = grad_logits.clone();
        for (index, layer) in self.layers.iter().enumerate().rev() {
            let (g, params) = layer.backward(&grad).map_err(|e| Error::Layer {
                index,
                kind: layer.kind(),
                source: Box::new(e),
            })?;
            grad = g;
            per_layer[index] = params;
        }
        Ok(ModelGrads {
            input: grad,
            params: per_layer.into_iter().flatten().collect(),
        })
    }

    pub fn params(&self) -> Vec<ParamInfo> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params().into_iter().map(move |(name, kind, t)| ParamInfo {
                    name: format!("layers.{i}.{name}"),
                    kind,
                    shape: t.shape(),
                })
            })
            .collect()
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params().into_iter().map(|p| p.2)).collect()
    }

    /// Mutable parameter views. Touching a dictionary marks its step stale;
    /// call [`after_update`](Self::after_update) when done.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Projects every dictionary back onto unit channel energy and
    /// re-estimates its step size.
    pub fn after_update(&mut self) -> Result<()> {
        for layer in self.csc_layers_mut() {
            layer.dict_mut().normalize_in_place()?;
            layer.refresh_step()?;
        }
        Ok(())
    }

    /// Every parameter and buffer under a unique name.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, _, t) in layer.params() {
                out.push((format!("layers.{i}.{name}"), t.clone()));
            }
            for (name, t) in layer.buffers() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }

    /// Loads a state produced by [`state`](Self::state) on a model with the
    /// same architecture. Every entry must be present with a matching shape.
    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str, shape: [usize; 4]| -> Result<&Tensor> {
            let t = entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let wanted: Vec<(String, [usize; 4])> = layer
                .params()
                .iter()
                .map(|(n, _, t)| (format!("layers.{i}.{n}"), t.shape()))
                .collect();
            for (slot, (name, shape)) in layer.params_mut().into_iter().zip(&wanted) {
                *slot = find(name, *shape)?.clone();
            }
            for (name, current) in layer.buffers() {
                let full = format!("layers.{i}.{name}");
                let value = find(&full, current.shape())?.clone();
                layer.set_buffer(name, &value)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SdNetLite {
        SdNetLite::build("std,csc:4:3,bn,relu,flatten,linear:3", [1, 6, 6], FistaConfig::new(0.1, 2), 3).unwrap()
    }

    #[test]
    fn reference_topology_shapes() {
        let mut m = SdNetLite::build(REFERENCE_ARCH, [1, 28, 28], FistaConfig::new(0.1, 2), 0).unwrap();
        assert_eq!(m.csc_indices(), vec![1, 5]);
        let x = Tensor::from_fn([2, 1, 28, 28], |[n, _, i, j]| ((n + i * j) % 7) as f64 / 7.0);
        let out = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), [2, 10, 1, 1]);
        assert_eq!(out.residuals.len(), 2);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = tiny();
        let x = Tensor::from_fn([3, 1, 6, 6], |[n, _, i, j]| (n as f64 - i as f64 * 0.3 + j as f64 * 0.1).sin());
        let a = m.forward(&x, Mode::Eval).unwrap().logits;
        let b = m.forward(&x, Mode::Eval).unwrap().logits;
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut m = tiny();
        let x = Tensor::from_fn([2, 1, 6, 6], |[n, _, i, j]| ((n * 5 + i * 3 + j) % 4) as f64);
        let out = m.forward(&x, Mode::Train).unwrap();
        let grads = m.backward(&out.logits.zeros_like()).unwrap();
        assert_eq!(grads.params.len(), m.params().len());
        for (g, info) in grads.params.iter().zip(m.params()) {
            assert_eq!(g.shape(), info.shape);
            assert!(g.data().iter().all(|&v| v == 0.0), "{}", info.name);
        }
    }

    #[test]
    fn shape_break_names_the_layer() {
        let mut m = tiny();
        let err = m.forward(&Tensor::zeros([1, 1, 5, 6]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let mut m = SdNetLite::build("csc:2:3,linear:3", [1, 4, 4], FistaConfig::new(0.1, 1), 0).unwrap();
        if let Layer::Linear(l) = &mut m.layers_mut()[1] {
            l.weight = Tensor::zeros([3, 5, 1, 1]);
        }
        let err = m.forward(&Tensor::zeros([1, 1, 4, 4]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, kind: "linear", .. }), "{err}");
    }

    #[test]
    fn arch_errors() {
        let cfg = FistaConfig::new(0.1, 2);
        assert!(SdNetLite::build("relu,flatten,linear:2", [1, 4, 4], cfg, 0).is_err());
        assert!(SdNetLite::build("csc:4:4,flatten,linear:2", [1, 4, 4], cfg, 0).is_err());
        assert!(SdNetLite::build("csc:4:3,blur,flatten,linear:2", [1, 4, 4], cfg, 0).is_err());
        assert!(SdNetLite::build("csc:4:3", [1, 4, 4], cfg, 0).is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut a = tiny();
        let x = Tensor::from_fn([2, 1, 6, 6], |[n, _, i, j]| ((n * 5 + i * 3 + j) % 4) as f64);
        a.forward(&x, Mode::Train).unwrap();
        let mut b = SdNetLite::build(a.arch(), a.input_shape(), FistaConfig::new(0.1, 2), 99).unwrap();
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.forward(&x, Mode::Eval).unwrap().logits, b.forward(&x, Mode::Eval).unwrap().logits);
    }
}
