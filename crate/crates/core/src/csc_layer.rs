//! The CSC layer: forward is `K` unrolled FISTA iterations on the layer's
//! dictionary, backward is reverse-mode differentiation through those
//! iterations.
//!
//! The step `t` and the eigenvalue estimate behind it are constants of the
//! differentiated graph; they are refreshed by power iteration after every
//! dictionary update instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvDictionary;
use crate::error::{invalid, Error, Result};
use crate::fista::{self, FistaConfig, FistaTrace};
use crate::tensor::Tensor;

/// Items solved together. Small groups keep the FISTA working set in
/// cache; results do not depend on the grouping.
const CHUNK: usize = 8;

#[derive(Clone, Debug)]
struct ForwardCache {
    input: Tensor,
    /// One trace per group of up to `CHUNK` consecutive items.
    traces: Vec<FistaTrace>,
}

fn item_range(t: &Tensor, start: usize, end: usize) -> Tensor {
    let [_, c, h, w] = t.shape();
    let len = c * h * w;
    Tensor::from_vec([end - start, c, h, w], t.data()[start * len..end * len].to_vec()).expect("range within tensor")
}

#[derive(Clone, Debug)]
pub struct CscLayer {
    dict: ConvDictionary,
    cfg: FistaConfig,
    /// Code-grid size of the power-iteration probe.
    probe_hw: (usize, usize),
    cached_step: f64,
    cached_lambda_dom: f64,
    eigvec: Option<Tensor>,
    step_current: bool,
    seed: u64,
    cache: Option<ForwardCache>,
    last_residual_norm: Vec<f64>,
}

/// Gradients produced by [`CscLayer::backward`].
#[derive(Clone, Debug)]
pub struct CscGrads {
    pub input: Tensor,
    pub dict: Tensor,
}

impl CscLayer {
    /// Builds a layer and computes its initial step size. `probe_hw` is the
    /// code-grid size the layer will run at.
    pub fn new(dict: ConvDictionary, cfg: FistaConfig, probe_hw: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        if probe_hw.0 == 0 || probe_hw.1 == 0 {
            return invalid("probe grid must be non-empty");
        }
        let mut layer = Self {
            dict,
            cfg,
            probe_hw,
            cached_step: f64::NAN,
            cached_lambda_dom: f64::NAN,
            eigvec: None,
            step_current: false,
            seed,
            cache: None,
            last_residual_norm: Vec::new(),
        };
        layer.refresh_step()?;
        Ok(layer)
    }

    pub fn dict(&self) -> &ConvDictionary {
        &self.dict
    }

    /// Mutable access to the dictionary. Marks the cached step stale.
    pub fn dict_mut(&mut self) -> &mut ConvDictionary {
        self.step_current = false;
        &mut self.dict
    }

    pub fn set_dict(&mut self, dict: ConvDictionary) {
        self.step_current = false;
        self.dict = dict;
    }

    pub fn config(&self) -> &FistaConfig {
        &self.cfg
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.lambda
    }

    /// Replaces the sparsity weight. The step depends only on the
    /// dictionary, so nothing else changes.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return invalid(format!("lambda must be positive, got {lambda}"));
        }
        self.cfg.lambda = lambda;
        Ok(())
    }

    pub fn set_iters(&mut self, iters: usize) -> Result<()> {
        if iters == 0 {
            return invalid("FISTA needs at least one iteration");
        }
        self.cfg.iters = iters;
        Ok(())
    }

    pub fn cached_step(&self) -> f64 {
        self.cached_step
    }

    pub fn cached_lambda_dom(&self) -> f64 {
        self.cached_lambda_dom
    }

    pub fn probe_hw(&self) -> (usize, usize) {
        self.probe_hw
    }

    pub fn is_step_current(&self) -> bool {
        self.step_current
    }

    /// Re-estimates the dominant eigenvalue of `A*A` for the current
    /// dictionary and sets `t = step_scale / lambda_dom`. Restarts from the
    /// previous eigenvector when one is available.
    pub fn refresh_step(&mut self) -> Result<()> {
        let (h, w) = self.probe_hw;
        let c = self.dict.code_channels();
        let start = match self.eigvec.take() {
            Some(v) if v.shape() == [1, c, h, w] => v,
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                fista::random_probe(c, h, w, &mut rng)
            }
        };
        let est = fista::power_iteration(&self.dict, start, self.cfg.power_tol, self.cfg.power_max_iters)?;
        self.cached_lambda_dom = est.lambda_dom;
        self.cached_step = self.cfg.step_scale / est.lambda_dom;
        self.eigvec = Some(est.vector);
        self.step_current = true;
        Ok(())
    }

    /// Accepts the cached step for the current dictionary without
    /// re-estimating it. Finite-difference checks use this to hold `t` fixed.
    pub fn pin_step(&mut self) {
        self.step_current = true;
    }

    /// Restores cached step values read back from a checkpoint.
    pub fn restore_step(&mut self, lambda_dom: f64) -> Result<()> {
        if !(lambda_dom > 0.0 && lambda_dom.is_finite()) {
            return invalid(format!("invalid eigenvalue {lambda_dom}"));
        }
        self.cached_lambda_dom = lambda_dom;
        self.cached_step = self.cfg.step_scale / lambda_dom;
        self.step_current = true;
        Ok(())
    }

    /// Runs `K` FISTA iterations and returns `z[K]`. Keeps the trace for
    /// [`backward`](Self::backward) and records per-item `||x - A(z)||_2`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if !self.step_current {
            return Err(Error::StaleStep);
        }
        let n = x.shape()[0];
        let mut traces = Vec::with_capacity(n.div_ceil(CHUNK));
        let mut parts = Vec::with_capacity(traces.capacity());
        self.last_residual_norm.clear();
        for start in (0..n).step_by(CHUNK) {
            let xs = item_range(x, start, (start + CHUNK).min(n));
            let trace = fista::solve(&self.dict, &xs, &self.cfg, Some(self.cached_step))?;
            self.last_residual_norm.extend(trace.residual.item_l2());
            parts.push(trace.output().clone());
            traces.push(trace);
        }
        let out = if parts.is_empty() {
            let (zh, zw) = self.dict.code_hw(x.shape()[2], x.shape()[3]);
            Tensor::zeros([0, self.dict.code_channels(), zh, zw])
        } else {
            Tensor::concat(&parts)?
        };
        self.cache = Some(ForwardCache {
            input: x.clone(),
            traces,
        });
        Ok(out)
    }

    pub fn last_residual_norm(&self) -> &[f64] {
        &self.last_residual_norm
    }

    /// Traces of the last forward pass, one per group of consecutive items.
    pub fn last_traces(&self) -> &[FistaTrace] {
        self.cache.as_ref().map_or(&[], |c| &c.traces)
    }

    pub fn last_input(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Vector-Jacobian product of `z[K]` with respect to the layer input
    /// and the dictionary kernel.
    ///
    /// Each iteration computes `v = y + t A*(x - A y)` and `z = T(v)`; the
    /// threshold passes gradient where `|v| > lambda t` and blocks it
    /// elsewhere (including the kink itself). `y[l]` mixes `z[l-1]` and
    /// `z[l-2]` with the recorded momentum weights.
    pub fn backward(&self, grad_out: &Tensor) -> Result<CscGrads> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let n = cache.input.shape()[0];
        let [_, c, zh, zw] = cache.traces.first().map_or([0; 4], |t| t.output().shape());
        if grad_out.shape() != [n, c, zh, zw] && n > 0 {
            return Err(Error::ShapeMismatch {
                op: "csc backward",
                left: [n, c, zh, zw],
                right: grad_out.shape(),
            });
        }
        let mut grad_dict = self.dict.kernel().zeros_like();
        let mut parts = Vec::with_capacity(cache.traces.len());
        for (i, trace) in cache.traces.iter().enumerate() {
            let start = i * CHUNK;
            let end = (start + CHUNK).min(n);
            let x = item_range(&cache.input, start, end);
            let g = item_range(grad_out, start, end);
            parts.push(self.backward_chunk(&x, trace, &g, &mut grad_dict)?);
        }
        let input = if parts.is_empty() {
            cache.input.zeros_like()
        } else {
            Tensor::concat(&parts)?
        };
        Ok(CscGrads {
            input,
            dict: grad_dict,
        })
    }

    fn backward_chunk(&self, x: &Tensor, trace: &FistaTrace, grad_out: &Tensor, grad_dict: &mut Tensor) -> Result<Tensor> {
        let [_, _, h, w] = x.shape();
        let t = trace.step;
        let threshold = trace.lambda * t;
        let k = trace.iters();
        let dict = &self.dict;

        let mut grad_x = x.zeros_like();
        let mut grad_z: Vec<Option<Tensor>> = vec![None; k + 1];
        grad_z[k] = Some(grad_out.clone());

        for l in (1..=k).rev() {
            let Some(gz) = grad_z[l].take() else {
                continue;
            };
            let pre = &trace.pre_activations[l - 1];
            let mut gv = gz;
            for (g, &p) in gv.data_mut().iter_mut().zip(pre.data()) {
                if p.abs() <= threshold {
                    *g = 0.0;
                }
            }
            let a_gv = dict.apply_sized(&gv, (h, w))?;
            grad_x.axpy(t, &a_gv)?;

            // d/dA of t <A gv, x - A y>  =  t [G(x - A y, gv) - G(A gv, y)]
            // with G(signal, code) the kernel gradient of <signal, A code>.
            let ay = &trace.ay_iterates[l - 1];
            let mut signal = x.scale(t);
            if l > 1 {
                signal.axpy(-t, ay)?;
            }
            dict.accumulate_kernel_grad(&signal, &gv, grad_dict)?;
            if l == 1 {
                // y[1] = 0: no further terms and nothing upstream.
                continue;
            }
            let y = &trace.y_iterates[l - 1];
            dict.accumulate_kernel_grad(&a_gv.scale(-t), y, grad_dict)?;

            // dv/dy = I - t A*A
            let mut gy = gv;
            gy.axpy(-t, &dict.adjoint(&a_gv)?)?;

            let beta = trace.momentum(l - 1);
            accumulate(&mut grad_z[l - 1], &gy, 1.0 + beta)?;
            if l >= 3 && beta != 0.0 {
                accumulate(&mut grad_z[l - 2], &gy, -beta)?;
            }
        }
        Ok(grad_x)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor, alpha: f64) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(alpha, g),
        None => {
            *slot = Some(g.scale(alpha));
            Ok(())
        }
    }
}
