//! Lasso solver for the CSC objective `lambda*||z||_1 + 0.5*||x - A(z)||^2`.
//!
//! FISTA with `z[0] = 0`, `y[1] = z[0]`, `m[1] = 1`:
//!
//! ```text
//! z[l]   = T_{lambda t}(y[l] + t A*(x - A(y[l])))
//! m[l+1] = (1 + sqrt(1 + 4 m[l]^2)) / 2
//! y[l+1] = z[l] + (m[l] - 1) / m[l+1] * (z[l] - z[l-1])
//! ```
//!
//! The step is `t = step_scale / lambda_dom`, where `lambda_dom` is the
//! dominant eigenvalue of `A*A` estimated by power iteration.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::conv::ConvDictionary;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Power-iteration stopping threshold on `||v[k+1] - v[k]||_2`.
pub const DEFAULT_POWER_TOL: f64 = 3.162_277_660_168_379_5e-3; // sqrt(1e-5)
pub const DEFAULT_POWER_MAX_ITERS: usize = 50;
pub const DEFAULT_STEP_SCALE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FistaConfig {
    pub lambda: f64,
    pub iters: usize,
    pub step_scale: f64,
    pub power_tol: f64,
    pub power_max_iters: usize,
}

impl FistaConfig {
    pub fn new(lambda: f64, iters: usize) -> Self {
        Self {
            lambda,
            iters,
            step_scale: DEFAULT_STEP_SCALE,
            power_tol: DEFAULT_POWER_TOL,
            power_max_iters: DEFAULT_POWER_MAX_ITERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.iters == 0 {
            return invalid("FISTA needs at least one iteration");
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return invalid(format!("step_scale must lie in (0, 1], got {}", self.step_scale));
        }
        if !(self.power_tol > 0.0) || self.power_max_iters == 0 {
            return invalid("power iteration needs a positive tolerance and iteration cap");
        }
        Ok(())
    }
}

/// Everything the unrolled iterations produced; the backward pass replays it.
#[derive(Clone, Debug)]
pub struct FistaTrace {
    /// `z[0..=K]`, with `z[0] = 0`.
    pub z_iterates: Vec<Tensor>,
    /// `y[1..=K]`.
    pub y_iterates: Vec<Tensor>,
    /// `A(y[l])` for `l = 1..=K`.
    pub ay_iterates: Vec<Tensor>,
    /// Pre-threshold values `y[l] + t A*(x - A(y[l]))`.
    pub pre_activations: Vec<Tensor>,
    /// `m[1..=K+1]`.
    pub m_sequence: Vec<f64>,
    pub step: f64,
    pub lambda: f64,
    /// `x - A(z[K])`.
    pub residual: Tensor,
    /// Objective at `z[K]`, summed over the batch.
    pub objective: f64,
}

impl FistaTrace {
    pub fn output(&self) -> &Tensor {
        self.z_iterates.last().expect("at least z[0]")
    }

    pub fn iters(&self) -> usize {
        self.z_iterates.len() - 1
    }

    /// Momentum weight `(m[l] - 1) / m[l+1]` used to form `y[l+1]`.
    pub fn momentum(&self, l: usize) -> f64 {
        (self.m_sequence[l - 1] - 1.0) / self.m_sequence[l]
    }
}

#[inline]
pub fn shrink_scalar(v: f64, threshold: f64) -> f64 {
    let mag = v.abs() - threshold;
    if mag > 0.0 {
        mag.copysign(v)
    } else {
        0.0
    }
}

/// Entrywise soft threshold `max(|v| - threshold, 0) * sgn(v)`.
pub fn shrink(v: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold >= 0.0) {
        return invalid(format!("threshold must be non-negative, got {threshold}"));
    }
    Ok(v.map(|x| shrink_scalar(x, threshold)))
}

/// Result of [`power_iteration`].
#[derive(Clone, Debug)]
pub struct PowerEstimate {
    pub lambda_dom: f64,
    pub vector: Tensor,
    pub iterations: usize,
}

/// Unit-norm Gaussian probe of shape `(1, C, h, w)`.
pub fn random_probe<R: Rng + ?Sized>(code_channels: usize, h: usize, w: usize, rng: &mut R) -> Tensor {
    let mut v = Tensor::from_fn([1, code_channels, h, w], |_| rng.sample(StandardNormal));
    let norm = v.l2();
    v.map_inplace(|x| x / norm);
    v
}

/// Estimates the dominant eigenvalue of `z -> A*(A(z))` starting from
/// `start`, stopping once successive unit vectors differ by less than `tol`
/// or after `max_iters` steps. The estimate is the Rayleigh quotient
/// `<v, A*A v>` of the final vector.
pub fn power_iteration(dict: &ConvDictionary, start: Tensor, tol: f64, max_iters: usize) -> Result<PowerEstimate> {
    let [_, c, h, w] = start.shape();
    if c != dict.code_channels() {
        return Err(Error::ShapeMismatch {
            op: "power_iteration",
            left: dict.kernel().shape(),
            right: start.shape(),
        });
    }
    if dict.kernel().norms().linf == 0.0 {
        return Err(Error::DegenerateDictionary("all-zero dictionary".into()));
    }
    let out_hw = (h * dict.stride(), w * dict.stride());
    let gram = |v: &Tensor| dict.adjoint(&dict.apply_sized(v, out_hw)?);
    let norm = start.l2();
    if !(norm > 0.0) {
        return invalid("power iteration needs a nonzero start vector");
    }
    let mut v = start.scale(1.0 / norm);
    let mut iterations = 0;
    while iterations < max_iters {
        let mut next = gram(&v)?;
        let n = next.l2();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateDictionary(format!(
                "power iteration collapsed (norm {n}) at step {iterations}"
            )));
        }
        next.map_inplace(|x| x / n);
        iterations += 1;
        let delta = next.sub(&v)?.l2();
        v = next;
        if delta < tol {
            break;
        }
    }
    let lambda_dom = v.inner(&gram(&v)?)?;
    if !(lambda_dom > 0.0) {
        return Err(Error::DegenerateDictionary(format!("estimated eigenvalue {lambda_dom}")));
    }
    Ok(PowerEstimate {
        lambda_dom,
        vector: v,
        iterations,
    })
}

/// `lambda*||z||_1 + 0.5*||x - A(z)||^2`, summed over the batch.
pub fn objective(dict: &ConvDictionary, x: &Tensor, z: &Tensor, lambda: f64) -> Result<f64> {
    let [_, _, h, w] = x.shape();
    let residual = x.sub(&dict.apply_sized(z, (h, w))?)?;
    Ok(lambda * z.norms().l1 + 0.5 * residual.l2().powi(2))
}

/// Runs `cfg.iters` FISTA iterations from `z[0] = 0`. The step is taken
/// from `step` when given, otherwise estimated by power iteration.
pub fn solve(dict: &ConvDictionary, x: &Tensor, cfg: &FistaConfig, step: Option<f64>) -> Result<FistaTrace> {
    cfg.validate()?;
    let [n, xm, h, w] = x.shape();
    if xm != dict.signal_channels() {
        return Err(Error::ShapeMismatch {
            op: "solve",
            left: dict.kernel().shape(),
            right: x.shape(),
        });
    }
    let (zh, zw) = dict.code_hw(h, w);
    let step = match step {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return invalid(format!("step must be positive, got {t}")),
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
            let probe = random_probe(dict.code_channels(), zh, zw, &mut rng);
            let est = power_iteration(dict, probe, cfg.power_tol, cfg.power_max_iters)?;
            cfg.step_scale / est.lambda_dom
        }
    };
    let threshold = cfg.lambda * step;
    let k = cfg.iters;

    let zero = Tensor::zeros([n, dict.code_channels(), zh, zw]);
    // A*(x) is shared by every iteration.
    let adj_x = dict.adjoint(x)?;
    let mut z_iterates = Vec::with_capacity(k + 1);
    let mut y_iterates = Vec::with_capacity(k);
    let mut ay_iterates = Vec::with_capacity(k);
    let mut pre_activations = Vec::with_capacity(k);
    let mut m_sequence = Vec::with_capacity(k + 1);
    z_iterates.push(zero.clone());
    m_sequence.push(1.0);
    let mut y = zero;
    for l in 1..=k {
        // v = y + t A*(x - A y) = y + t (A*x - A*(A y))
        let (ay, v) = if l == 1 {
            (Tensor::zeros(x.shape()), adj_x.scale(step))
        } else {
            let ay = dict.apply_sized(&y, (h, w))?;
            let mut v = dict.adjoint(&ay)?;
            for ((vi, &yi), &ai) in v.data_mut().iter_mut().zip(y.data()).zip(adj_x.data()) {
                *vi = yi + step * (ai - *vi);
            }
            (ay, v)
        };
        let mut z = v.zeros_like();
        let mut finite = true;
        for (zi, &p) in z.data_mut().iter_mut().zip(v.data()) {
            finite &= p.is_finite();
            *zi = shrink_scalar(p, threshold);
        }
        if !finite {
            return Err(Error::NonFinite { iteration: l });
        }
        let m_prev: f64 = *m_sequence.last().expect("m[1]");
        let m_next = (1.0 + (1.0 + 4.0 * m_prev * m_prev).sqrt()) / 2.0;
        let beta = (m_prev - 1.0) / m_next;
        let mut y_next = z.clone();
        if beta != 0.0 {
            let prev = z_iterates.last().expect("z[l-1]");
            for (yi, &pi) in y_next.data_mut().iter_mut().zip(prev.data()) {
                *yi += beta * (*yi - pi);
            }
        }
        y_iterates.push(std::mem::replace(&mut y, y_next));
        ay_iterates.push(ay);
        pre_activations.push(v);
        z_iterates.push(z);
        m_sequence.push(m_next);
    }
    let z_out = z_iterates.last().expect("z[K]");
    let residual = x.sub(&dict.apply_sized(z_out, (h, w))?)?;
    let objective = cfg.lambda * z_out.norms().l1 + 0.5 * residual.l2().powi(2);
    Ok(FistaTrace {
        z_iterates,
        y_iterates,
        ay_iterates,
        pre_activations,
        m_sequence,
        step,
        lambda: cfg.lambda,
        residual,
        objective,
    })
}

/// Largest violation of the lasso optimality conditions at `z`, with
/// `g = -A*(x - A(z))`: `|g_i| - lambda` off the support and
/// `|g_i + lambda sgn(z_i)|` on it. Non-positive means optimal.
pub fn kkt_residual(dict: &ConvDictionary, x: &Tensor, z: &Tensor, lambda: f64) -> Result<f64> {
    let [_, _, h, w] = x.shape();
    let residual = x.sub(&dict.apply_sized(z, (h, w))?)?;
    let g = dict.adjoint(&residual)?;
    let worst = z
        .data()
        .iter()
        .zip(g.data())
        .map(|(&zi, &ci)| {
            // ci = A*(x - Az) = -g_i
            if zi == 0.0 {
                ci.abs() - lambda
            } else {
                (-ci + lambda * zi.signum()).abs()
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(worst)
}

/// Outcome of one synthetic stable-recovery experiment.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryTrial {
    /// `supp(z_*) ⊆ supp(z_true)`.
    pub support_contained: bool,
    /// `||z_* - z_true||_2`.
    pub error: f64,
    /// `||z_* - z_true||_2 / ||e||_2` (infinite when the noise is zero and
    /// the error is not).
    pub rel_error: f64,
}

/// Setup of a stable-recovery experiment.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryParams {
    pub signal_channels: usize,
    pub code_channels: usize,
    pub size: usize,
    /// Spatial extent of the square signal grid.
    pub grid: usize,
    /// Number of ±1 spikes in the true code.
    pub sparsity: usize,
    pub noise_norm: f64,
    /// `lambda = lambda_factor * noise_norm`, floored at `min_lambda`.
    pub lambda_factor: f64,
    pub min_lambda: f64,
    pub iters: usize,
}

/// Calibrated constant `c` in `lambda = c * ||e||_2`: the smallest value of
/// {0.5, 1, 2, 4} reaching 95% support containment at one spike.
pub const RECOVERY_LAMBDA_FACTOR: f64 = 0.5;

/// Synthesizes `x = A(z_true) + e` from a random normalized dictionary and a
/// sparse ±1 code, solves the lasso with `lambda ∝ ||e||`, and reports
/// support containment and recovery error.
pub fn stable_recovery_trial(p: &RecoveryParams, seed: u64) -> Result<RecoveryTrial> {
    use rand::seq::index::sample;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dict = ConvDictionary::random(p.signal_channels, p.code_channels, p.size, 1, &mut rng)?;
    let code_len = p.code_channels * p.grid * p.grid;
    if p.sparsity == 0 || p.sparsity > code_len {
        return invalid(format!("sparsity {} out of range", p.sparsity));
    }
    let mut z_true = Tensor::zeros([1, p.code_channels, p.grid, p.grid]);
    for idx in sample(&mut rng, code_len, p.sparsity) {
        z_true.data_mut()[idx] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    let clean = dict.apply(&z_true)?;
    let mut noise = Tensor::from_fn(clean.shape(), |_| rng.sample(StandardNormal));
    let nn = noise.l2();
    noise.map_inplace(|v| v * p.noise_norm / nn);
    let x = clean.add(&noise)?;

    let lambda = (p.lambda_factor * p.noise_norm).max(p.min_lambda);
    let cfg = FistaConfig::new(lambda, p.iters);
    let trace = solve(&dict, &x, &cfg, None)?;
    let z = trace.output();
    let support_contained = z
        .data()
        .iter()
        .zip(z_true.data())
        .all(|(&est, &truth)| est == 0.0 || truth != 0.0);
    let error = z.sub(&z_true)?.l2();
    let rel_error = if p.noise_norm > 0.0 {
        error / p.noise_norm
    } else if error == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(RecoveryTrial {
        support_contained,
        error,
        rel_error,
    })
}
