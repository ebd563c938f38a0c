use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

use super::model::SdNetLite;

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate to zero over `total_epochs`.
    Cosine { total_epochs: f64 },
    /// Multiply by `gamma` at each milestone epoch.
    MultiStep { milestones: Vec<f64>, gamma: f64 },
}

impl Schedule {
    pub fn factor(&self, epoch: f64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { total_epochs } => {
                let e = epoch.clamp(0.0, *total_epochs);
                0.5 * (1.0 + (PI * e / total_epochs).cos())
            }
            Schedule::MultiStep { milestones, gamma } => {
                gamma.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight decay must be non-negative");
        }
        match &self.schedule {
            Schedule::Cosine { total_epochs } if !(*total_epochs > 0.0) => {
                invalid("cosine schedule needs a positive horizon")
            }
            Schedule::MultiStep { gamma, .. } if !(*gamma > 0.0) => invalid("multistep gamma must be positive"),
            _ => Ok(()),
        }
    }
}

/// Projected SGD with (Nesterov) momentum.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, model: &SdNetLite) -> Result<Self> {
        config.validate()?;
        let velocity = model.param_tensors().iter().map(|t| t.zeros_like()).collect();
        Ok(Self { config, velocity })
    }

    /// Learning rate at a (possibly fractional) epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        self.config.lr * self.config.schedule.factor(epoch)
    }

    /// One update, then projection of every dictionary and a step-size
    /// refresh.
    pub fn step(&mut self, model: &mut SdNetLite, grads: &[Tensor], epoch: f64) -> Result<()> {
        let infos = model.params();
        if grads.len() != infos.len() || self.velocity.len() != infos.len() {
            return invalid(format!(
                "{} gradients and {} velocities for {} parameters",
                grads.len(),
                self.velocity.len(),
                infos.len()
            ));
        }
        let lr = self.lr_at(epoch);
        let SgdConfig {
            momentum,
            nesterov,
            weight_decay,
            ..
        } = self.config;
        for (((param, grad), vel), info) in model
            .param_tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(&infos)
        {
            if grad.shape() != info.shape {
                return invalid(format!("gradient for {} has shape {:?}", info.name, grad.shape()));
            }
            let decay = if info.kind.decays() { weight_decay } else { 0.0 };
            let p = param.data_mut();
            let v = vel.data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i] + decay * p[i];
                v[i] = momentum * v[i] + g;
                let d = if nesterov { g + momentum * v[i] } else { v[i] };
                p[i] -= lr * d;
            }
        }
        model.after_update()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_values() {
        let s = Schedule::Cosine { total_epochs: 10.0 };
        assert_eq!(s.factor(0.0), 1.0);
        assert!((0.1 * s.factor(5.0) - 0.05).abs() < 1e-12);
        assert!(s.factor(10.0) < 1e-15);
        assert!(s.factor(20.0) < 1e-15);
    }

    #[test]
    fn multistep_schedule_values() {
        let s = Schedule::MultiStep {
            milestones: vec![2.0, 4.0],
            gamma: 0.1,
        };
        assert_eq!(s.factor(1.9), 1.0);
        assert!((s.factor(2.0) - 0.1).abs() < 1e-15);
        assert!((s.factor(5.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let base = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            schedule: Schedule::Constant,
        };
        assert!(base.validate().is_ok());
        assert!(SgdConfig { lr: 0.0, ..base.clone() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..base.clone() }.validate().is_err());
        assert!(SgdConfig {
            schedule: Schedule::Cosine { total_epochs: 0.0 },
            ..base
        }
        .validate()
        .is_err());
    }
}
