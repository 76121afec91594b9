use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Multiply by the decay factor at every milestone epoch.
    Step,
    /// Half-cosine from the base rate down to zero, updated every step.
    #[default]
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(LrSchedule::Step),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::config(format!("unknown lr schedule `{other}` (expected step or cosine)"))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Step => "step",
            LrSchedule::Cosine => "cosine",
        })
    }
}

/// Hyper-parameters of plain SGD with (optionally Nesterov) momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 5e-4, nesterov: true }
    }
}

/// Momentum buffers keyed by parameter name.
///
/// One step on parameter `θ` with gradient `grad`:
///
/// ```text
/// g = grad + weight_decay·θ
/// v = momentum·v + g
/// θ = θ − lr·(g + momentum·v)    (Nesterov)
/// θ = θ − lr·v                   (otherwise)
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd<T> {
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Sgd { velocity: BTreeMap::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    /// Updates every parameter in place. `lr_of` gives the rate for a
    /// parameter name. A parameter without a gradient is treated as having
    /// a zero gradient. Nothing is modified when any gradient is non-finite.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor<T>)>,
        grads: &Gradients<T>,
        cfg: &SgdConfig,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, p) in &params {
            if let Some(g) = grads.by_name(name) {
                if g.shape() != p.shape() {
                    return Err(Error::dim(format!("gradient of {name} is {:?}, parameter is {:?}", g.shape(), p.shape())));
                }
                if let Some(i) = g.first_non_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name} at flat index {i}")));
                }
            }
        }
        let (m, wd) = (T::lit(cfg.momentum), T::lit(cfg.weight_decay));
        for (name, p) in params {
            let lr = T::lit(lr_of(&name));
            let grad = grads.by_name(&name);
            let v = self.velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            let theta = p.data_mut();
            for (i, (th, vi)) in theta.iter_mut().zip(v.data_mut()).enumerate() {
                let g = grad.map_or(T::zero(), |g| g.data()[i]) + wd * *th;
                *vi = m * *vi + g;
                *th = if cfg.nesterov { *th - lr * (g + m * *vi) } else { *th - lr * *vi };
            }
        }
        Ok(())
    }
}

/// Learning rate at a given point of a run.
pub fn learning_rate(
    base: f64,
    schedule: LrSchedule,
    milestones: &[usize],
    decay: f64,
    epoch: usize,
    step: usize,
    total_steps: usize,
) -> f64 {
    match schedule {
        LrSchedule::Step => base * decay.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32),
        LrSchedule::Cosine => {
            let frac = if total_steps == 0 { 0.0 } else { step as f64 / total_steps as f64 };
            0.5 * base * (1.0 + (PI * frac).cos())
        }
    }
}
