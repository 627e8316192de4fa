//! SGD with momentum and learning-rate schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Param, ParamRole};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup_epochs`, then cosine decay to zero.
    WarmupCosine { warmup_epochs: usize },
}

impl Schedule {
    /// Learning rate at `step` of `total` steps with `per_epoch` steps per epoch.
    pub fn rate(&self, base: f64, step: usize, total: usize, per_epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine { warmup_epochs } => {
                let warm = (warmup_epochs * per_epoch).min(total);
                if step < warm {
                    base * (step + 1) as f64 / warm as f64
                } else {
                    let span = (total - warm).max(1) as f64;
                    let t = (step - warm) as f64 / span;
                    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => f.write_str("constant"),
            Schedule::WarmupCosine { warmup_epochs } => write!(f, "cosine:{warmup_epochs}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::WarmupCosine { warmup_epochs: 0 }),
            _ => {
                let warm = s
                    .strip_prefix("cosine:")
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown schedule {s:?} (constant | cosine[:warmup_epochs])")))?;
                Ok(Schedule::WarmupCosine { warmup_epochs: warm })
            }
        }
    }
}

/// Momentum SGD; weight decay is applied to kernels, experts and routers.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &[Param<T>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return crate::error::shape_err("one gradient per parameter expected");
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            p.value.expect_same_shape(g, &p.name)?;
            let wd = match p.role {
                ParamRole::Kernel | ParamRole::Experts | ParamRole::Routing => T::of(self.weight_decay),
                _ => T::zero(),
            };
            let w = p.value.data_mut();
            for ((w, &g), v) in w.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
