use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, Dimension, Zip};

use super::param::{ParamMut, Parameterized};
use crate::error::{Error, Result};

fn check_grads(params: &[ParamMut<'_>]) -> Result<()> {
    for p in params {
        if let Some((idx, g)) = p.grad.indexed_iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` at {:?} is {g}",
                p.name,
                idx.slice()
            )));
        }
    }
    Ok(())
}

/// `value -= lr * grad` for every parameter, then zeroes the gradients.
///
/// Nothing is updated if any gradient is non-finite.
pub fn sgd_step(params: &mut [ParamMut<'_>], lr: f64) -> Result<()> {
    check_grads(params)?;
    for p in params.iter_mut() {
        Zip::from(&mut p.value).and(&p.grad).for_each(|w, &g| *w -= lr * g);
        p.grad.fill(0.0);
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [ParamMut<'_>], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd|adam)"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stateful optimizer: SGD with optional heavy-ball momentum
/// (`v = mu v + g; w -= lr v`), or Adam with the usual constants
/// (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    steps: i32,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            kind,
            lr,
            momentum,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut params = model.params_mut();
        if self.kind == OptimizerKind::Sgd && self.momentum == 0.0 {
            return sgd_step(&mut params, self.lr);
        }
        check_grads(&params)?;
        if self.first.is_empty() {
            self.first = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let mu = self.momentum;
                let lr = self.lr;
                for (p, v) in params.iter_mut().zip(&mut self.first) {
                    Zip::from(&mut p.value).and(&p.grad).and(v).for_each(|w, &g, v| {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    });
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                let lr = self.lr;
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    });
                }
            }
        }
        for p in params.iter_mut() {
            p.grad.fill(0.0);
        }
        Ok(())
    }
}
