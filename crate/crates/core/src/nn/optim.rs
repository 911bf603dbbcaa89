use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Used by SGD only.
    #[serde(default)]
    pub momentum: f64,
}

fn default_beta1() -> f64 {
    0.5
}

fn default_beta2() -> f64 {
    0.999
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            momentum: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            momentum,
        }
    }

    pub fn build(&self, vars: Vec<Var>) -> Result<TrainOptimizer> {
        Ok(match self.kind {
            OptimizerKind::Adam => TrainOptimizer::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: self.learning_rate,
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: 1e-8,
                    weight_decay: 0.0,
                },
            )?),
            OptimizerKind::Sgd => {
                TrainOptimizer::Sgd(MomentumSgd::new(vars, self.learning_rate, self.momentum)?)
            }
        })
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug)]
pub struct MomentumSgd {
    vars: Vec<(Var, Tensor)>,
    learning_rate: f64,
    momentum: f64,
}

impl MomentumSgd {
    pub fn new(vars: Vec<Var>, learning_rate: f64, momentum: f64) -> Result<Self> {
        let vars = vars
            .into_iter()
            .filter(|v| v.dtype().is_float())
            .map(|v| {
                let buf = v.zeros_like()?;
                Ok((v, buf))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            learning_rate,
            momentum,
        })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, velocity) in &mut self.vars {
            if let Some(g) = grads.get(var) {
                let v = ((&*velocity * self.momentum)? + g)?.detach();
                var.set(&var.sub(&(&v * self.learning_rate)?)?)?;
                *velocity = v;
            }
        }
        Ok(())
    }
}

pub enum TrainOptimizer {
    Adam(AdamW),
    Sgd(MomentumSgd),
}

impl TrainOptimizer {
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            TrainOptimizer::Adam(o) => o.step(grads)?,
            TrainOptimizer::Sgd(o) => o.step(grads)?,
        }
        Ok(())
    }
}
