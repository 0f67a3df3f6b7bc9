//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn adam_lr() -> f64 {
    1e-3
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn sgd_lr() -> f64 {
    0.1
}
fn sgd_momentum() -> f64 {
    0.9
}
fn sgd_wd() -> f64 {
    1e-4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "adam_lr")]
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "sgd_lr")]
        lr: f64,
        #[serde(default = "sgd_momentum")]
        momentum: f64,
        #[serde(default = "sgd_wd")]
        weight_decay: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(adam_lr())
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr >= 0.0 && momentum >= 0.0 && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Per-leaf optimizer state. Adam keeps first/second moments; SGD keeps a
/// velocity in `first` and leaves `second` empty.
#[derive(Clone, Debug)]
pub struct OptimState {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    lr: Vec<f64>,
}

impl OptimState {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        OptimState {
            config,
            step: 0,
            first: zeros,
            second,
            lr: vec![config.lr(); params.len()],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Overrides the learning rate of leaf `index`.
    pub fn set_lr(&mut self, index: usize, lr: f64) {
        self.lr[index] = lr;
    }

    fn check(&self, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} leaves, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "leaf {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        Ok(())
    }

    /// Applies one update with whichever rule the state was built for.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self.config {
            OptimizerConfig::Adam { .. } => self.adam_step(params, grads),
            OptimizerConfig::Sgd { .. } => self.sgd_momentum_step(params, grads),
        }
    }

    /// Bias-corrected Adam.
    pub fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let OptimizerConfig::Adam {
            beta1, beta2, eps, ..
        } = self.config
        else {
            return Err(Error::Config("adam_step on SGD state".into()));
        };
        self.check(params, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = self.lr[i];
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Heavy-ball SGD with coupled weight decay:
    /// `g += wd*w; v = momentum*v + g; w -= lr*v`.
    pub fn sgd_momentum_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let OptimizerConfig::Sgd {
            momentum,
            weight_decay,
            ..
        } = self.config
        else {
            return Err(Error::Config("sgd_momentum_step on Adam state".into()));
        };
        self.check(params, grads)?;
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = self.lr[i];
            let vel = self.first[i].data_mut();
            for ((w, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(vel) {
                let gd = gj + weight_decay * *w;
                *vj = momentum * *vj + gd;
                *w -= lr * *vj;
            }
        }
        Ok(())
    }
}
