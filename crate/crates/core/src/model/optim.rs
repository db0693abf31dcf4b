use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::SgdMomentum {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => lr >= 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-parameter accumulators. SGD keeps one velocity per parameter, Adam
/// keeps first and second moments. Weight decay is added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[&mut Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            step: 0,
            first: zeros(),
            second,
        })
    }

    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim("optimizer parameter count changed"));
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            match self.config {
                OptimizerConfig::SgdMomentum {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    let v = self.first[i].data_mut();
                    for ((w, &gw), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v) {
                        let d = gw + weight_decay * *w;
                        *vj = momentum * *vj + d;
                        *w -= lr * *vj;
                    }
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
                    for (((w, &gw), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        let d = gw + weight_decay * *w;
                        *mj = beta1 * *mj + (1.0 - beta1) * d;
                        *vj = beta2 * *vj + (1.0 - beta2) * d * d;
                        *w -= lr * (*mj / c1) / ((*vj / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
