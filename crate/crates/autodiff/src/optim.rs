//! Adam and RMSProp over named `f32` parameters.
//!
//! Moments are kept in `f64`; updates are computed in `f64` and rounded once
//! when written back.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    RmsProp { decay: f64, epsilon: f64 },
}

impl OptimizerKind {
    /// Adam with `beta2 = 0.999` and `epsilon = 1e-8`.
    pub fn adam(beta1: f64) -> Self {
        Self::Adam {
            beta1,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// RMSProp with `decay = 0.9` and `epsilon = 1e-8`.
    pub fn rmsprop() -> Self {
        Self::RmsProp {
            decay: 0.9,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    shape: Vec<usize>,
}

/// Optimizer state: hyperparameters, step counter and per-parameter moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

/// One parameter update: name, parameter, gradient.
pub type Update<'a> = (&'a str, &'a mut Tensor<f32>, &'a Tensor<f32>);

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64) -> Self {
        Self::new(OptimizerKind::adam(beta1), learning_rate)
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::rmsprop(), learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First and second moment buffers for `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|m| (m.first.as_slice(), m.second.as_slice()))
    }

    /// Applies one step to every supplied parameter. Shapes are validated
    /// before anything is modified; the step counter advances by one.
    pub fn apply<'a>(&mut self, updates: impl IntoIterator<Item = Update<'a>>) -> Result<()> {
        let updates: Vec<Update<'a>> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(AutodiffError::shape(
                    "optimizer",
                    format!(
                        "`{name}`: parameter {:?} vs gradient {:?}",
                        param.shape(),
                        grad.shape()
                    ),
                ));
            }
            if let Some(m) = self.moments.get(*name) {
                if m.shape != param.shape() {
                    return Err(AutodiffError::shape(
                        "optimizer",
                        format!("`{name}`: moments {:?} vs parameter {:?}", m.shape, param.shape()),
                    ));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let lr = self.learning_rate;
        for (name, param, grad) in updates {
            let moments = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    first: vec![0.0; param.len()],
                    second: vec![0.0; param.len()],
                    shape: param.shape().to_vec(),
                });
            match self.kind {
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for (((p, &g), m), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(moments.first.iter_mut())
                        .zip(moments.second.iter_mut())
                    {
                        let g = g as f64;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let step = lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                        *p = (*p as f64 - step) as f32;
                    }
                }
                OptimizerKind::RmsProp { decay, epsilon } => {
                    for ((p, &g), v) in param
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(moments.second.iter_mut())
                    {
                        let g = g as f64;
                        *v = decay * *v + (1.0 - decay) * g * g;
                        *p = (*p as f64 - lr * g / (*v + epsilon).sqrt()) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
