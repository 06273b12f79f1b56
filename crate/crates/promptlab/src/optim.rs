//! SGD and Adam over named parameter tensors.

use crate::tensor::Data;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Keeps per-parameter Adam moments keyed by name. SGD keeps no state.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(String, Data, Data)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Call once per batch, before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Data, grad: &Data) {
        assert_eq!(param.shape, grad.shape, "gradient shape mismatch for {name}");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.values.iter_mut().zip(&grad.values) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let idx = match self.moments.iter().position(|(n, _, _)| n == name) {
                    Some(i) => i,
                    None => {
                        self.moments.push((
                            name.to_string(),
                            Data::zeros(param.shape.clone()),
                            Data::zeros(param.shape.clone()),
                        ));
                        self.moments.len() - 1
                    }
                };
                let (_, m, v) = &mut self.moments[idx];
                let t = self.step.max(1) as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (mi, vi)) in param
                    .values
                    .iter_mut()
                    .zip(&grad.values)
                    .zip(m.values.iter_mut().zip(v.values.iter_mut()))
                {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}
