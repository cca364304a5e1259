use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state over a fixed list of parameter tensors.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect();
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, dw) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * dw;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for (j, (w, &dw)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * dw;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * dw * dw;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
