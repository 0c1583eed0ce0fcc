//! Parameter update rules.

use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd-momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

/// Optimizer state, one slot per parameter tensor in model order.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param<T>>) {
        self.step += 1;
        let lr = T::lit(self.lr);
        for (slot, p) in params.into_iter().enumerate() {
            if self.first.len() <= slot {
                self.first.push(vec![T::zero(); p.value.len()]);
                self.second.push(vec![T::zero(); p.value.len()]);
            }
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let mu = T::lit(momentum);
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(&mut self.first[slot]) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::lit(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::lit(1.0 - beta2.powi(self.step as i32));
                    let eps = T::lit(eps);
                    let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                    for i in 0..p.value.len() {
                        let g = p.grad[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * g;
                        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
