use serde::{Deserialize, Serialize};

use super::tensor::ParamSet;

/// SGD with heavy-ball momentum: `v ← μ v + g; θ ← θ − lr v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap applied before the update.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            clip_norm,
            velocity: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        let scale = match self.clip_norm {
            Some(cap) => {
                let sq: f64 = params
                    .iter()
                    .flat_map(|p| p.grad.data())
                    .map(|g| g * g)
                    .sum();
                let n = sq.sqrt();
                if n > cap {
                    cap / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (p, v) in params.as_mut_slice().iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.data().to_vec();
            for ((val, vel), g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = self.momentum * *vel + scale * g;
                *val -= self.lr * *vel;
            }
        }
    }
}
