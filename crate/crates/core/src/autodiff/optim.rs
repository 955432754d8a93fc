use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-group optimizer state. Moment buffers are only populated for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> =
                    params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
                (zeros.clone(), zeros)
            }
        };
        OptimizerState {
            kind,
            lr,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// Apply one update using the gradients accumulated on each parameter,
    /// then clear them. Fails before touching anything if a gradient is missing.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for i in 0..params.len() {
            if params.get(i).grad.is_none() {
                return Err(Error::MissingGrad(params.name(i).to_string()));
            }
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    let t = params.get_mut(i);
                    let g = t.grad.take().expect("checked above");
                    for (p, gv) in t.data_mut().iter_mut().zip(&g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for i in 0..params.len() {
                    let t = params.get_mut(i);
                    let g = t.grad.take().expect("checked above");
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, p) in t.data_mut().iter_mut().enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
