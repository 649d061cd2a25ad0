//! First-order optimizers over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Mat]) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() },
            v: if kind == OptimizerKind::Adam { zeros } else { Vec::new() },
        }
    }

    pub fn sgd(lr: f64, params: &[Mat]) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr, params)
    }

    pub fn adam(lr: f64, params: &[Mat]) -> Self {
        Optimizer::new(OptimizerKind::Adam, lr, params)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step `params -= lr · update(grads)`.
    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len(), "optimizer: gradient count mismatch");
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[k].data_mut();
                    let v = self.v[k].data_mut();
                    for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *pv -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
