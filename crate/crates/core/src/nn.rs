//! Parameter containers and layer helpers shared by the toy networks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Tape, Var};
use crate::rng::normal;
use crate::tensor::Mat;

/// Named list of parameter tensors, addressed by insertion index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Places every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Gradients for bound tensors, zero where nothing flowed.
    pub fn collect_grads(&self, grads: &Grads, vars: &[Var]) -> Vec<Mat> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Indices of a dense layer's weight (`in×out`) and bias (`1×out`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseIds {
    pub w: usize,
    pub b: usize,
}

impl DenseIds {
    pub fn dims(&self, params: &ParamSet) -> (usize, usize) {
        params.get(self.w).shape()
    }
}

/// Gaussian init scaled by `gain / sqrt(fan_in)`.
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Mat {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    Mat::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| std * normal(rng)).collect(),
    )
}

pub fn add_dense(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> DenseIds {
    let w = params.push(format!("{name}.w"), init_weight(rng, fan_in, fan_out, gain));
    let b = params.push(format!("{name}.b"), Mat::zeros(1, fan_out));
    DenseIds { w, b }
}

/// `x·W + b`, plus the low-rank term `(x·A)·B` when an adapter pair is given.
pub fn dense(tape: &mut Tape, x: Var, vars: &[Var], ids: DenseIds, lora: Option<(Var, Var)>) -> Var {
    let mut y = tape.matmul(x, vars[ids.w]);
    if let Some((a, b)) = lora {
        let xa = tape.matmul(x, a);
        let delta = tape.matmul(xa, b);
        y = tape.add(y, delta);
    }
    tape.add_bias(y, vars[ids.b])
}

/// Sinusoidal timestep features `[sin(t·f_k), cos(t·f_k)]` with geometric frequencies.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros(ts.len(), dim);
    for (r, &t) in ts.iter().enumerate() {
        let row = out.row_mut(r);
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[k] = arg.sin();
            row[half + k] = arg.cos();
        }
    }
    out
}
