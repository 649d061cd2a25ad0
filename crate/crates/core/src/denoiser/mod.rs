//! Noise-prediction models: the trainable toy denoiser, the exact
//! Gaussian-mixture oracle, prediction-type conversion and
//! classifier-free guidance.

pub mod network;
pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{validate, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

pub use network::{train_denoiser, ArchSpec, Denoiser, TrainConfig};
pub use oracle::{ClassOracle, GaussianMixture, GaussianMixtureOracle};

/// A class label acting as the prompt, or the null token used for
/// unconditional predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition {
    class: Option<usize>,
    /// View tag carried for bookkeeping; no model conditions on it.
    view: Option<u32>,
}

impl Condition {
    pub fn class(id: usize) -> Self {
        Condition {
            class: Some(id),
            view: None,
        }
    }

    pub fn null() -> Self {
        Condition {
            class: None,
            view: None,
        }
    }

    pub fn with_view(mut self, view: u32) -> Self {
        self.view = Some(view);
        self
    }

    pub fn is_null(&self) -> bool {
        self.class.is_none()
    }

    pub fn class_id(&self) -> Option<usize> {
        self.class
    }

    pub fn view(&self) -> Option<u32> {
        self.view
    }

    /// Row of the embedding table: classes first, the null token last.
    pub fn embedding_index(&self, num_classes: usize) -> usize {
        self.class.unwrap_or(num_classes)
    }

    /// Same prompt with the class dropped.
    pub fn to_null(self) -> Self {
        Condition { class: None, ..self }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionType {
    #[default]
    Epsilon,
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Pretrained,
    Adapter,
    Oracle,
}

/// Anything that maps `(x_t, t, condition)` to an ε estimate.
pub trait NoisePredictor: Send + Sync {
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn schedule_fingerprint(&self) -> &str;
    fn tag(&self) -> ModelTag;

    /// ε-prediction for each row, with its own timestep and condition.
    fn predict_noise(&self, x_t: &Mat, ts: &[usize], conds: &[Condition]) -> Result<Mat>;
}

/// Validates a prediction request against model metadata.
pub(crate) fn check_request(
    model: &dyn NoisePredictor,
    total_steps: usize,
    x_t: &Mat,
    ts: &[usize],
    conds: &[Condition],
) -> Result<()> {
    validate(x_t.cols() == model.data_dim(), || {
        format!("sample width {} does not match model width {}", x_t.cols(), model.data_dim())
    })?;
    validate(ts.len() == x_t.rows() && conds.len() == x_t.rows(), || {
        format!(
            "{} rows but {} timesteps and {} conditions",
            x_t.rows(),
            ts.len(),
            conds.len()
        )
    })?;
    if let Some(&t) = ts.iter().find(|&&t| t >= total_steps) {
        return Err(Error::Validation(format!("timestep {t} outside 0..{total_steps}")));
    }
    if let Some(c) = conds
        .iter()
        .find(|c| c.class_id().is_some_and(|k| k >= model.num_classes()))
    {
        return Err(Error::Validation(format!(
            "unknown condition id {} (vocabulary has {} classes)",
            c.class_id().unwrap_or_default(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// `ε = σ_t x_t + α_t v`, row-wise.
pub fn convert_v_to_eps(v: &Mat, x_t: &Mat, ts: &[usize], schedule: &NoiseSchedule) -> Result<Mat> {
    validate(v.shape() == x_t.shape() && ts.len() == v.rows(), || {
        "velocity conversion needs matching shapes".into()
    })?;
    let mut out = Mat::zeros(v.rows(), v.cols());
    for (r, &t) in ts.iter().enumerate() {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        for ((o, vv), xv) in out.row_mut(r).iter_mut().zip(v.row(r)).zip(x_t.row(r)) {
            *o = s * xv + a * vv;
        }
    }
    Ok(out)
}

/// Inverse of [`convert_v_to_eps`]: `v = (ε − σ_t x_t) / α_t`.
pub fn convert_eps_to_v(eps: &Mat, x_t: &Mat, ts: &[usize], schedule: &NoiseSchedule) -> Result<Mat> {
    validate(eps.shape() == x_t.shape() && ts.len() == eps.rows(), || {
        "velocity conversion needs matching shapes".into()
    })?;
    let mut out = Mat::zeros(eps.rows(), eps.cols());
    for (r, &t) in ts.iter().enumerate() {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        validate(a > 0.0, || format!("alpha vanishes at t={t}"))?;
        for ((o, e), xv) in out.row_mut(r).iter_mut().zip(eps.row(r)).zip(x_t.row(r)) {
            *o = (e - s * xv) / a;
        }
    }
    Ok(out)
}

/// Classifier-free guidance weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    scale: f64,
}

impl GuidanceSpec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale must be >= 0, got {scale}")));
        }
        Ok(GuidanceSpec { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `ε_u + s·(ε_c − ε_u)`, returning the exact input at `s ∈ {0, 1}`.
pub fn cfg_combine(eps_cond: &Mat, eps_uncond: &Mat, g: GuidanceSpec) -> Result<Mat> {
    validate(eps_cond.shape() == eps_uncond.shape(), || {
        "guidance terms must share a shape".into()
    })?;
    let s = g.scale;
    Ok(if s == 1.0 {
        eps_cond.clone()
    } else if s == 0.0 {
        eps_uncond.clone()
    } else {
        eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
    })
}
