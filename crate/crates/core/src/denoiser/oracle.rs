//! Closed-form noise prediction for Gaussian-mixture data.
//!
//! For `x ~ Σ_k w_k N(μ_k, Σ_k)` the VP-noised marginal at `t` is again a
//! mixture with means `α_t μ_k` and covariances `α_t² Σ_k + σ_t² I`, so the
//! minimum-MSE noise estimate `ε* = −σ_t ∇ log p_t(x_t)` is available
//! exactly.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_request, Condition, ModelTag, NoisePredictor};
use crate::error::{validate, Error, Result};
use crate::par;
use crate::rng::normal;
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Square `d×d` covariance.
    pub cov: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

impl GaussianMixture {
    /// Checks weights sum to one and every covariance is positive definite.
    pub fn new(components: Vec<Component>) -> Result<Self> {
        validate(!components.is_empty(), || "mixture needs a component".into())?;
        let d = components[0].mean.len();
        validate(d > 0, || "mixture dimension must be positive".into())?;
        let total: f64 = components.iter().map(|c| c.weight).sum();
        validate((total - 1.0).abs() < 1e-9, || {
            format!("mixture weights sum to {total}, expected 1")
        })?;
        for (k, c) in components.iter().enumerate() {
            validate(c.weight > 0.0 && c.weight.is_finite(), || {
                format!("component {k} has weight {}", c.weight)
            })?;
            validate(c.mean.len() == d && c.cov.shape() == (d, d), || {
                format!("component {k} does not have dimension {d}")
            })?;
            let m = to_dmatrix(&c.cov);
            validate((&m - m.transpose()).amax() < 1e-12, || {
                format!("component {k} covariance is not symmetric")
            })?;
            if Cholesky::new(m).is_none() {
                return Err(Error::Validation(format!(
                    "component {k} covariance is not positive definite"
                )));
            }
        }
        Ok(GaussianMixture { components })
    }

    /// Shared isotropic covariance `std² I`.
    pub fn isotropic(parts: &[(f64, Vec<f64>)], std: f64) -> Result<Self> {
        let comps = parts
            .iter()
            .map(|(w, mean)| {
                let d = mean.len();
                let mut cov = Mat::zeros(d, d);
                for i in 0..d {
                    cov.set(i, i, std * std);
                }
                Component {
                    weight: *w,
                    mean: mean.clone(),
                    cov,
                }
            })
            .collect();
        Self::new(comps)
    }

    /// `N(0, I)` in `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        Self::isotropic(&[(1.0, vec![0.0; d])], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    pub fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Mat {
        let d = self.dim();
        let factors: Vec<DMatrix<f64>> = self
            .components
            .iter()
            .map(|c| {
                Cholesky::new(to_dmatrix(&c.cov))
                    .expect("validated covariance")
                    .l()
            })
            .collect();
        let mut rng = rng;
        let mut out = Mat::zeros(n, d);
        for r in 0..n {
            let u: f64 = rand::Rng::random(&mut rng);
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let z = DVector::from_iterator(d, (0..d).map(|_| normal(&mut rng)));
            let y = &factors[k] * z;
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = self.components[k].mean[j] + y[j];
            }
        }
        out
    }

    /// The mixture after one forward diffusion step to `t`.
    pub fn noised(&self, alpha: f64, sigma: f64) -> Result<NoisedMixture> {
        let d = self.dim();
        let mut parts = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            let cov = to_dmatrix(&c.cov) * (alpha * alpha)
                + DMatrix::<f64>::identity(d, d) * (sigma * sigma);
            let chol = Cholesky::new(cov).ok_or_else(|| {
                Error::Numerical(format!("noised covariance of component {k} is singular"))
            })?;
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            parts.push(NoisedComponent {
                log_weight: c.weight.ln(),
                mean: DVector::from_iterator(d, c.mean.iter().map(|m| alpha * m)),
                chol,
                logdet,
            });
        }
        Ok(NoisedMixture {
            dim: d,
            sigma,
            parts,
        })
    }

    /// Bayes-optimal per-sample ε error `E‖ε − ε*(x_t)‖²` has no closed form
    /// for general mixtures, but for a single Gaussian it is
    /// `tr(I − σ_t² Σ_t⁻¹)`.
    pub fn single_gaussian_bayes_error(&self, alpha: f64, sigma: f64) -> Option<f64> {
        if self.components.len() != 1 {
            return None;
        }
        let nm = self.noised(alpha, sigma).ok()?;
        let inv = nm.parts[0].chol.inverse();
        Some(self.dim() as f64 - sigma * sigma * inv.trace())
    }
}

struct NoisedComponent {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

/// Mixture with per-component factorizations cached for one timestep.
pub struct NoisedMixture {
    dim: usize,
    sigma: f64,
    parts: Vec<NoisedComponent>,
}

impl NoisedMixture {
    /// Component log-densities and `Σ_{t,k}⁻¹ (x − α μ_k)` for each component.
    fn terms(&self, x: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let xv = DVector::from_column_slice(x);
        let c0 = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut logs = Vec::with_capacity(self.parts.len());
        let mut sols = Vec::with_capacity(self.parts.len());
        for p in &self.parts {
            let diff = &xv - &p.mean;
            let sol = p.chol.solve(&diff);
            logs.push(p.log_weight + c0 - 0.5 * p.logdet - 0.5 * diff.dot(&sol));
            sols.push(sol);
        }
        (logs, sols)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let (logs, _) = self.terms(x);
        log_sum_exp(&logs)
    }

    /// `∇ log p_t(x) = −Σ_k r_k(x) Σ_{t,k}⁻¹ (x − α μ_k)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let (logs, sols) = self.terms(x);
        let lse = log_sum_exp(&logs);
        let mut g = vec![0.0; self.dim];
        for (l, s) in logs.iter().zip(&sols) {
            let r = (l - lse).exp();
            for (gi, si) in g.iter_mut().zip(s.iter()) {
                *gi -= r * si;
            }
        }
        g
    }

    /// `ε* = −σ_t ∇ log p_t(x)`.
    pub fn noise(&self, x: &[f64]) -> Vec<f64> {
        self.score(x).into_iter().map(|g| -self.sigma * g).collect()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact noise predictor for one mixture under a fixed schedule.
#[derive(Clone, Debug)]
pub struct GaussianMixtureOracle {
    mixture: GaussianMixture,
    schedule: Arc<NoiseSchedule>,
}

impl GaussianMixtureOracle {
    pub fn new(mixture: GaussianMixture, schedule: Arc<NoiseSchedule>) -> Self {
        GaussianMixtureOracle { mixture, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn noised(&self, t: usize) -> Result<NoisedMixture> {
        self.schedule.check_timestep(t)?;
        self.mixture
            .noised(self.schedule.alpha(t), self.schedule.sigma(t))
    }

    /// Exact optimal ε for every row of `x_t` at timestep `t`.
    pub fn oracle_noise(&self, x_t: &Mat, t: usize) -> Result<Mat> {
        validate(x_t.cols() == self.mixture.dim(), || {
            format!("oracle expects width {}, got {}", self.mixture.dim(), x_t.cols())
        })?;
        let nm = self.noised(t)?;
        let mut out = x_t.clone();
        let cols = out.cols();
        let exec = par::auto(x_t.rows() * self.mixture.components.len() * cols * cols * 4);
        par::for_each_row_mut(exec, out.data_mut(), cols, |_, row| {
            let e = nm.noise(row);
            row.copy_from_slice(&e);
        });
        validate(out.is_finite(), || "oracle produced non-finite noise".into())?;
        Ok(out)
    }
}

/// Class-conditional oracle: one mixture per class plus the label-marginal
/// mixture for the null condition.
#[derive(Clone, Debug)]
pub struct ClassOracle {
    classes: Vec<GaussianMixtureOracle>,
    unconditional: GaussianMixtureOracle,
    fingerprint: String,
}

impl ClassOracle {
    pub fn new(
        classes: Vec<GaussianMixture>,
        unconditional: GaussianMixture,
        schedule: Arc<NoiseSchedule>,
    ) -> Result<Self> {
        validate(!classes.is_empty(), || "class oracle needs a class".into())?;
        let d = unconditional.dim();
        validate(classes.iter().all(|c| c.dim() == d), || {
            "class mixtures must share a dimension".into()
        })?;
        let fingerprint = schedule.fingerprint();
        Ok(ClassOracle {
            classes: classes
                .into_iter()
                .map(|m| GaussianMixtureOracle::new(m, schedule.clone()))
                .collect(),
            unconditional: GaussianMixtureOracle::new(unconditional, schedule),
            fingerprint,
        })
    }

    pub fn for_condition(&self, c: &Condition) -> &GaussianMixtureOracle {
        match c.class_id() {
            Some(k) => &self.classes[k],
            None => &self.unconditional,
        }
    }
}

impl NoisePredictor for ClassOracle {
    fn data_dim(&self) -> usize {
        self.unconditional.mixture.dim()
    }

    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn schedule_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tag(&self) -> ModelTag {
        ModelTag::Oracle
    }

    fn predict_noise(&self, x_t: &Mat, ts: &[usize], conds: &[Condition]) -> Result<Mat> {
        check_request(self, self.unconditional.schedule.total_steps(), x_t, ts, conds)?;
        let d = x_t.cols();
        let mut out = Mat::zeros(x_t.rows(), d);
        // Group rows by (t, condition) so each factorization is built once.
        let mut order: Vec<usize> = (0..x_t.rows()).collect();
        order.sort_by_key(|&r| (ts[r], conds[r].embedding_index(self.classes.len())));
        let mut i = 0;
        while i < order.len() {
            let r0 = order[i];
            let key = (ts[r0], conds[r0].class_id());
            let nm = self.for_condition(&conds[r0]).noised(ts[r0])?;
            while i < order.len() && (ts[order[i]], conds[order[i]].class_id()) == key {
                let r = order[i];
                let e = nm.noise(x_t.row(r));
                out.row_mut(r).copy_from_slice(&e);
                i += 1;
            }
        }
        validate(out.is_finite(), || "oracle produced non-finite noise".into())?;
        Ok(out)
    }
}
