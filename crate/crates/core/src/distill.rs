//! Score-distillation gradient fields.
//!
//! Every objective produces the coefficient `c` that multiplies `∂x/∂θ`:
//!
//! | kind | coefficient                                                |
//! |------|------------------------------------------------------------|
//! | SDS  | `ω(t) (ε̂_s(x_t; t, y) − ε)`                                |
//! | CSD  | `ω(t) (ε(x_t; t, y) − ε(x_t; t, ∅))`                       |
//! | VSD  | `ω(t) (ε̂_s(x_t; t, y) − ε_φ′(x_t; t, y))`                  |
//! | ASD  | `ω(t) (ε̂_s(x_t; t, y) − ε(x_{t+Δt}; t+Δt, y))`             |
//!
//! where `ε̂_s` is the classifier-free-guided prediction at scale `s` and
//! `x_t`, `x_{t+Δt}` share one noise draw.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::denoiser::{
    cfg_combine, check_request, Condition, Denoiser, GuidanceSpec, ModelTag, NoisePredictor,
    PredictionType,
};
use crate::error::{validate, Error, Result};
use crate::nn::{init_weight, ParamSet};
use crate::optim::Optimizer;
use crate::rng::{normal_mat, stream, Stream};
use crate::schedule::{diffuse_rows, sample_shift, sample_timestep, NoiseSchedule, ShiftPolicy, TimestepRange};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "SDS", alias = "sds")]
    Sds,
    #[serde(rename = "CSD", alias = "csd")]
    Csd,
    #[serde(rename = "VSD", alias = "vsd")]
    Vsd,
    #[serde(rename = "ASD", alias = "asd")]
    Asd,
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Sds => "SDS",
            ObjectiveKind::Csd => "CSD",
            ObjectiveKind::Vsd => "VSD",
            ObjectiveKind::Asd => "ASD",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SDS" => Ok(ObjectiveKind::Sds),
            "CSD" => Ok(ObjectiveKind::Csd),
            "VSD" => Ok(ObjectiveKind::Vsd),
            "ASD" => Ok(ObjectiveKind::Asd),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

/// Timestep weighting ω(t).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    SigmaSquared,
}

impl Weighting {
    pub fn weight(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match self {
            Weighting::Constant => 1.0,
            Weighting::SigmaSquared => schedule.sigma(t).powi(2),
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Weighting::Constant),
            "sigma_squared" => Ok(Weighting::SigmaSquared),
            _ => Err(Error::Config(format!("unknown weighting `{s}`"))),
        }
    }
}

/// Whether a batch shares one Δt draw or each row draws its own.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftGranularity {
    #[default]
    PerSample,
    PerBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationObjective {
    pub kind: ObjectiveKind,
    pub guidance_main: GuidanceSpec,
    pub guidance_second: GuidanceSpec,
    pub shift: ShiftPolicy,
    pub shift_granularity: ShiftGranularity,
    pub weight: Weighting,
}

impl DistillationObjective {
    /// Defaults: SDS at CFG 100; VSD and ASD at 7.5 with an unguided second term.
    pub fn new(kind: ObjectiveKind) -> Self {
        let main = match kind {
            ObjectiveKind::Sds => 100.0,
            ObjectiveKind::Csd => 1.0,
            ObjectiveKind::Vsd | ObjectiveKind::Asd => 7.5,
        };
        let shift = match kind {
            ObjectiveKind::Asd => ShiftPolicy::new(crate::schedule::ShiftMode::Uniform, 0.1)
                .expect("valid default shift"),
            _ => ShiftPolicy::none(),
        };
        DistillationObjective {
            kind,
            guidance_main: GuidanceSpec::new(main).expect("valid default scale"),
            guidance_second: GuidanceSpec::new(1.0).expect("valid default scale"),
            shift,
            shift_granularity: ShiftGranularity::PerSample,
            weight: Weighting::Constant,
        }
    }

    pub fn with_main_scale(mut self, s: f64) -> Result<Self> {
        self.guidance_main = GuidanceSpec::new(s)?;
        Ok(self)
    }

    pub fn with_shift(mut self, shift: ShiftPolicy) -> Self {
        self.shift = shift;
        self
    }
}

/// One batched evaluation request: rendered rows with their timestep,
/// injected noise and condition.
#[derive(Clone, Copy, Debug)]
pub struct DistillInputs<'a> {
    pub x: &'a Mat,
    pub ts: &'a [usize],
    pub eps: &'a Mat,
    pub conds: &'a [Condition],
}

impl DistillInputs<'_> {
    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let n = self.x.rows();
        validate(self.eps.shape() == self.x.shape(), || {
            "noise and rendered output must share a shape".into()
        })?;
        validate(self.ts.len() == n && self.conds.len() == n, || {
            format!("{n} rows need as many timesteps and conditions")
        })?;
        for &t in self.ts {
            schedule.check_timestep(t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldDiagnostics {
    /// Mean per-row L2 norm of the first (prior) term.
    pub term1_norm: f64,
    /// Mean per-row L2 norm of the subtracted term.
    pub term2_norm: f64,
    /// Per-row L2 norms of the coefficient.
    pub row_norms: Vec<f64>,
    pub ts: Vec<usize>,
    pub dts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub coefficient: Mat,
    /// L2 norm of the whole coefficient.
    pub norm: f64,
    pub diagnostics: FieldDiagnostics,
}

impl GradientField {
    fn assemble(
        schedule: &NoiseSchedule,
        weight: Weighting,
        term1: &Mat,
        term2: &Mat,
        ts: &[usize],
        dts: Vec<usize>,
    ) -> Result<Self> {
        let mut coefficient = term1.sub(term2);
        for (r, &t) in ts.iter().enumerate() {
            let w = weight.weight(schedule, t);
            if w != 1.0 {
                coefficient.row_mut(r).iter_mut().for_each(|v| *v *= w);
            }
        }
        if !coefficient.is_finite() {
            return Err(Error::Numerical("gradient field is not finite".into()));
        }
        let rows = term1.rows();
        let mean_norm = |m: &Mat| {
            if rows == 0 {
                0.0
            } else {
                (0..rows).map(|r| m.row_norm(r)).sum::<f64>() / rows as f64
            }
        };
        let row_norms = (0..rows).map(|r| coefficient.row_norm(r)).collect();
        Ok(GradientField {
            norm: coefficient.norm(),
            diagnostics: FieldDiagnostics {
                term1_norm: mean_norm(term1),
                term2_norm: mean_norm(term2),
                row_norms,
                ts: ts.to_vec(),
                dts,
            },
            coefficient,
        })
    }

    /// Mean per-row coefficient norm, the quantity logged as `grad_norm`.
    pub fn mean_row_norm(&self) -> f64 {
        let r = &self.diagnostics.row_norms;
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

fn check_model(model: &dyn NoisePredictor, schedule: &NoiseSchedule) -> Result<()> {
    if model.schedule_fingerprint() != schedule.fingerprint() {
        return Err(Error::Config(
            "model was built for a different noise schedule".into(),
        ));
    }
    Ok(())
}

/// Evaluates the model on stacked request groups in one call and splits
/// the result back into groups.
fn predict_groups(
    model: &dyn NoisePredictor,
    groups: &[(&Mat, &[usize], &[Condition])],
) -> Result<Vec<Mat>> {
    let xs: Vec<&Mat> = groups.iter().map(|g| g.0).collect();
    let x = Mat::vstack(&xs);
    let ts: Vec<usize> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let conds: Vec<Condition> = groups.iter().flat_map(|g| g.2.iter().copied()).collect();
    let all = model.predict_noise(&x, &ts, &conds)?;
    let mut out = Vec::with_capacity(groups.len());
    let mut start = 0;
    for g in groups {
        out.push(all.slice_rows(start, g.0.rows()));
        start += g.0.rows();
    }
    Ok(out)
}

fn nulls(conds: &[Condition]) -> Vec<Condition> {
    conds.iter().map(|c| c.to_null()).collect()
}

/// Guided prediction at `x_t` plus the conditional prediction, from one
/// stacked call.
fn guided(
    model: &dyn NoisePredictor,
    x_t: &Mat,
    ts: &[usize],
    conds: &[Condition],
    g: GuidanceSpec,
    extra: Option<(&Mat, &[usize])>,
) -> Result<(Mat, Mat, Option<Mat>)> {
    let null = nulls(conds);
    let mut groups: Vec<(&Mat, &[usize], &[Condition])> = vec![(x_t, ts, conds), (x_t, ts, &null)];
    if let Some((xs, ss)) = extra {
        groups.push((xs, ss, conds));
    }
    let mut parts = predict_groups(model, &groups)?;
    let third = if extra.is_some() { parts.pop() } else { None };
    let u = parts.pop().expect("unconditional group");
    let c = parts.pop().expect("conditional group");
    let guided = cfg_combine(&c, &u, g)?;
    Ok((guided, c, third))
}

pub fn grad_sds(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    inp: DistillInputs<'_>,
    g: GuidanceSpec,
    weight: Weighting,
) -> Result<GradientField> {
    check_model(model, schedule)?;
    inp.validate(schedule)?;
    let x_t = diffuse_rows(schedule, inp.x, inp.eps, inp.ts)?;
    let (guided, _, _) = guided(model, &x_t, inp.ts, inp.conds, g, None)?;
    GradientField::assemble(schedule, weight, &guided, inp.eps, inp.ts, vec![0; inp.ts.len()])
}

pub fn grad_csd(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    inp: DistillInputs<'_>,
    weight: Weighting,
) -> Result<GradientField> {
    check_model(model, schedule)?;
    inp.validate(schedule)?;
    let x_t = diffuse_rows(schedule, inp.x, inp.eps, inp.ts)?;
    let null = nulls(inp.conds);
    let parts = predict_groups(model, &[(&x_t, inp.ts, inp.conds), (&x_t, inp.ts, &null)])?;
    GradientField::assemble(schedule, weight, &parts[0], &parts[1], inp.ts, vec![0; inp.ts.len()])
}

pub fn grad_vsd(
    model: &dyn NoisePredictor,
    adapter: &VsdAdapter,
    schedule: &NoiseSchedule,
    inp: DistillInputs<'_>,
    g_main: GuidanceSpec,
    weight: Weighting,
) -> Result<GradientField> {
    check_model(model, schedule)?;
    check_model(adapter, schedule)?;
    if adapter.base.schedule_fingerprint() != model.schedule_fingerprint() {
        return Err(Error::Config("adapter and base model use different schedules".into()));
    }
    inp.validate(schedule)?;
    let x_t = diffuse_rows(schedule, inp.x, inp.eps, inp.ts)?;
    let (guided, _, _) = guided(model, &x_t, inp.ts, inp.conds, g_main, None)?;
    let second = adapter.predict_noise(&x_t, inp.ts, inp.conds)?;
    GradientField::assemble(schedule, weight, &guided, &second, inp.ts, vec![0; inp.ts.len()])
}

/// Draws Δt for every row (or once for the batch) under `objective.shift`.
pub fn sample_shifts(
    objective: &DistillationObjective,
    ts: &[usize],
    range: TimestepRange,
    total_steps: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    match objective.shift_granularity {
        ShiftGranularity::PerSample => ts
            .iter()
            .map(|&t| sample_shift(objective.shift, t, range, total_steps, rng))
            .collect(),
        ShiftGranularity::PerBatch => {
            let u: f64 = rng.random();
            ts.iter()
                .map(|&t| {
                    // One shared uniform draw, scaled to each row's own support.
                    let upper = objective.shift.max_shift(t, range);
                    let dt = match objective.shift.mode() {
                        crate::schedule::ShiftMode::None => 0,
                        crate::schedule::ShiftMode::Deterministic => upper,
                        crate::schedule::ShiftMode::Uniform => {
                            ((u * (upper + 1) as f64).floor() as usize).min(upper)
                        }
                    };
                    Ok(dt.min(total_steps - 1 - t))
                })
                .collect()
        }
    }
}

/// ASD with the shift drawn from the objective's policy.
#[allow(clippy::too_many_arguments)]
pub fn grad_asd(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    inp: DistillInputs<'_>,
    objective: &DistillationObjective,
    range: TimestepRange,
    rng: &mut impl Rng,
) -> Result<GradientField> {
    inp.validate(schedule)?;
    let dts = sample_shifts(objective, inp.ts, range, schedule.total_steps(), rng)?;
    grad_asd_with_shift(
        model,
        schedule,
        inp,
        objective.guidance_main,
        objective.guidance_second,
        &dts,
        objective.weight,
    )
}

/// ASD at explicit shifts. The second term is evaluated at `t + Δt` on
/// `α_{t+Δt} x + σ_{t+Δt} ε` with the same `x` and `ε` as the first.
pub fn grad_asd_with_shift(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    inp: DistillInputs<'_>,
    g_main: GuidanceSpec,
    g_second: GuidanceSpec,
    dts: &[usize],
    weight: Weighting,
) -> Result<GradientField> {
    check_model(model, schedule)?;
    inp.validate(schedule)?;
    validate(dts.len() == inp.ts.len(), || "one shift per row is required".into())?;
    let t_last = schedule.total_steps() - 1;
    let shifted: Vec<usize> = inp
        .ts
        .iter()
        .zip(dts)
        .map(|(&t, &d)| {
            if t + d > t_last {
                log::warn!("shifted timestep {} clamped to {t_last}", t + d);
            }
            (t + d).min(t_last)
        })
        .collect();
    let x_t = diffuse_rows(schedule, inp.x, inp.eps, inp.ts)?;
    let x_s = diffuse_rows(schedule, inp.x, inp.eps, &shifted)?;
    let (guided, second) = if g_second.scale() == 1.0 {
        let (guided, _, third) =
            guided(model, &x_t, inp.ts, inp.conds, g_main, Some((&x_s, &shifted)))?;
        (guided, third.expect("shifted group"))
    } else {
        let null = nulls(inp.conds);
        let parts = predict_groups(model, &[(&x_s, &shifted, inp.conds), (&x_s, &shifted, &null)])?;
        let (guided, _, _) = guided(model, &x_t, inp.ts, inp.conds, g_main, None)?;
        (guided, cfg_combine(&parts[0], &parts[1], g_second)?)
    };
    let dts_eff = shifted.iter().zip(inp.ts).map(|(s, t)| s - t).collect();
    GradientField::assemble(schedule, weight, &guided, &second, inp.ts, dts_eff)
}

/// Dispatches on the objective kind. `adapter` is required for VSD.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    objective: &DistillationObjective,
    model: &dyn NoisePredictor,
    adapter: Option<&VsdAdapter>,
    schedule: &NoiseSchedule,
    inp: DistillInputs<'_>,
    range: TimestepRange,
    rng: &mut impl Rng,
) -> Result<GradientField> {
    match objective.kind {
        ObjectiveKind::Sds => grad_sds(model, schedule, inp, objective.guidance_main, objective.weight),
        ObjectiveKind::Csd => grad_csd(model, schedule, inp, objective.weight),
        ObjectiveKind::Vsd => {
            let a = adapter.ok_or_else(|| Error::Config("VSD needs an adapter".into()))?;
            grad_vsd(model, a, schedule, inp, objective.guidance_main, objective.weight)
        }
        ObjectiveKind::Asd => grad_asd(model, schedule, inp, objective, range, rng),
    }
}

/// Surrogate `⟨c, x⟩` whose gradient with respect to `x` is exactly `c`.
pub fn apply_gradient_field(tape: &mut Tape, field: &GradientField, x: Var) -> Result<Var> {
    validate(tape.value(x).shape() == field.coefficient.shape(), || {
        format!(
            "gradient field {:?} does not match rendered output {:?}",
            field.coefficient.shape(),
            tape.value(x).shape()
        )
    })?;
    Ok(tape.dot_const(x, field.coefficient.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub lr: f64,
    /// Dense layer names to adapt; empty means all.
    pub layers: Vec<String>,
    pub steps_per_iter: usize,
    /// Rows per adapter step, drawn by repeating the rendered batch.
    pub batch_size: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            lr: 1e-3,
            layers: Vec::new(),
            steps_per_iter: 1,
            batch_size: 64,
        }
    }
}

/// Low-rank additive perturbation `x·A·B` on selected dense layers of a
/// frozen base denoiser. `B` starts at zero, so a fresh adapter reproduces
/// the base exactly.
#[derive(Clone, Debug)]
pub struct VsdAdapter {
    base: Arc<Denoiser>,
    /// For each base dense layer, the index of its `(A, B)` pair in `delta`.
    slots: Vec<Option<usize>>,
    delta: ParamSet,
    opt: Optimizer,
    cfg: AdapterConfig,
    fingerprint: String,
}

impl VsdAdapter {
    pub fn new(base: Arc<Denoiser>, cfg: AdapterConfig, seed: u64) -> Result<Self> {
        validate(cfg.rank > 0, || "adapter rank must be positive".into())?;
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("adapter lr must be >= 0, got {}", cfg.lr)));
        }
        let layers = base.dense_layers();
        for name in &cfg.layers {
            if !layers.iter().any(|l| &l.name == name) {
                return Err(Error::Config(format!("denoiser has no dense layer `{name}`")));
            }
        }
        let mut rng = stream(seed, Stream::Adapter);
        let mut delta = ParamSet::new();
        let mut slots = Vec::with_capacity(layers.len());
        for l in &layers {
            if cfg.layers.is_empty() || cfg.layers.contains(&l.name) {
                let a = delta.push(format!("{}.lora_a", l.name), init_weight(&mut rng, l.din, cfg.rank, 1.0));
                delta.push(format!("{}.lora_b", l.name), Mat::zeros(cfg.rank, l.dout));
                slots.push(Some(a));
            } else {
                slots.push(None);
            }
        }
        let opt = Optimizer::adam(cfg.lr, delta.tensors());
        let fingerprint = base.schedule_fingerprint().to_string();
        Ok(VsdAdapter {
            base,
            slots,
            delta,
            opt,
            cfg,
            fingerprint,
        })
    }

    pub fn base(&self) -> &Arc<Denoiser> {
        &self.base
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn delta(&self) -> &ParamSet {
        &self.delta
    }

    /// Frobenius norm of the effective weight perturbations `A·B`.
    pub fn delta_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|&a| crate::kernels::matmul(self.delta.get(a), self.delta.get(a + 1)).sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    fn record(
        &self,
        tape: &mut Tape,
        x_t: &Mat,
        ts: &[usize],
        conds: &[Condition],
        trainable: bool,
    ) -> (Var, Vec<Var>) {
        let base_vars = self.base.params().bind(tape, false);
        let dvars = self.delta.bind(tape, trainable);
        let lora: Vec<Option<(Var, Var)>> = self
            .slots
            .iter()
            .map(|s| s.map(|a| (dvars[a], dvars[a + 1])))
            .collect();
        let x = tape.constant(x_t.clone());
        (self.base.forward(tape, &base_vars, x, ts, conds, Some(&lora)), dvars)
    }
}

impl NoisePredictor for VsdAdapter {
    fn data_dim(&self) -> usize {
        self.base.data_dim()
    }

    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn schedule_fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn tag(&self) -> ModelTag {
        ModelTag::Adapter
    }

    fn predict_noise(&self, x_t: &Mat, ts: &[usize], conds: &[Condition]) -> Result<Mat> {
        check_request(self, self.base.schedule().total_steps(), x_t, ts, conds)?;
        let mut tape = Tape::new();
        let (y, _) = self.record(&mut tape, x_t, ts, conds, false);
        let raw = tape.value(y).clone();
        self.base.output_to_eps(raw, x_t, ts)
    }
}

/// One optimizer step on the adapter's noise-regression loss over
/// `rendered` (treated as data). Returns the loss before the step, or
/// `None` for an empty batch.
pub fn vsd_adapter_step(
    adapter: &mut VsdAdapter,
    schedule: &NoiseSchedule,
    rendered: &Mat,
    conds: &[Condition],
    range: TimestepRange,
    rng: &mut impl Rng,
) -> Result<Option<f64>> {
    if rendered.rows() == 0 {
        return Ok(None);
    }
    check_model(adapter, schedule)?;
    validate(conds.len() == rendered.rows(), || "one condition per rendered row".into())?;
    let n = adapter.cfg.batch_size.max(rendered.rows());
    let idx: Vec<usize> = (0..n).map(|i| i % rendered.rows()).collect();
    let x = rendered.select_rows(&idx);
    let c: Vec<Condition> = idx.iter().map(|&i| conds[i]).collect();
    let ts: Vec<usize> = (0..n).map(|_| sample_timestep(range, rng)).collect();
    let eps = normal_mat(rng, n, x.cols());
    let x_t = diffuse_rows(schedule, &x, &eps, &ts)?;
    let target = match adapter.base.prediction_type() {
        PredictionType::Epsilon => eps,
        PredictionType::Velocity => {
            let mut v = Mat::zeros(n, x.cols());
            for (r, &t) in ts.iter().enumerate() {
                let (a, s) = (schedule.alpha(t), schedule.sigma(t));
                for ((o, e), xv) in v.row_mut(r).iter_mut().zip(eps.row(r)).zip(x.row(r)) {
                    *o = a * e - s * xv;
                }
            }
            v
        }
    };
    let mut tape = Tape::new();
    let (y, dvars) = adapter.record(&mut tape, &x_t, &ts, &c, true);
    let loss = tape.sq_err_mean(y, target);
    let lv = tape.value(loss).get(0, 0);
    let grads = adapter.delta.collect_grads(&tape.backward(loss), &dvars);
    if !lv.is_finite() || !grads.iter().all(Mat::is_finite) {
        return Err(Error::Training {
            step: adapter.opt.steps() as usize,
            reason: format!("adapter loss is {lv}"),
            last_finite: None,
        });
    }
    adapter.opt.step(adapter.delta.tensors_mut(), &grads);
    Ok(Some(lv))
}
