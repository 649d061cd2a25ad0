//! Measurements: noise-prediction error curves, the shifted-timestep error
//! inequality, gradient-norm statistics and classifier recall.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::ConditionalSource;
use crate::denoiser::{Condition, GaussianMixtureOracle, ModelTag, NoisePredictor};
use crate::distill::ObjectiveKind;
use crate::error::{validate, Error, Result};
use crate::harness::ExperimentRecord;
use crate::nn::{add_dense, dense, DenseIds, ParamSet};
use crate::optim::Optimizer;
use crate::par;
use crate::rng::{normal_mat, stream, substream, Stream};
use crate::schedule::{diffuse, NoiseSchedule, TimestepRange};
use crate::tensor::Mat;

/// Samples with the condition each was drawn under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub x: Mat,
    pub conds: Vec<Condition>,
}

impl ProbeSet {
    pub fn new(x: Mat, conds: Vec<Condition>) -> Result<Self> {
        validate(x.rows() == conds.len(), || "one condition per probe sample".into())?;
        Ok(ProbeSet { x, conds })
    }

    /// `per_cond` fresh samples for each listed class.
    pub fn from_source(
        source: &dyn ConditionalSource,
        classes: &[usize],
        per_cond: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        let k = source.num_classes();
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Validation(format!("class {bad} not in corpus of {k}")));
        }
        let parts: Vec<Mat> = classes
            .iter()
            .map(|&c| source.sample_class(c, per_cond, rng))
            .collect();
        let refs: Vec<&Mat> = parts.iter().collect();
        let x = if refs.is_empty() {
            Mat::zeros(0, source.data_dim())
        } else {
            Mat::vstack(&refs)
        };
        let conds = classes
            .iter()
            .flat_map(|&c| std::iter::repeat_n(Condition::class(c), per_cond))
            .collect();
        ProbeSet::new(x, conds)
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }
}

/// `n` evenly spaced integer timesteps covering `range` inclusively.
pub fn probe_timesteps(range: TimestepRange, n: usize) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![range.t_min()],
        _ => {
            let span = (range.t_max() - range.t_min()) as f64;
            (0..n)
                .map(|i| range.t_min() + (span * i as f64 / (n - 1) as f64).round() as usize)
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub timesteps: Vec<usize>,
    pub mean_error: Vec<f64>,
    /// Standard deviation of the per-sample error (not of the mean).
    pub std_error: Vec<f64>,
    pub sample_count: usize,
    pub tag: ModelTag,
}

impl ErrorCurve {
    /// Standard error of `mean_error[i]`.
    pub fn standard_error(&self, i: usize) -> f64 {
        self.std_error[i] / (self.sample_count as f64).sqrt()
    }

    pub fn overall_mean(&self) -> f64 {
        self.mean_error.iter().sum::<f64>() / self.mean_error.len().max(1) as f64
    }

    /// Rank correlation of mean error against timestep.
    pub fn trend(&self) -> f64 {
        let t: Vec<f64> = self.timesteps.iter().map(|&t| t as f64).collect();
        spearman(&t, &self.mean_error)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Row-wise squared distance `‖a_r − b_r‖²`.
fn row_sq_err(a: &Mat, b: &Mat) -> Vec<f64> {
    (0..a.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).powi(2)).sum())
        .collect()
}

/// Error profile: each sample gets one Gaussian noise draw,
/// shared across all probe timesteps; conditions weigh equally when the
/// set holds the same number of samples per condition.
pub fn profile_error_curve(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    set: &ProbeSet,
    probes: &[usize],
    seed: u64,
) -> Result<ErrorCurve> {
    validate(!set.is_empty(), || "error profile needs at least one sample".into())?;
    validate(!probes.is_empty(), || "error profile needs probe timesteps".into())?;
    for &t in probes {
        schedule.check_timestep(t)?;
    }
    let mut rng = stream(seed, Stream::Analysis);
    let eps = normal_mat(&mut rng, set.x.rows(), set.x.cols());
    let per_probe = par::map_indexed(par::Exec::default(), probes.len(), |i| -> Result<(f64, f64)> {
        let t = probes[i];
        let x_t = diffuse(schedule, &set.x, &eps, t)?;
        let ts = vec![t; set.len()];
        let pred = model.predict_noise(&x_t, &ts, &set.conds)?;
        Ok(mean_std(&row_sq_err(&pred, &eps)))
    });
    let mut mean_error = Vec::with_capacity(probes.len());
    let mut std_error = Vec::with_capacity(probes.len());
    for r in per_probe {
        let (m, s) = r?;
        mean_error.push(m);
        std_error.push(s);
    }
    Ok(ErrorCurve {
        timesteps: probes.to_vec(),
        mean_error,
        std_error,
        sample_count: set.len(),
        tag: model.tag(),
    })
}

/// Monte-Carlo Bayes error `E‖ε*(x_t) − ε‖²` of an exact oracle with
/// fresh data and noise, with its standard error.
pub fn bayes_error_mc(oracle: &GaussianMixtureOracle, t: usize, n: usize, seed: u64) -> Result<(f64, f64)> {
    validate(n > 1, || "Monte-Carlo estimate needs at least two samples".into())?;
    const CHUNK: usize = 10_000;
    let chunks = n.div_ceil(CHUNK);
    let parts = par::map_indexed(par::Exec::default(), chunks, |c| -> Result<Vec<f64>> {
        let m = CHUNK.min(n - c * CHUNK);
        let mut rng = substream(seed, Stream::Analysis, (t * chunks + c) as u64);
        let x = oracle.mixture().sample(m, &mut rng);
        let eps = normal_mat(&mut rng, m, x.cols());
        let x_t = diffuse(oracle.schedule(), &x, &eps, t)?;
        let pred = oracle.oracle_noise(&x_t, t)?;
        Ok(row_sq_err(&pred, &eps))
    });
    let mut all = Vec::with_capacity(n);
    for p in parts {
        all.extend(p?);
    }
    let (m, s) = mean_std(&all);
    Ok((m, s / (n as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftPairResult {
    pub t: usize,
    pub dt: usize,
    pub mean_at_t: f64,
    pub mean_at_shift: f64,
    /// Standard error of the paired difference.
    pub diff_stderr: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftInequalityReport {
    pub pairs: Vec<ShiftPairResult>,
    pub n_draws: usize,
    pub all_pass: bool,
}

/// For each `(t, Δt)`: mean ‖ε(x_{t+Δt}) − ε‖² versus mean ‖ε(x_t) − ε‖²
/// over `n_draws` shared `(x, ε)` pairs. A pair passes when the shifted
/// mean is at most `(1 + margin)` times the unshifted one.
pub fn check_shift_inequality(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    set: &ProbeSet,
    pairs: &[(usize, usize)],
    n_draws: usize,
    margin: f64,
    seed: u64,
) -> Result<ShiftInequalityReport> {
    validate(!set.is_empty() && n_draws > 0, || "inequality check needs samples and draws".into())?;
    let mut rng = stream(seed, Stream::Analysis);
    let idx: Vec<usize> = (0..n_draws).map(|i| i % set.len()).collect();
    let x = set.x.select_rows(&idx);
    let conds: Vec<Condition> = idx.iter().map(|&i| set.conds[i]).collect();
    let eps = normal_mat(&mut rng, n_draws, x.cols());
    let mut out = Vec::with_capacity(pairs.len());
    for &(t, dt) in pairs {
        schedule.check_timestep(t + dt)?;
        let err_at = |tt: usize| -> Result<Vec<f64>> {
            let x_t = diffuse(schedule, &x, &eps, tt)?;
            let pred = model.predict_noise(&x_t, &vec![tt; n_draws], &conds)?;
            Ok(row_sq_err(&pred, &eps))
        };
        let a = err_at(t)?;
        let b = if dt == 0 { a.clone() } else { err_at(t + dt)? };
        let (ma, _) = mean_std(&a);
        let (mb, _) = mean_std(&b);
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
        let (_, sd) = mean_std(&diffs);
        out.push(ShiftPairResult {
            t,
            dt,
            mean_at_t: ma,
            mean_at_shift: mb,
            diff_stderr: sd / (n_draws as f64).sqrt(),
            pass: mb <= ma * (1.0 + margin),
        });
    }
    let all_pass = out.iter().all(|p| p.pass);
    Ok(ShiftInequalityReport {
        pairs: out,
        n_draws,
        all_pass,
    })
}

/// Ranks with ties sharing their average rank (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman: length mismatch");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Linear-interpolated quantile of an unsorted sample.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormRow {
    pub objective: ObjectiveKind,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub count: usize,
}

/// Median and 10/90% quantiles of logged `grad_norm`, keyed by objective.
pub fn grad_norm_stats(records: &[ExperimentRecord]) -> Result<Vec<GradNormRow>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Validation("no records to summarize".into()))?;
    for r in records {
        validate(
            r.config.scene == first.config.scene
                && r.config.run.classes == first.config.run.classes
                && r.config.denoiser.regime == first.config.denoiser.regime,
            || "records must share the scene and corpus".into(),
        )?;
    }
    let mut by_kind: BTreeMap<ObjectiveKind, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_kind
            .entry(r.config.objective.kind)
            .or_default()
            .extend(r.metrics.iter().map(|m| m.grad_norm));
    }
    Ok(by_kind
        .into_iter()
        .map(|(objective, v)| GradNormRow {
            objective,
            median: quantile(&v, 0.5),
            p10: quantile(&v, 0.1),
            p90: quantile(&v, 0.9),
            count: v.len(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub test_size: usize,
    /// Accuracy on the held-out split required before recall is reported.
    pub gate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 64,
            steps: 1500,
            batch_size: 128,
            lr: 3e-3,
            test_size: 2000,
            gate: 0.98,
        }
    }
}

/// Small MLP classifier trained on fresh corpus samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    params: ParamSet,
    l1: DenseIds,
    l2: DenseIds,
    out: DenseIds,
    num_classes: usize,
    test_accuracy: f64,
    gate: f64,
}

impl Classifier {
    fn logits(&self, x: &Mat) -> Mat {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.record(&mut tape, &vars, xv);
        tape.value(y).clone()
    }

    fn record(&self, tape: &mut Tape, vars: &[crate::autodiff::Var], x: crate::autodiff::Var) -> crate::autodiff::Var {
        let h = dense(tape, x, vars, self.l1, None);
        let h = tape.silu(h);
        let h = dense(tape, h, vars, self.l2, None);
        let h = tape.silu(h);
        dense(tape, h, vars, self.out, None)
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        let l = self.logits(x);
        (0..l.rows())
            .map(|r| {
                l.row(r)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    pub fn test_accuracy(&self) -> f64 {
        self.test_accuracy
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }
}

pub fn train_classifier(source: &dyn ConditionalSource, cfg: &ClassifierConfig, seed: u64) -> Result<Classifier> {
    validate(cfg.batch_size > 0 && cfg.test_size > 0, || "classifier needs batch and test sizes".into())?;
    let k = source.num_classes();
    let mut init = stream(seed, Stream::Init);
    let mut params = ParamSet::new();
    let l1 = add_dense(&mut params, &mut init, "l1", source.data_dim(), cfg.hidden, 1.0);
    let l2 = add_dense(&mut params, &mut init, "l2", cfg.hidden, cfg.hidden, 1.0);
    let out = add_dense(&mut params, &mut init, "out", cfg.hidden, k, 0.5);
    let mut clf = Classifier {
        params,
        l1,
        l2,
        out,
        num_classes: k,
        test_accuracy: 0.0,
        gate: cfg.gate,
    };
    let mut rng = stream(seed, Stream::Classifier);
    let mut opt = Optimizer::adam(cfg.lr, clf.params.tensors());
    for step in 0..cfg.steps {
        let (x, y) = source.sample_batch(cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars = clf.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let logits = clf.record(&mut tape, &vars, xv);
        let loss = tape.softmax_xent(logits, y);
        let lv = tape.value(loss).get(0, 0);
        if !lv.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("classifier loss {lv}"),
                last_finite: None,
            });
        }
        let g = clf.params.collect_grads(&tape.backward(loss), &vars);
        opt.step(clf.params.tensors_mut(), &g);
    }
    let mut test_rng = stream(seed ^ 0x5eed, Stream::Classifier);
    let (x, y) = source.sample_batch(cfg.test_size, &mut test_rng);
    let pred = clf.predict(&x);
    clf.test_accuracy = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    Ok(clf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `(class, hits, total)` for every class that appears.
    pub per_class: Vec<(usize, usize, usize)>,
    pub recall_at_1: f64,
    pub classifier_fingerprint: String,
}

/// Fraction of samples the gated classifier assigns to their intended class.
pub fn recall_at_1(samples: &Mat, intended: &[usize], clf: &Classifier) -> Result<RecallReport> {
    validate(samples.rows() > 0, || "recall needs at least one sample".into())?;
    validate(samples.rows() == intended.len(), || "one intended class per sample".into())?;
    if clf.test_accuracy < clf.gate {
        return Err(Error::Validation(format!(
            "classifier accuracy {:.4} is below the {:.2} gate",
            clf.test_accuracy, clf.gate
        )));
    }
    let pred = clf.predict(samples);
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, &c) in pred.iter().zip(intended) {
        let e = per.entry(c).or_default();
        e.1 += 1;
        if *p == c {
            e.0 += 1;
        }
    }
    let hits: usize = per.values().map(|v| v.0).sum();
    Ok(RecallReport {
        per_class: per.into_iter().map(|(c, (h, t))| (c, h, t)).collect(),
        recall_at_1: hits as f64 / intended.len() as f64,
        classifier_fingerprint: clf.fingerprint(),
    })
}

/// Classes drawn uniformly for `n` samples, as used for chance-level checks.
pub fn uniform_labels(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}
