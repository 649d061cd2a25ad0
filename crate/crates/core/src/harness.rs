//! Distillation loops: prompt-specific particle optimization and
//! prompt-amortized generator training, plus grid sweeps over one config
//! key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{save_json, DenoiserCheckpoint};
use crate::config::{DenoiserKind, ExperimentConfig, SceneKind, SeedPolicy};
use crate::data::{Corpus, Regime};
use crate::denoiser::{train_denoiser, ClassOracle, Condition, Denoiser, NoisePredictor};
use crate::distill::{apply_gradient_field, evaluate_objective, vsd_adapter_step, DistillInputs, ObjectiveKind, VsdAdapter};
use crate::error::{validate, Error, Result};
use crate::nn::ParamSet;
use crate::optim::Optimizer;
use crate::par::{self, Exec};
use crate::rng::{normal_mat, stream, LabRng, Stream};
use crate::scene::{render, ConditionalGenerator, ParticleScene, Scene, SceneRequest};
use crate::schedule::{anneal_range, sample_timestep, NoiseSchedule};
use crate::tensor::Mat;

/// The frozen diffusion prior a run distills from.
#[derive(Clone, Debug)]
pub enum Prior {
    Network(Arc<Denoiser>),
    Oracle(Arc<ClassOracle>),
}

impl Prior {
    pub fn predictor(&self) -> &dyn NoisePredictor {
        match self {
            Prior::Network(d) => d.as_ref(),
            Prior::Oracle(o) => o.as_ref(),
        }
    }

    pub fn network(&self) -> Option<&Arc<Denoiser>> {
        match self {
            Prior::Network(d) => Some(d),
            Prior::Oracle(_) => None,
        }
    }

    /// Parameter hash for networks; the schedule hash for the oracle,
    /// which has no parameters.
    pub fn fingerprint(&self) -> String {
        match self {
            Prior::Network(d) => d.params().fingerprint(),
            Prior::Oracle(o) => format!("oracle:{}", o.schedule_fingerprint()),
        }
    }
}

/// Trains a denoiser for the configured regime.
pub fn train_for_config(cfg: &ExperimentConfig, schedule: Arc<NoiseSchedule>) -> Result<Denoiser> {
    let corpus = Corpus::for_regime(cfg.denoiser.regime);
    train_denoiser(
        corpus.source(),
        schedule,
        cfg.denoiser.arch_spec(),
        &cfg.denoiser.train,
        cfg.denoiser.seed,
    )
}

/// Oracle, checkpoint, or a freshly trained network, per `denoiser.kind`.
pub fn build_prior(cfg: &ExperimentConfig, schedule: Arc<NoiseSchedule>) -> Result<Prior> {
    match cfg.denoiser.kind {
        DenoiserKind::Oracle => {
            let corpus = Corpus::for_regime(cfg.denoiser.regime);
            let points = corpus
                .points()
                .ok_or_else(|| Error::Config("the analytic oracle exists for the point regime only".into()))?;
            let oracle = ClassOracle::new(points.classes().to_vec(), points.unconditional(), schedule)?;
            Ok(Prior::Oracle(Arc::new(oracle)))
        }
        DenoiserKind::Trained => match cfg.checkpoint_path() {
            Some(p) => {
                let ckpt = DenoiserCheckpoint::load(&p)?;
                Ok(Prior::Network(Arc::new(Denoiser::from_checkpoint(&ckpt, schedule)?)))
            }
            None => {
                log::info!("no denoiser checkpoint configured; training one");
                Ok(Prior::Network(Arc::new(train_for_config(cfg, schedule)?)))
            }
        },
    }
}

/// One logged optimization step. `t` and `dt` are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub t: f64,
    pub dt: f64,
    pub grad_norm: f64,
    pub term1_norm: f64,
    pub term2_norm: f64,
    pub adapter_loss: Option<f64>,
}

pub const METRICS_HEADER: &str = "iter,t,dt,grad_norm,term1_norm,term2_norm,adapter_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { iter: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub metrics: Vec<MetricRow>,
    /// Scene parameters after the last applied step.
    pub final_params: ParamSet,
    /// Class of each particle (particle scenes only).
    pub particle_classes: Vec<usize>,
    /// How often each class id was sampled, indexed by class.
    pub class_counts: Vec<usize>,
    pub denoiser_fingerprint_before: String,
    pub denoiser_fingerprint_after: String,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Metrics in the fixed CSV column order. Floats use the shortest
    /// representation that round-trips, so equal runs give equal bytes.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for m in &self.metrics {
            let adapter = m.adapter_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.iter, m.t, m.dt, m.grad_norm, m.term1_norm, m.term2_norm, adapter
            );
        }
        s
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv()).map_err(|e| Error::io(path, e))
    }

    /// Final particles for particle scenes.
    pub fn final_particles(&self) -> Option<&Mat> {
        (!self.particle_classes.is_empty()).then(|| self.final_params.get(0))
    }
}

/// Generator snapshot written during amortized runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub format: String,
    pub version: u32,
    pub iter: usize,
    pub generator: ConditionalGenerator,
}

impl GeneratorCheckpoint {
    pub const FORMAT: &'static str = "sdlab.generator";
    pub const VERSION: u32 = 1;
}

/// Runs whichever loop `scene.kind` calls for. Checkpoints go to `out`
/// when given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    prior: &Prior,
    schedule: &NoiseSchedule,
    out: Option<&Path>,
) -> Result<ExperimentRecord> {
    match cfg.scene.kind {
        SceneKind::Particles => run_prompt_specific(cfg, prior, schedule),
        SceneKind::DirectMlp | SceneKind::Hypernet => run_amortized(cfg, prior, schedule, out),
    }
}

/// One particle per entry of `num_particles`, assigned to `run.classes`
/// round-robin, optimized independently against its own condition.
pub fn run_prompt_specific(cfg: &ExperimentConfig, prior: &Prior, schedule: &NoiseSchedule) -> Result<ExperimentRecord> {
    validate_run(cfg, prior, schedule)?;
    if cfg.scene.kind != SceneKind::Particles {
        return Err(Error::Config("prompt-specific runs need scene.kind = particles".into()));
    }
    let model = prior.predictor();
    let n = cfg.scene.num_particles;
    let classes: Vec<usize> = (0..n).map(|i| cfg.run.classes[i % cfg.run.classes.len()]).collect();
    let mut init_rng = stream(cfg.run.seed, Stream::Init);
    let init = normal_mat(&mut init_rng, n, model.data_dim()).scale(cfg.scene.init_std);
    let mut scene = ParticleScene::new(init, classes.iter().map(|&c| Condition::class(c)).collect())?;
    let batch = cfg.run.batch_size;
    let pick = move |rng: &mut LabRng| -> Request {
        if batch >= n {
            Request::Particles((0..n).collect())
        } else {
            Request::Particles((0..batch).map(|_| rng.random_range(0..n)).collect())
        }
    };
    let mut rec = run_loop(cfg, prior, schedule, &mut scene, pick, None)?;
    rec.particle_classes = classes;
    Ok(rec)
}

/// Trains one generator over the corpus in `run.classes`.
pub fn run_amortized(
    cfg: &ExperimentConfig,
    prior: &Prior,
    schedule: &NoiseSchedule,
    out: Option<&Path>,
) -> Result<ExperimentRecord> {
    validate_run(cfg, prior, schedule)?;
    let mut generator = build_generator(cfg, prior.predictor())?;
    let classes = cfg.run.classes.clone();
    let batch = cfg.run.batch_size;
    let noise_dim = cfg.scene.noise_dim;
    let pick = move |rng: &mut LabRng| -> Request {
        let conds: Vec<Condition> = (0..batch)
            .map(|_| Condition::class(classes[rng.random_range(0..classes.len())]))
            .collect();
        let latent = (noise_dim > 0).then(|| normal_mat(rng, batch, noise_dim));
        Request::Conditions(conds, latent)
    };
    run_loop(cfg, prior, schedule, &mut generator, pick, out)
}

/// The generator described by `cfg`, freshly initialized from `run.seed`.
pub fn build_generator(cfg: &ExperimentConfig, model: &dyn NoisePredictor) -> Result<ConditionalGenerator> {
    let gcfg = cfg
        .scene
        .generator_config()
        .ok_or_else(|| Error::Config("amortized runs need scene.kind = direct_mlp or hypernet".into()))?;
    ConditionalGenerator::new(
        gcfg,
        cfg.denoiser.regime,
        model.data_dim(),
        model.num_classes(),
        cfg.run.seed,
    )
}

/// Rebuilds the trained generator of an amortized run.
pub fn restore_generator(record: &ExperimentRecord, model: &dyn NoisePredictor) -> Result<ConditionalGenerator> {
    let mut g = build_generator(&record.config, model)?;
    validate(
        g.params().len() == record.final_params.len()
            && g.params().tensors().iter().zip(record.final_params.tensors()).all(|(a, b)| a.shape() == b.shape()),
        || "record parameters do not match the configured generator".into(),
    )?;
    *g.params_mut() = record.final_params.clone();
    Ok(g)
}

fn validate_run(cfg: &ExperimentConfig, prior: &Prior, schedule: &NoiseSchedule) -> Result<()> {
    cfg.validate()?;
    let model = prior.predictor();
    if model.schedule_fingerprint() != schedule.fingerprint() {
        return Err(Error::Config("denoiser was trained under a different noise schedule".into()));
    }
    if schedule.total_steps() != cfg.schedule.total_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the config says T={}",
            schedule.total_steps(),
            cfg.schedule.total_steps
        )));
    }
    let k = model.num_classes();
    if let Some(bad) = cfg.run.classes.iter().find(|&&c| c >= k) {
        return Err(Error::Validation(format!("class {bad} is not in the denoiser vocabulary of {k}")));
    }
    let expected = match cfg.denoiser.regime {
        Regime::Point => 2,
        Regime::Image => crate::data::IMAGE_DIM,
    };
    if model.data_dim() != expected {
        return Err(Error::Config(format!(
            "regime {:?} expects {expected}-dimensional samples, denoiser has {}",
            cfg.denoiser.regime,
            model.data_dim()
        )));
    }
    if cfg.objective.kind == ObjectiveKind::Vsd && prior.network().is_none() {
        return Err(Error::Config("VSD needs a trained network to adapt".into()));
    }
    Ok(())
}

enum Request {
    Particles(Vec<usize>),
    Conditions(Vec<Condition>, Option<Mat>),
}

impl Request {
    fn as_scene_request(&self) -> SceneRequest<'_> {
        match self {
            Request::Particles(idx) => SceneRequest::Particles(idx),
            Request::Conditions(conds, latent) => SceneRequest::Conditions {
                conds,
                latent: latent.as_ref(),
            },
        }
    }
}

/// Errors that end a run with an `Aborted` record rather than an `Err`.
fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::Numerical(_) | Error::Training { .. })
}

fn run_loop<S, F>(
    cfg: &ExperimentConfig,
    prior: &Prior,
    schedule: &NoiseSchedule,
    scene: &mut S,
    mut pick: F,
    out: Option<&Path>,
) -> Result<ExperimentRecord>
where
    S: Scene + SceneSnapshot,
    F: FnMut(&mut LabRng) -> Request,
{
    let started = Instant::now();
    let model = prior.predictor();
    let objective = cfg.objective.build()?;
    let base_range = cfg.schedule.range()?;
    let anneal = cfg.schedule.anneal_plan(cfg.run.iterations)?;
    let render_spec = cfg.scene.render_spec();
    let regime = cfg.denoiser.regime;
    let seed = cfg.run.seed;
    let total_steps = schedule.total_steps();

    let mut adapter = match (objective.kind, prior.network()) {
        (ObjectiveKind::Vsd, Some(net)) => Some(VsdAdapter::new(net.clone(), cfg.objective.adapter.clone(), seed)?),
        _ => None,
    };
    let mut opt = Optimizer::new(cfg.run.optimizer, cfg.learning_rate(), scene.params().tensors());
    let mut cond_rng = stream(seed, Stream::Condition);
    let mut render_rng = stream(seed, Stream::Render);
    let mut t_rng = stream(seed, Stream::Timestep);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut shift_rng = stream(seed, Stream::Shift);
    let mut adapter_rng = stream(seed, Stream::Adapter);

    let before = prior.fingerprint();
    let mut class_counts = vec![0usize; model.num_classes()];
    let mut metrics = Vec::with_capacity(cfg.run.iterations);
    let mut checkpoints = Vec::new();
    let mut status = RunStatus::Completed;

    for iter in 0..cfg.run.iterations {
        let range = match &anneal {
            Some(plan) => anneal_range(plan, iter.min(plan.total_iters), total_steps)?,
            None => base_range,
        };
        let request = pick(&mut cond_rng);
        let req = request.as_scene_request();
        let conds = scene.conditions(req)?;
        for c in &conds {
            if let Some(k) = c.class_id() {
                class_counts[k] += 1;
            }
        }
        let mut tape = Tape::new();
        let vars = scene.params().bind(&mut tape, true);
        let x = render(&*scene, &mut tape, &vars, req, &render_spec, regime, &mut render_rng)?;
        let rendered = tape.value(x).clone();
        let n = rendered.rows();
        let ts: Vec<usize> = (0..n).map(|_| sample_timestep(range, &mut t_rng)).collect();
        let eps = normal_mat(&mut noise_rng, n, rendered.cols());
        let inp = DistillInputs {
            x: &rendered,
            ts: &ts,
            eps: &eps,
            conds: &conds,
        };
        let field = match evaluate_objective(&objective, model, adapter.as_ref(), schedule, inp, range, &mut shift_rng) {
            Ok(f) => f,
            Err(e) if is_numerical(&e) => {
                status = abort(iter, e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let surrogate = apply_gradient_field(&mut tape, &field, x)?;
        let grads = scene.params().collect_grads(&tape.backward(surrogate), &vars);
        if !grads.iter().all(Mat::is_finite) {
            status = abort(iter, "parameter gradient is not finite".into());
            break;
        }
        opt.step(scene.params_mut().tensors_mut(), &grads);
        if !scene.params().is_finite() {
            status = abort(iter, "scene parameters became non-finite".into());
            break;
        }

        let mut adapter_loss = None;
        if let Some(a) = adapter.as_mut() {
            for _ in 0..a.config().steps_per_iter {
                match vsd_adapter_step(a, schedule, &rendered, &conds, range, &mut adapter_rng) {
                    Ok(l) => adapter_loss = l.or(adapter_loss),
                    Err(e) if is_numerical(&e) => {
                        status = abort(iter, e.to_string());
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if status != RunStatus::Completed {
                break;
            }
        }

        let nf = n.max(1) as f64;
        metrics.push(MetricRow {
            iter,
            t: ts.iter().sum::<usize>() as f64 / nf,
            dt: field.diagnostics.dts.iter().sum::<usize>() as f64 / nf,
            grad_norm: field.mean_row_norm(),
            term1_norm: field.diagnostics.term1_norm,
            term2_norm: field.diagnostics.term2_norm,
            adapter_loss,
        });

        let every = cfg.run.checkpoint_every;
        if let (Some(dir), true) = (out, every > 0 && (iter + 1) % every == 0) {
            if let Some(p) = scene.snapshot(dir, iter + 1)? {
                checkpoints.push(p);
            }
        }
    }

    if let Some(dir) = out {
        if let Some(p) = scene.snapshot(dir, metrics.len())? {
            checkpoints.push(p);
        }
    }
    let after = prior.fingerprint();
    if before != after {
        return Err(Error::Validation("denoiser parameters changed during distillation".into()));
    }
    Ok(ExperimentRecord {
        config: cfg.clone(),
        status,
        metrics,
        final_params: scene.params().clone(),
        particle_classes: Vec::new(),
        class_counts,
        denoiser_fingerprint_before: before,
        denoiser_fingerprint_after: after,
        checkpoints,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn abort(iter: usize, reason: String) -> RunStatus {
    log::error!("run aborted at iteration {iter}: {reason}");
    RunStatus::Aborted { iter, reason }
}

/// Final-state checkpoint writing, per scene type.
trait SceneSnapshot {
    fn snapshot(&self, dir: &Path, iter: usize) -> Result<Option<PathBuf>>;
}

impl SceneSnapshot for ParticleScene {
    fn snapshot(&self, _dir: &Path, _iter: usize) -> Result<Option<PathBuf>> {
        // Particles live in the record itself.
        Ok(None)
    }
}

impl SceneSnapshot for ConditionalGenerator {
    fn snapshot(&self, dir: &Path, iter: usize) -> Result<Option<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("generator_{iter:06}.json"));
        let ckpt = GeneratorCheckpoint {
            format: GeneratorCheckpoint::FORMAT.into(),
            version: GeneratorCheckpoint::VERSION,
            iter,
            generator: self.clone(),
        };
        save_json(&path, &ckpt)?;
        Ok(Some(path))
    }
}

/// The configs a sweep would run, in value order. Fails on an unknown
/// axis before anything runs.
pub fn sweep_configs(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<ExperimentConfig>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut cfg = base.with_override(axis, v)?;
            if cfg.run.seed_policy == SeedPolicy::Increment {
                cfg.run.seed = base.run.seed.wrapping_add(i as u64);
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub axis: String,
    pub value: String,
    pub record: ExperimentRecord,
}

/// Directory name for sweep entry `i`.
pub fn sweep_dir_name(i: usize, axis: &str, value: &str) -> String {
    let clean: String = format!("{axis}={value}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '_' })
        .collect();
    format!("run_{i:02}_{clean}")
}

/// One run per value with at most `jobs` running concurrently (0 means
/// the global pool). Entry `i` checkpoints under `out/sweep_dir_name(i)`.
pub fn ablation_sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[String],
    prior: &Prior,
    schedule: &NoiseSchedule,
    jobs: usize,
    out: Option<&Path>,
) -> Result<Vec<SweepEntry>> {
    let configs = sweep_configs(base, axis, values)?;
    let results = par::with_jobs(jobs, || {
        par::map_indexed(Exec::default(), configs.len(), |i| {
            let dir = out.map(|o| o.join(sweep_dir_name(i, axis, &values[i])));
            run_experiment(&configs[i], prior, schedule, dir.as_deref())
        })
    });
    results
        .into_iter()
        .zip(values)
        .map(|(r, v)| {
            Ok(SweepEntry {
                axis: axis.to_string(),
                value: v.clone(),
                record: r?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub axis: String,
    pub value: String,
    pub objective: ObjectiveKind,
    pub completed: bool,
    pub iterations: usize,
    pub median_grad_norm: f64,
    pub mean_dt: f64,
    /// Mean distance of final particles to their class mean (point-regime
    /// particle runs only).
    pub final_distance: Option<f64>,
}

pub const COMPARISON_HEADER: &str = "axis,value,objective,completed,iterations,median_grad_norm,mean_dt,final_distance";

/// Mean distance of each particle to the mean of its class mixture.
pub fn particle_distance(record: &ExperimentRecord) -> Option<f64> {
    let particles = record.final_particles()?;
    let corpus = Corpus::for_regime(record.config.denoiser.regime);
    let points = corpus.points()?;
    let n = particles.rows();
    let total: f64 = (0..n)
        .map(|i| {
            let mu = points.class(record.particle_classes[i]).mean();
            particles
                .row(i)
                .iter()
                .zip(&mu)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Some(total / n as f64)
}

/// Rows in sweep order.
pub fn comparison_table(entries: &[SweepEntry]) -> Vec<ComparisonRow> {
    entries
        .iter()
        .map(|e| {
            let r = &e.record;
            let norms: Vec<f64> = r.metrics.iter().map(|m| m.grad_norm).collect();
            let steps = r.metrics.len().max(1) as f64;
            ComparisonRow {
                axis: e.axis.clone(),
                value: e.value.clone(),
                objective: r.config.objective.kind,
                completed: r.is_completed(),
                iterations: r.metrics.len(),
                median_grad_norm: if norms.is_empty() { f64::NAN } else { crate::analysis::quantile(&norms, 0.5) },
                mean_dt: r.metrics.iter().map(|m| m.dt).sum::<f64>() / steps,
                final_distance: particle_distance(r),
            }
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(COMPARISON_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.objective,
            r.completed,
            r.iterations,
            r.median_grad_norm,
            r.mean_dt,
            r.final_distance.map(|d| d.to_string()).unwrap_or_default()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, BetaFamily};

    fn oracle_setup() -> (ExperimentConfig, Prior, Arc<NoiseSchedule>) {
        let schedule = Arc::new(build_schedule(1000, BetaFamily::Linear).unwrap());
        let mut cfg = ExperimentConfig::default();
        cfg.denoiser.kind = DenoiserKind::Oracle;
        cfg.run.iterations = 30;
        let prior = build_prior(&cfg, schedule.clone()).unwrap();
        (cfg, prior, schedule)
    }

    #[test]
    fn zero_iterations_leave_the_scene_untouched() {
        let (mut cfg, prior, s) = oracle_setup();
        cfg.run.iterations = 0;
        let r = run_prompt_specific(&cfg, &prior, &s).unwrap();
        assert!(r.metrics.is_empty() && r.is_completed());
        let mut rng = stream(cfg.run.seed, Stream::Init);
        assert_eq!(r.final_particles().unwrap(), &normal_mat(&mut rng, 1, 2));
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let (cfg, prior, s) = oracle_setup();
        let a = run_prompt_specific(&cfg, &prior, &s).unwrap();
        let b = run_prompt_specific(&cfg, &prior, &s).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.metrics.len(), 30);
        assert!(a.metrics.windows(2).all(|w| w[0].iter < w[1].iter));
        let c = run_prompt_specific(&cfg.with_override("run.seed", "1").unwrap(), &prior, &s).unwrap();
        assert_ne!(a.metrics_csv(), c.metrics_csv());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let (cfg, prior, s) = oracle_setup();
        let r = run_prompt_specific(&cfg, &prior, &s).unwrap();
        let csv = r.metrics_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(lines.all(|l| l.split(',').count() == 7 && l.ends_with(',')));
    }

    #[test]
    fn bad_classes_and_vsd_on_oracle_are_rejected() {
        let (cfg, prior, s) = oracle_setup();
        let bad = cfg.with_override("run.classes", "[9]").unwrap();
        assert!(matches!(run_prompt_specific(&bad, &prior, &s), Err(Error::Validation(_))));
        let mut vsd = cfg.clone();
        vsd.objective.kind = ObjectiveKind::Vsd;
        vsd.denoiser.kind = DenoiserKind::Trained;
        assert!(matches!(run_prompt_specific(&vsd, &prior, &s), Err(Error::Config(_))));
        let amort = cfg.with_override("scene.kind", "hypernet").unwrap();
        assert!(matches!(run_prompt_specific(&amort, &prior, &s), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_rejects_unknown_axis_and_handles_empty_values() {
        let (cfg, prior, s) = oracle_setup();
        let err = ablation_sweep(&cfg, "objective.nope", &["1".into()], &prior, &s, 1, None);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(ablation_sweep(&cfg, "objective.eta", &[], &prior, &s, 1, None).unwrap().is_empty());
    }

    #[test]
    fn sweep_rows_follow_values_and_seed_policy() {
        let (mut cfg, prior, s) = oracle_setup();
        cfg.run.iterations = 10;
        cfg.run.seed_policy = SeedPolicy::Increment;
        let vals: Vec<String> = ["0", "0.1", "0.2"].iter().map(|v| v.to_string()).collect();
        let entries = ablation_sweep(&cfg, "objective.eta", &vals, &prior, &s, 2, None).unwrap();
        let rows = comparison_table(&entries);
        assert_eq!(rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["0", "0.1", "0.2"]);
        assert_eq!(entries[2].record.config.run.seed, 2);
        assert_eq!(rows[0].mean_dt, 0.0);
        assert_eq!(comparison_csv(&rows).lines().count(), 4);
    }
}
