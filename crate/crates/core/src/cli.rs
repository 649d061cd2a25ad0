//! Command-line front end. Every verb reads one config file, applies
//! `--set` overrides, runs, and writes a self-describing output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    check_shift_inequality, grad_norm_stats, probe_timesteps, profile_error_curve, recall_at_1, train_classifier,
    ProbeSet,
};
use crate::checkpoint::{load_json, save_json};
use crate::config::ExperimentConfig;
use crate::data::{Corpus, Regime};
use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::harness::{
    ablation_sweep, build_prior, comparison_table, restore_generator, run_amortized, run_prompt_specific,
    sweep_dir_name, train_for_config, ExperimentRecord, Prior, RunStatus,
};
use crate::report::{emit_report, write_image_grid, ReportInputs};
use crate::rng::{normal_mat, stream, Stream};
use crate::schedule::NoiseSchedule;

pub const ENV_OUT_ROOT: &str = "DISTILL_OUT_ROOT";
pub const ENV_THREADS: &str = "DISTILL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sdlab", version, about = "Score distillation experiments on toy diffusion priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `objective.kind=ASD`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Replaces `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to `$DISTILL_OUT_ROOT/<verb>`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy conditional denoiser and save its checkpoint.
    TrainDenoiser(Common),
    /// Noise-prediction error against timestep.
    ProfileError(Common),
    /// Prompt-specific distillation of particles.
    Distill(Common),
    /// Prompt-amortized distillation of a conditional generator.
    DistillAmortized(Common),
    /// One run per value of a config key, plus a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Config key to vary, e.g. `objective.eta`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Maximum concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Error at shifted timesteps versus the original timestep.
    CheckInequality(Common),
    /// Tables and plots from finished run directories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories holding `record.json`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::TrainDenoiser(_) => "train-denoiser",
            Command::ProfileError(_) => "profile-error",
            Command::Distill(_) => "distill",
            Command::DistillAmortized(_) => "distill-amortized",
            Command::Ablate { .. } => "ablate",
            Command::CheckInequality(_) => "check-inequality",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::TrainDenoiser(c)
            | Command::ProfileError(c)
            | Command::Distill(c)
            | Command::DistillAmortized(c)
            | Command::CheckInequality(c) => c,
            Command::Ablate { common, .. } | Command::Report { common, .. } => common,
        }
    }
}

/// Parses `argv` and runs the command. Returns the process exit status:
/// 0 on success, 2 on usage, configuration or validation errors, 3 on a
/// numerical abort.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = std::env::var(ENV_THREADS).ok().and_then(|v| v.parse().ok()) {
        crate::par::init_threads(n);
    }
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cmd: &Command) -> PathBuf {
    match &cmd.common().out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(ENV_OUT_ROOT).map(PathBuf::from).unwrap_or_else(|| "runs".into());
            root.join(cmd.verb())
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, body: &str) -> Result<()> {
    std::fs::write(p, body).map_err(|e| Error::io(p, e))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml_string()?)
}

fn schedule_for(cfg: &ExperimentConfig) -> Result<Arc<NoiseSchedule>> {
    Ok(Arc::new(cfg.schedule.build()?))
}

/// Builds the prior and, for freshly trained networks, saves it next to
/// the outputs so later commands can point `denoiser.checkpoint` at it.
fn prior_for(cfg: &ExperimentConfig, schedule: Arc<NoiseSchedule>, dir: &Path) -> Result<Prior> {
    let prior = build_prior(cfg, schedule)?;
    if let (Prior::Network(net), None) = (&prior, cfg.checkpoint_path()) {
        net.to_checkpoint().save(&dir.join("denoiser.json"))?;
    }
    Ok(prior)
}

fn dispatch(cmd: &Command) -> Result<i32> {
    let dir = out_dir(cmd);
    match cmd {
        Command::TrainDenoiser(c) => {
            let mut cfg = resolve(c)?;
            if let Some(s) = c.seed {
                cfg.denoiser.seed = s;
            }
            mkdir(&dir)?;
            write_config(&dir, &cfg)?;
            match train_for_config(&cfg, schedule_for(&cfg)?) {
                Ok(net) => {
                    let path = dir.join("denoiser.json");
                    net.to_checkpoint().save(&path)?;
                    println!("{}", path.display());
                    Ok(0)
                }
                Err(Error::Training {
                    step,
                    reason,
                    last_finite,
                }) => {
                    if let Some(ck) = last_finite {
                        ck.save(&dir.join("denoiser.last_finite.json"))?;
                    }
                    Err(Error::Training {
                        step,
                        reason,
                        last_finite: None,
                    })
                }
                Err(e) => Err(e),
            }
        }
        Command::ProfileError(c) => {
            let cfg = resolve(c)?;
            mkdir(&dir)?;
            write_config(&dir, &cfg)?;
            let schedule = schedule_for(&cfg)?;
            let prior = prior_for(&cfg, schedule.clone(), &dir)?;
            let set = probe_set(&cfg)?;
            let probes = probe_timesteps(cfg.schedule.range()?, cfg.analysis.probes);
            let curve = profile_error_curve(prior.predictor(), &schedule, &set, &probes, cfg.run.seed)?;
            let curves = [curve];
            emit_report(
                &ReportInputs {
                    curves: &curves,
                    ..Default::default()
                },
                &dir,
            )?;
            println!("spearman(t, error) = {:.4}", curves[0].trend());
            Ok(0)
        }
        Command::CheckInequality(c) => {
            let cfg = resolve(c)?;
            mkdir(&dir)?;
            write_config(&dir, &cfg)?;
            let schedule = schedule_for(&cfg)?;
            let prior = prior_for(&cfg, schedule.clone(), &dir)?;
            let set = probe_set(&cfg)?;
            let pairs: Vec<(usize, usize)> = cfg.analysis.pairs.iter().map(|p| (p[0], p[1])).collect();
            let rep = check_shift_inequality(
                prior.predictor(),
                &schedule,
                &set,
                &pairs,
                cfg.analysis.n_draws,
                0.0,
                cfg.run.seed,
            )?;
            emit_report(
                &ReportInputs {
                    inequality: Some(&rep),
                    ..Default::default()
                },
                &dir,
            )?;
            for p in &rep.pairs {
                println!(
                    "t={} dt={}: {:.5} -> {:.5} {}",
                    p.t,
                    p.dt,
                    p.mean_at_t,
                    p.mean_at_shift,
                    if p.pass { "pass" } else { "FAIL" }
                );
            }
            Ok(0)
        }
        Command::Distill(c) => {
            let cfg = resolve(c)?;
            mkdir(&dir)?;
            write_config(&dir, &cfg)?;
            let schedule = schedule_for(&cfg)?;
            let prior = prior_for(&cfg, schedule.clone(), &dir)?;
            let rec = run_prompt_specific(&cfg, &prior, &schedule)?;
            finish_run(&dir, &rec)
        }
        Command::DistillAmortized(c) => {
            let cfg = resolve(c)?;
            mkdir(&dir)?;
            write_config(&dir, &cfg)?;
            let schedule = schedule_for(&cfg)?;
            let prior = prior_for(&cfg, schedule.clone(), &dir)?;
            let rec = run_amortized(&cfg, &prior, &schedule, Some(&dir.join("checkpoints")))?;
            if rec.is_completed() {
                evaluate_generator(&dir, &rec, &prior)?;
            }
            finish_run(&dir, &rec)
        }
        Command::Ablate {
            common,
            axis,
            values,
            jobs,
        } => {
            let cfg = resolve(common)?;
            mkdir(&dir)?;
            write_config(&dir, &cfg)?;
            let schedule = schedule_for(&cfg)?;
            let prior = prior_for(&cfg, schedule.clone(), &dir)?;
            let entries = ablation_sweep(&cfg, axis, values, &prior, &schedule, *jobs, Some(&dir))?;
            for (i, e) in entries.iter().enumerate() {
                let run_dir = dir.join(sweep_dir_name(i, axis, &e.value));
                mkdir(&run_dir)?;
                write_config(&run_dir, &e.record.config)?;
                write_run_files(&run_dir, &e.record)?;
            }
            let rows = comparison_table(&entries);
            emit_report(
                &ReportInputs {
                    comparison: &rows,
                    ..Default::default()
                },
                &dir,
            )?;
            for r in &rows {
                println!(
                    "{}={}: completed={} median_grad_norm={:.4} mean_dt={:.2} final_distance={}",
                    r.axis,
                    r.value,
                    r.completed,
                    r.median_grad_norm,
                    r.mean_dt,
                    r.final_distance.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            let aborted = entries.iter().any(|e| !e.record.is_completed());
            Ok(if aborted { 3 } else { 0 })
        }
        Command::Report { runs, .. } => {
            let records: Vec<ExperimentRecord> = runs
                .iter()
                .map(|r| load_json(&r.join("record.json")))
                .collect::<Result<_>>()?;
            let table = grad_norm_stats(&records)?;
            let manifest = emit_report(
                &ReportInputs {
                    records: &records,
                    grad_table: &table,
                    ..Default::default()
                },
                &dir,
            )?;
            for row in &table {
                println!("{}: median {:.4} (p10 {:.4}, p90 {:.4})", row.objective, row.median, row.p10, row.p90);
            }
            println!("{} files in {}", manifest.files.len(), dir.display());
            Ok(0)
        }
    }
}

fn probe_set(cfg: &ExperimentConfig) -> Result<ProbeSet> {
    let corpus = Corpus::for_regime(cfg.denoiser.regime);
    let mut rng = stream(cfg.run.seed, Stream::Data);
    ProbeSet::from_source(corpus.source(), &cfg.run.classes, cfg.analysis.samples_per_cond, &mut rng)
}

fn write_run_files(dir: &Path, rec: &ExperimentRecord) -> Result<()> {
    rec.write_metrics_csv(&dir.join("metrics.csv"))?;
    save_json(&dir.join("record.json"), rec)
}

fn finish_run(dir: &Path, rec: &ExperimentRecord) -> Result<i32> {
    write_run_files(dir, rec)?;
    match &rec.status {
        RunStatus::Completed => {
            println!("completed {} iterations; outputs in {}", rec.metrics.len(), dir.display());
            Ok(0)
        }
        RunStatus::Aborted { iter, reason } => {
            eprintln!("aborted at iteration {iter}: {reason}");
            Ok(3)
        }
    }
}

/// Sample grid and, in the image regime, recall under the gated classifier.
fn evaluate_generator(dir: &Path, rec: &ExperimentRecord, prior: &Prior) -> Result<()> {
    let cfg = &rec.config;
    let g = restore_generator(rec, prior.predictor())?;
    let per = cfg.analysis.samples_per_cond;
    let classes: Vec<usize> = cfg.run.classes.iter().flat_map(|&c| std::iter::repeat_n(c, per)).collect();
    let conds: Vec<Condition> = classes.iter().map(|&c| Condition::class(c)).collect();
    let mut rng = stream(cfg.run.seed, Stream::Analysis);
    let latent = (cfg.scene.noise_dim > 0).then(|| normal_mat(&mut rng, conds.len(), cfg.scene.noise_dim));
    let samples = g.generate(&conds, latent.as_ref())?;
    save_json(&dir.join("samples.json"), &samples)?;
    if cfg.denoiser.regime == Regime::Image {
        write_image_grid(&samples, per, &dir.join("samples.png"))?;
        let corpus = Corpus::for_regime(Regime::Image);
        let clf = train_classifier(corpus.source(), &cfg.analysis.classifier, cfg.run.seed)?;
        match recall_at_1(&samples, &classes, &clf) {
            Ok(rep) => {
                println!("recall@1 = {:.4}", rep.recall_at_1);
                let reports = [rep];
                emit_report(
                    &ReportInputs {
                        recall: &reports,
                        ..Default::default()
                    },
                    &dir.join("recall"),
                )?;
            }
            Err(e) => eprintln!("recall skipped: {e}"),
        }
    }
    Ok(())
}
