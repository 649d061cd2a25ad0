//! Experiment configuration: one TOML file with `schedule`, `denoiser`,
//! `objective`, `scene`, `run` and `analysis` sections, plus dotted
//! `key=value` overrides applied after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ClassifierConfig;
use crate::data::Regime;
use crate::denoiser::{ArchSpec, GuidanceSpec, TrainConfig};
use crate::distill::{AdapterConfig, DistillationObjective, ObjectiveKind, ShiftGranularity, Weighting};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::scene::{AugmentRanges, GeneratorArch, GeneratorConfig, RenderMode, RenderSpec};
use crate::schedule::{build_schedule, AnnealPlan, BetaFamily, NoiseSchedule, ShiftMode, ShiftPolicy, TimestepRange};

/// Optional keys: absent from a resolved config unless set, but still
/// valid override targets.
const OPTIONAL_KEYS: &[&str] = &["objective.cfg_main", "run.lr", "denoiser.arch"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSection {
    pub enabled: bool,
    pub t_min_start: usize,
    pub t_min_end: usize,
    pub t_max_start: usize,
    pub t_max_end: usize,
    /// Iteration at which the end range is reached; 0 means the run length.
    pub total_iters: usize,
}

impl Default for AnnealSection {
    fn default() -> Self {
        AnnealSection {
            enabled: false,
            t_min_start: 20,
            t_min_end: 20,
            t_max_start: 980,
            t_max_end: 500,
            total_iters: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub total_steps: usize,
    pub beta_family: BetaFamily,
    pub t_min: usize,
    pub t_max: usize,
    pub anneal: AnnealSection,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: 1000,
            beta_family: BetaFamily::Linear,
            t_min: 20,
            t_max: 980,
            anneal: AnnealSection::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.total_steps, self.beta_family)
    }

    pub fn range(&self) -> Result<TimestepRange> {
        TimestepRange::new(self.t_min, self.t_max, self.total_steps)
    }

    pub fn anneal_plan(&self, iterations: usize) -> Result<Option<AnnealPlan>> {
        if !self.anneal.enabled {
            return Ok(None);
        }
        let a = &self.anneal;
        let total = if a.total_iters == 0 { iterations.max(1) } else { a.total_iters };
        let plan = AnnealPlan {
            t_min_start: a.t_min_start,
            t_min_end: a.t_min_end,
            t_max_start: a.t_max_start,
            t_max_end: a.t_max_end,
            total_iters: total,
        };
        plan.validate(self.total_steps)?;
        Ok(Some(plan))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    #[default]
    Trained,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    pub regime: Regime,
    /// Path to a trained checkpoint; empty trains one on demand.
    pub checkpoint: String,
    /// Architecture override; the regime default is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            kind: DenoiserKind::Trained,
            regime: Regime::Point,
            checkpoint: String::new(),
            arch: None,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn arch_spec(&self) -> ArchSpec {
        self.arch.clone().unwrap_or(match self.regime {
            Regime::Point => ArchSpec::default_point(),
            Regime::Image => ArchSpec::default_image(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Guidance scale of the prior term; the per-objective default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cfg_main: Option<f64>,
    pub cfg_second: f64,
    pub shift_mode: ShiftMode,
    pub eta: f64,
    pub shift_granularity: ShiftGranularity,
    pub omega: Weighting,
    pub adapter: AdapterConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Asd,
            cfg_main: None,
            cfg_second: 1.0,
            shift_mode: ShiftMode::Uniform,
            eta: 0.1,
            shift_granularity: ShiftGranularity::PerSample,
            omega: Weighting::Constant,
            adapter: AdapterConfig::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn build(&self) -> Result<DistillationObjective> {
        let mut o = DistillationObjective::new(self.kind);
        if let Some(s) = self.cfg_main {
            o.guidance_main = GuidanceSpec::new(s)?;
        }
        o.guidance_second = GuidanceSpec::new(self.cfg_second)?;
        o.shift = match self.kind {
            ObjectiveKind::Asd => ShiftPolicy::new(self.shift_mode, self.eta)?,
            _ => {
                // Validated even when unused so bad values never pass silently.
                ShiftPolicy::new(self.shift_mode, self.eta)?;
                ShiftPolicy::none()
            }
        };
        o.shift_granularity = self.shift_granularity;
        o.weight = self.omega;
        Ok(o)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    #[default]
    Particles,
    DirectMlp,
    Hypernet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub num_particles: usize,
    /// Standard deviation of the Gaussian particle initialization.
    pub init_std: f64,
    pub noise_dim: usize,
    pub render_mode: RenderMode,
    pub augment: AugmentRanges,
    pub spectral_norm: bool,
    pub emb_dim: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub grid_freqs: usize,
    pub seed_dim: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        SceneConfig {
            kind: SceneKind::Particles,
            num_particles: 1,
            init_std: 1.0,
            noise_dim: 0,
            render_mode: RenderMode::Identity,
            augment: AugmentRanges::default(),
            spectral_norm: false,
            emb_dim: g.emb_dim,
            hidden: g.hidden,
            decoder_hidden: g.decoder_hidden,
            grid_freqs: g.grid_freqs,
            seed_dim: g.seed_dim,
        }
    }
}

impl SceneConfig {
    pub fn render_spec(&self) -> RenderSpec {
        RenderSpec {
            mode: self.render_mode,
            ranges: self.augment,
        }
    }

    pub fn generator_config(&self) -> Option<GeneratorConfig> {
        let arch = match self.kind {
            SceneKind::Particles => return None,
            SceneKind::DirectMlp => GeneratorArch::DirectMlp,
            SceneKind::Hypernet => GeneratorArch::Hypernet,
        };
        Some(GeneratorConfig {
            arch,
            emb_dim: self.emb_dim,
            noise_dim: self.noise_dim,
            hidden: self.hidden,
            decoder_hidden: self.decoder_hidden,
            grid_freqs: self.grid_freqs,
            seed_dim: self.seed_dim,
            spectral_norm: self.spectral_norm,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    #[default]
    Same,
    Increment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub iterations: usize,
    pub batch_size: usize,
    /// Corpus: the class ids optimized in this run.
    pub classes: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Learning rate; 1e-2 for particles and 1e-4 for generators when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub seed: u64,
    pub seed_policy: SeedPolicy,
    /// Generator checkpoint interval in iterations; 0 writes only the final state.
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            iterations: 2000,
            batch_size: 1,
            classes: vec![0],
            optimizer: OptimizerKind::Adam,
            lr: None,
            seed: 0,
            seed_policy: SeedPolicy::Same,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub probes: usize,
    pub samples_per_cond: usize,
    /// `(t, Δt)` pairs for the shifted-timestep inequality.
    pub pairs: Vec<[usize; 2]>,
    pub n_draws: usize,
    pub classifier: ClassifierConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            probes: 100,
            samples_per_cond: 16,
            pairs: vec![[200, 100], [400, 100], [600, 100]],
            n_draws: 256,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub objective: ObjectiveConfig,
    pub scene: SceneConfig,
    pub run: RunSection,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `key=value` overrides in order; each key must name an
    /// existing (or documented optional) setting.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            set_dotted(&mut tree, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: ExperimentConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))?;
        Ok(cfg)
    }

    /// Single override, as used by sweeps.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        self.with_overrides(&[format!("{key}={value}")])
    }

    /// Cross-section semantic checks.
    pub fn validate(&self) -> Result<()> {
        let range = self.schedule.range()?;
        let _ = range;
        self.schedule.anneal_plan(self.run.iterations)?;
        self.objective.build()?;
        if self.run.classes.is_empty() {
            return Err(Error::Config("run.classes must list at least one class".into()));
        }
        if self.run.batch_size == 0 {
            return Err(Error::Config("run.batch_size must be positive".into()));
        }
        if let Some(lr) = self.run.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("run.lr must be >= 0, got {lr}")));
            }
        }
        if self.scene.kind == SceneKind::Particles && self.scene.num_particles == 0 {
            return Err(Error::Config("scene.num_particles must be positive".into()));
        }
        if self.objective.kind == ObjectiveKind::Vsd && self.denoiser.kind == DenoiserKind::Oracle {
            return Err(Error::Config("VSD needs a trained denoiser for its adapter".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.run.lr.unwrap_or(match self.scene.kind {
            SceneKind::Particles => 1e-2,
            SceneKind::DirectMlp | SceneKind::Hypernet => 1e-4,
        })
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        (!self.denoiser.checkpoint.is_empty()).then(|| PathBuf::from(&self.denoiser.checkpoint))
    }
}

/// TOML literal if it parses as one, otherwise a bare string (so
/// `objective.kind=ASD` works unquoted). Comma lists become arrays.
fn parse_value(raw: &str) -> toml::Value {
    if let Ok(t) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    if raw.contains(',') {
        return toml::Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    toml::Value::String(raw.to_string())
}

fn set_dotted(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let optional = OPTIONAL_KEYS.contains(&key);
    let mut node = tree;
    for (i, p) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}` descends into a value")))?;
        let last = i + 1 == parts.len();
        if last {
            if !table.contains_key(*p) && !optional {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert((*p).to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*p)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    unreachable!("override key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        assert!(text.contains("T = 1000"));
    }

    #[test]
    fn overrides_apply_and_win() {
        let c = ExperimentConfig::from_toml_str("[objective]\nkind = \"SDS\"\neta = 0.2\n").unwrap();
        assert_eq!(c.objective.kind, ObjectiveKind::Sds);
        let o = c
            .with_overrides(&["objective.kind=ASD", "objective.eta=0.1", "run.classes=1,2", "objective.cfg_main=5"])
            .unwrap();
        assert_eq!(o.objective.kind, ObjectiveKind::Asd);
        assert_eq!(o.objective.eta, 0.1);
        assert_eq!(o.run.classes, vec![1, 2]);
        assert_eq!(o.objective.cfg_main, Some(5.0));
        assert_eq!(
            o.with_override("objective.shift_mode", "deterministic").unwrap().objective.shift_mode,
            ShiftMode::Deterministic
        );
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let c = ExperimentConfig::default();
        for bad in ["objective.nope=1", "run=3", "objective.eta", "objective.eta=abc", "schedule.T.x=1"] {
            assert!(matches!(c.with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
        let e = c.with_override("objective.eta", "1.5").unwrap();
        assert!(matches!(e.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_and_families_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[run]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[schedule]\nbeta_family = \"quadratic\"\n").is_err());
    }

    #[test]
    fn learning_rate_defaults_by_scene() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.learning_rate(), 1e-2);
        c.scene.kind = SceneKind::Hypernet;
        assert_eq!(c.learning_rate(), 1e-4);
        c.run.lr = Some(3e-3);
        assert_eq!(c.learning_rate(), 3e-3);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = ExperimentConfig::load(Path::new("/no/such/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("/no/such/cfg.toml"));
        assert_eq!(err.exit_code(), 2);
    }
}
