//! Versioned JSON containers for trained models.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchSpec, PredictionType};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::schedule::{BetaFamily, NoiseSchedule};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserCheckpoint {
    pub format: String,
    pub version: u32,
    pub arch: ArchSpec,
    pub prediction_type: PredictionType,
    pub data_shape: Vec<usize>,
    /// Valid class ids are `0..num_classes`; the null token is implicit.
    pub num_classes: usize,
    pub schedule_fingerprint: String,
    pub schedule_steps: usize,
    pub schedule_family: BetaFamily,
    pub params: ParamSet,
}

impl DenoiserCheckpoint {
    pub const FORMAT: &'static str = "sdlab.denoiser";

    pub fn new(
        arch: ArchSpec,
        prediction_type: PredictionType,
        data_dim: usize,
        num_classes: usize,
        schedule: &NoiseSchedule,
        params: ParamSet,
    ) -> Self {
        let data_shape = match arch {
            ArchSpec::ConvNet { side, .. } => vec![1, side, side],
            ArchSpec::ResMlp { .. } => vec![data_dim],
        };
        DenoiserCheckpoint {
            format: Self::FORMAT.into(),
            version: FORMAT_VERSION,
            arch,
            prediction_type,
            data_shape,
            num_classes,
            schedule_fingerprint: schedule.fingerprint(),
            schedule_steps: schedule.total_steps(),
            schedule_family: schedule.family(),
            params,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.data_shape.iter().product()
    }

    /// Refuses a schedule whose coefficients differ from the training one.
    pub fn check_compatible(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.format != Self::FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let fp = schedule.fingerprint();
        if fp != self.schedule_fingerprint {
            return Err(Error::Config(format!(
                "checkpoint was trained with schedule {} (T={}, {:?}) but the run uses {} (T={}, {:?})",
                &self.schedule_fingerprint[..12.min(self.schedule_fingerprint.len())],
                self.schedule_steps,
                self.schedule_family,
                &fp[..12],
                schedule.total_steps(),
                schedule.family()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;
    use crate::schedule::build_schedule;
    use std::sync::Arc;

    #[test]
    fn file_roundtrip_is_exact() {
        let s = Arc::new(build_schedule(200, BetaFamily::Linear).unwrap());
        let m = Denoiser::new(
            ArchSpec::default_point(),
            2,
            3,
            PredictionType::Velocity,
            s.clone(),
            8,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        m.to_checkpoint().save(&p).unwrap();
        let ck = DenoiserCheckpoint::load(&p).unwrap();
        assert_eq!(ck, m.to_checkpoint());
        assert_eq!(ck.data_shape, vec![2]);
        let back = Denoiser::from_checkpoint(&ck, s).unwrap();
        assert_eq!(back.params().fingerprint(), m.params().fingerprint());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let r = DenoiserCheckpoint::load(Path::new("/nonexistent/ck.json"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
