//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::crlb::CrlbConfig;
use crate::channel::PilotParams;
use crate::error::{Error, Result};
use crate::features::FeatureMode;
use crate::policy::PolicyShape;
use crate::scene::Scene;
use crate::training::TrainingConfig;

/// Parses TOML, turning serde's "missing field" message into
/// [`Error::MissingKey`].
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        match msg
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            Some(key) => Error::MissingKey(key.to_string()),
            None => Error::Config(e.to_string()),
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Active,
    StaticRandom,
    StaticLearned,
    Wknn,
    CrlbGd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Active => "active",
            Method::StaticRandom => "static-random",
            Method::StaticLearned => "static-learned",
            Method::Wknn => "wknn",
            Method::CrlbGd => "crlb-gd",
        }
    }

    pub fn all() -> [Method; 5] {
        [
            Method::Active,
            Method::StaticLearned,
            Method::StaticRandom,
            Method::Wknn,
            Method::CrlbGd,
        ]
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSection {
    pub frames: usize,
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub feature: FeatureMode,
}

impl PilotSection {
    pub fn pilot(&self, snr_db: f64) -> PilotParams {
        PilotParams::new(snr_db, self.frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaticDnnConfig {
    pub hidden: Vec<usize>,
}

impl Default for StaticDnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![200, 200, 200],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WknnConfig {
    pub k: usize,
    pub realizations_per_block: usize,
    pub block_size: f64,
}

impl Default for WknnConfig {
    fn default() -> Self {
        Self {
            k: 5,
            realizations_per_block: 10,
            block_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub episodes: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { episodes: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: Scene,
    pub pilot: PilotSection,
    pub seeds: Seeds,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub policy: PolicyShape,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub static_dnn: StaticDnnConfig,
    #[serde(default)]
    pub wknn: WknnConfig,
    #[serde(default)]
    pub crlb: CrlbConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_methods() -> Vec<Method> {
    Method::all().to_vec()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Desk-scale defaults: 4×4 RIS, T = 4, 20 dB and 6400 × 32 training
    /// samples. The policy is narrower than in the paper profile and takes
    /// more, smaller steps, which trains best within this budget.
    pub fn desk() -> Self {
        Self {
            scene: Scene::reference().with_ris(4, 4),
            pilot: PilotSection {
                frames: 4,
                snr_db: vec![20.0],
                feature: FeatureMode::Pilot,
            },
            seeds: Seeds { train: 1, eval: 2 },
            methods: default_methods(),
            policy: PolicyShape {
                hidden: 128,
                head_width: 256,
                head_layers: 4,
            },
            training: TrainingConfig {
                steps: 6400,
                batch_size: 32,
                lr: 1e-2,
                steps_per_epoch: 400,
                ..TrainingConfig::default()
            },
            static_dnn: StaticDnnConfig::default(),
            wknn: WknnConfig::default(),
            crlb: CrlbConfig::default(),
            evaluation: EvaluationConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.pilot.snr_db.is_empty() {
            return Err(Error::Config("pilot.snr_db must not be empty".into()));
        }
        if self.pilot.frames == 0 {
            return Err(Error::Config("pilot.frames must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.evaluation.episodes == 0 {
            return Err(Error::Config("evaluation.episodes must be >= 1".into()));
        }
        if self.wknn.k == 0 || self.wknn.realizations_per_block == 0 {
            return Err(Error::Config(
                "wknn.k and wknn.realizations_per_block must be >= 1".into(),
            ));
        }
        self.training.validate()?;
        self.policy.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
