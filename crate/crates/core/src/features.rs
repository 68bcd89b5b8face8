//! Per-frame measurement features and their fixed standardization.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{measure_with_noise, PilotParams, RisConfig};
use crate::dataset::sample_episode;
use crate::error::{Error, Result};
use crate::rng::{stream, Role};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// `[|y|²]`.
    Rss,
    /// `[Re y, Im y]`.
    #[default]
    Pilot,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Rss => 1,
            FeatureMode::Pilot => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Rss => "rss",
            FeatureMode::Pilot => "pilot",
        }
    }

    pub fn raw(self, y: Complex64) -> Vec<f64> {
        match self {
            FeatureMode::Rss => vec![y.norm_sqr()],
            FeatureMode::Pilot => vec![y.re, y.im],
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rss" => Ok(FeatureMode::Rss),
            "pilot" => Ok(FeatureMode::Pilot),
            other => Err(Error::Config(format!("unknown feature mode `{other}`"))),
        }
    }
}

/// Affine standardization `(raw − mean) / std`, fixed after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mode: FeatureMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(mode: FeatureMode) -> Self {
        Self {
            mode,
            mean: vec![0.0; mode.dim()],
            std: vec![1.0; mode.dim()],
        }
    }

    /// Fits mean and standard deviation over `samples` single-frame
    /// measurements taken under i.i.d. random RIS phases.
    pub fn fit(
        scene: &Scene,
        pilot: &PilotParams,
        mode: FeatureMode,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let dim = mode.dim();
        let mut sum = vec![0.0; dim];
        let mut sum2 = vec![0.0; dim];
        let n = scene.num_elements();
        for i in 0..samples as u64 {
            let ep = sample_episode(scene, 1, seed, i)?;
            let theta = RisConfig::random(n, &mut stream(seed, i, Role::Theta));
            let y = measure_with_noise(&ep.channel, &theta, pilot, scene.noise_power, ep.noise[0])?;
            for (k, f) in mode.raw(y).into_iter().enumerate() {
                sum[k] += f;
                sum2[k] += f * f;
            }
        }
        let count = samples.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sum2
            .iter()
            .zip(&mean)
            .map(|(s2, m)| {
                let var = (s2 / count - m * m).max(0.0);
                if var.sqrt() > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mode, mean, std })
    }

    pub fn apply(&self, y: Complex64) -> Vec<f64> {
        self.mode
            .raw(y)
            .into_iter()
            .enumerate()
            .map(|(k, f)| (f - self.mean[k]) / self.std[k])
            .collect()
    }
}
