//! Non-adaptive baselines: a fixed sequence of RIS configurations (random or
//! learned jointly with the estimator) followed by a feedforward network
//! mapping all T features to a position.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::Uniform;
use risloc_autodiff::{BoundParams, Checkpoint, ParamSet, Tape, Var};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{PilotParams, RisConfig};
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureScaler};
use crate::graph::{
    features_on_tape, mean_squared_distance, measure_on_tape, rows_to_positions, BatchConsts,
    OutputMap,
};
use crate::rng::{derive_seed, stream, Role};
use crate::scene::{Scene, Vec3};
use crate::training::Trainable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Random,
    Learned,
}

/// `T` fixed RIS configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticRisDesign {
    pub thetas: Vec<RisConfig>,
    pub provenance: Provenance,
}

impl StaticRisDesign {
    /// i.i.d. uniform phases, frame `t` drawn from stream `(seed, t)`.
    pub fn random(n_elements: usize, frames: usize, seed: u64) -> Self {
        Self {
            thetas: (0..frames as u64)
                .map(|t| RisConfig::random(n_elements, &mut stream(seed, t, Role::Theta)))
                .collect(),
            provenance: Provenance::Random,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.thetas.iter().all(RisConfig::is_feasible)
    }
}

fn logits_of(theta: &RisConfig) -> Array2<f64> {
    let n = theta.len();
    Array2::from_shape_fn((1, 2 * n), |(_, k)| {
        let z = theta.as_slice()[k % n];
        if k < n {
            z.re
        } else {
            z.im
        }
    })
}

fn theta_of_logits(row: &Array2<f64>) -> RisConfig {
    let n = row.ncols() / 2;
    let re: Vec<f64> = (0..n).map(|k| row[[0, k]]).collect();
    let im: Vec<f64> = (0..n).map(|k| row[[0, n + k]]).collect();
    RisConfig::from_logits(&re, &im)
}

/// Feedforward estimator over the concatenated features of a fixed design.
#[derive(Debug, Clone)]
pub struct StaticDnn {
    pub scene: Scene,
    pub pilot: PilotParams,
    pub mode: FeatureMode,
    pub hidden: Vec<usize>,
    pub params: ParamSet,
    /// Used directly for random designs; the starting point for learned ones.
    pub design: StaticRisDesign,
    pub scaler: FeatureScaler,
    pub output: OutputMap,
}

const EVAL_CHUNK: usize = 512;

impl StaticDnn {
    pub fn new(
        scene: &Scene,
        pilot: &PilotParams,
        mode: FeatureMode,
        hidden: &[usize],
        design: StaticRisDesign,
        warmup_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if design.thetas.len() != pilot.frames {
            return Err(Error::Dimension(format!(
                "design has {} frames, pilot has {}",
                design.thetas.len(),
                pilot.frames
            )));
        }
        let mut rng = stream(seed, 1, Role::Init);
        let mut params = ParamSet::new();
        let mut fan_in = mode.dim() * pilot.frames;
        let widths: Vec<usize> = hidden.iter().copied().chain([3]).collect();
        for (l, &w) in widths.iter().enumerate() {
            let bound = (6.0 / (fan_in + w) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.insert(
                format!("dnn.a{}", l + 1),
                Array2::from_shape_fn((fan_in, w), |_| rng.sample(dist)),
            );
            params.insert(format!("dnn.b{}", l + 1), Array2::zeros((1, w)));
            fan_in = w;
        }
        if design.provenance == Provenance::Learned {
            for (t, th) in design.thetas.iter().enumerate() {
                params.insert(format!("theta.logits.{t}"), logits_of(th));
            }
        }
        Ok(Self {
            scene: scene.clone(),
            pilot: *pilot,
            mode,
            hidden: hidden.to_vec(),
            params,
            design,
            scaler: FeatureScaler::fit(
                scene,
                pilot,
                mode,
                warmup_samples,
                derive_seed(seed, 0xFEA7),
            )?,
            output: OutputMap::for_region(&scene.ue_region),
        })
    }

    /// The configurations currently in effect.
    pub fn current_design(&self) -> StaticRisDesign {
        match self.design.provenance {
            Provenance::Random => self.design.clone(),
            Provenance::Learned => StaticRisDesign {
                thetas: (0..self.pilot.frames)
                    .map(|t| {
                        theta_of_logits(
                            self.params
                                .get(&format!("theta.logits.{t}"))
                                .expect("learned logits"),
                        )
                    })
                    .collect(),
                provenance: Provenance::Learned,
            },
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, consts: &BatchConsts) -> Result<Var> {
        let b = consts.batch;
        let mut feats = Vec::with_capacity(self.pilot.frames);
        for t in 0..self.pilot.frames {
            let theta = match self.design.provenance {
                Provenance::Learned => {
                    let logits = bound.var(&format!("theta.logits.{t}"))?;
                    let unit = tape.unit_modulus(logits)?;
                    tape.repeat_rows(unit, b)?
                }
                Provenance::Random => {
                    let row = tape.constant(logits_of(&self.design.thetas[t]));
                    tape.repeat_rows(row, b)?
                }
            };
            let y = measure_on_tape(tape, consts, theta, &self.pilot, t)?;
            feats.push(features_on_tape(tape, y, &self.scaler)?);
        }
        let mut x = tape.concat_cols(&feats)?;
        let layers = self.hidden.len() + 1;
        for l in 1..=layers {
            let a = bound.var(&format!("dnn.a{l}"))?;
            let bias = bound.var(&format!("dnn.b{l}"))?;
            let z = tape.matmul(x, a)?;
            let z = tape.add_row(z, bias)?;
            x = if l < layers { tape.relu(z) } else { z };
        }
        self.output.apply_on_tape(tape, x)
    }

    pub fn estimate(&self, episodes: &[Episode]) -> Result<Vec<Vec3>> {
        let mut out = Vec::with_capacity(episodes.len());
        for chunk in episodes.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind_frozen(&mut tape);
            let consts =
                BatchConsts::new(&mut tape, chunk, self.pilot.frames, self.scene.noise_power)?;
            let est = self.forward(&mut tape, &bound, &consts)?;
            out.extend(rows_to_positions(tape.value(est)));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let design = self.current_design();
        ck.meta.insert("kind".into(), Value::from("static-dnn"));
        ck.meta
            .insert("feature_mode".into(), Value::from(self.mode.name()));
        ck.meta
            .insert("n_elements".into(), Value::from(self.scene.num_elements()));
        ck.meta
            .insert("frames".into(), Value::from(self.pilot.frames));
        ck.meta.insert(
            "hidden".into(),
            serde_json::to_value(&self.hidden).expect("hidden"),
        );
        ck.meta.insert(
            "provenance".into(),
            serde_json::to_value(design.provenance).expect("provenance"),
        );
        ck.meta.insert(
            "scaler".into(),
            serde_json::to_value(&self.scaler).expect("scaler"),
        );
        ck.meta.insert(
            "output".into(),
            serde_json::to_value(self.output).expect("output"),
        );
        ck.meta.insert(
            "scene_fingerprint".into(),
            Value::from(self.scene.fingerprint()),
        );
        ck.push_params("", &self.params);
        let n = self.scene.num_elements();
        let t = design.thetas.len();
        let re = Array2::from_shape_fn((t, n), |(i, k)| design.thetas[i].as_slice()[k].re);
        let im = Array2::from_shape_fn((t, n), |(i, k)| design.thetas[i].as_slice()[k].im);
        ck.tensors.push(("design.re".into(), re));
        ck.tensors.push(("design.im".into(), im));
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    /// Restores an estimator saved by [`StaticDnn::save`].
    pub fn load(
        path: impl AsRef<Path>,
        scene: &Scene,
        pilot: &PilotParams,
        mode: FeatureMode,
    ) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let ck = Checkpoint::load(path)?;
        let get = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing `{k}`")))
        };
        if get("kind")?.as_str() != Some("static-dnn") {
            return Err(Error::CheckpointMismatch(
                "not a static-dnn checkpoint".into(),
            ));
        }
        if get("n_elements")?.as_u64() != Some(scene.num_elements() as u64) {
            return Err(Error::CheckpointMismatch("RIS size differs".into()));
        }
        if get("feature_mode")?.as_str() != Some(mode.name()) {
            return Err(Error::CheckpointMismatch("feature mode differs".into()));
        }
        if get("frames")?.as_u64() != Some(pilot.frames as u64) {
            return Err(Error::CheckpointMismatch("frame count differs".into()));
        }
        let provenance: Provenance = serde_json::from_value(get("provenance")?)?;
        let re = ck
            .tensor("design.re")
            .ok_or_else(|| Error::CheckpointMismatch("missing design".into()))?;
        let im = ck
            .tensor("design.im")
            .ok_or_else(|| Error::CheckpointMismatch("missing design".into()))?;
        let thetas = (0..re.nrows())
            .map(|t| {
                RisConfig::new(
                    (0..re.ncols())
                        .map(|k| num_complex::Complex64::new(re[[t, k]], im[[t, k]]))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params = ck.params("");
        params = {
            let mut only = ParamSet::new();
            for (name, v) in params.iter() {
                if name.starts_with("dnn.") || name.starts_with("theta.logits.") {
                    only.insert(name, v.clone());
                }
            }
            only
        };
        Ok(Self {
            scene: scene.clone(),
            pilot: *pilot,
            mode,
            hidden: serde_json::from_value(get("hidden")?)?,
            params,
            design: StaticRisDesign { thetas, provenance },
            scaler: serde_json::from_value(get("scaler")?)?,
            output: serde_json::from_value(get("output")?)?,
        })
    }
}

impl Trainable for StaticDnn {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn frames(&self) -> usize {
        self.pilot.frames
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        episodes: &[Episode],
    ) -> Result<Var> {
        let consts = BatchConsts::new(tape, episodes, self.pilot.frames, self.scene.noise_power)?;
        let est = self.forward(tape, bound, &consts)?;
        mean_squared_distance(tape, est, consts.target)
    }

    fn evaluate_mse(&self, episodes: &[Episode]) -> Result<f64> {
        let est = self.estimate(episodes)?;
        let total: f64 = est
            .iter()
            .zip(episodes)
            .map(|(e, ep)| crate::policy::squared_distance(*e, ep.ue))
            .sum();
        Ok(total / episodes.len() as f64)
    }
}
