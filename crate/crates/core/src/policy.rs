//! Recurrent active-sensing policy.
//!
//! Each frame the BS measures one pilot, feeds its feature to an LSTM cell,
//! decodes a position estimate from the cell state and, unless it is the last
//! frame, maps the hidden state to the next RIS configuration through a
//! fully connected head followed by element-wise unit-modulus projection.
//!
//! Gate matrices are stored fused, with column blocks in the order
//! candidate, forget, input, output:
//!
//! | name      | shape              |
//! |-----------|--------------------|
//! | `lstm.u`  | feature × 4·hidden |
//! | `lstm.w`  | hidden × 4·hidden  |
//! | `lstm.b`  | 1 × 4·hidden       |
//! | `head.aL` | in × out           |
//! | `head.bL` | 1 × out            |
//! | `pos.l`   | hidden × 3         |
//! | `theta0`  | 1 × 2N             |

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use risloc_autodiff::{grad_check, BoundParams, Checkpoint, GradCheckReport, ParamSet, Tape, Var};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{complex_normal, ChannelRealization, PilotParams, RisConfig};
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureScaler};
use crate::graph::{
    features_on_tape, mean_squared_distance, measure_on_tape, BatchConsts, OutputMap,
};
use crate::rng::{stream, Role};
use crate::scene::{Scene, Vec3};
use crate::training::{LossKind, Trainable};

/// Network widths. The reference sizes are hidden 512, head 1024, 4 layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyShape {
    pub hidden: usize,
    pub head_width: usize,
    pub head_layers: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            hidden: 512,
            head_width: 1024,
            head_layers: 4,
        }
    }
}

impl PolicyShape {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.head_width == 0 || self.head_layers == 0 {
            return Err(Error::Config(
                "policy widths and head_layers must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable weights plus the fixed feature and output conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub shape: PolicyShape,
    pub mode: FeatureMode,
    pub n_elements: usize,
    pub params: ParamSet,
    pub scaler: FeatureScaler,
    pub output: OutputMap,
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| rng.sample(dist))
}

impl PolicyWeights {
    /// All-zero weights with identity conditioning.
    pub fn zeros(shape: PolicyShape, mode: FeatureMode, n_elements: usize) -> Self {
        let h = shape.hidden;
        let mut p = ParamSet::new();
        p.insert("lstm.u", Array2::zeros((mode.dim(), 4 * h)));
        p.insert("lstm.w", Array2::zeros((h, 4 * h)));
        p.insert("lstm.b", Array2::zeros((1, 4 * h)));
        for (l, (i, o)) in head_dims(shape, n_elements).into_iter().enumerate() {
            p.insert(format!("head.a{}", l + 1), Array2::zeros((i, o)));
            p.insert(format!("head.b{}", l + 1), Array2::zeros((1, o)));
        }
        p.insert("pos.l", Array2::zeros((h, 3)));
        p.insert("theta0", Array2::zeros((1, 2 * n_elements)));
        Self {
            shape,
            mode,
            n_elements,
            params: p,
            scaler: FeatureScaler::identity(mode),
            output: OutputMap::identity(),
        }
    }

    /// Random initialization: uniform ±1/√fan-in matrices, zero biases,
    /// Gaussian initial RIS logits.
    pub fn random(shape: PolicyShape, mode: FeatureMode, n_elements: usize, seed: u64) -> Self {
        let mut w = Self::zeros(shape, mode, n_elements);
        let mut rng = stream(seed, 0, Role::Init);
        let h = shape.hidden;
        let k = 1.0 / (h as f64).sqrt();
        w.params
            .insert("lstm.u", uniform(mode.dim(), 4 * h, k, &mut rng));
        w.params.insert("lstm.w", uniform(h, 4 * h, k, &mut rng));
        for (l, (i, o)) in head_dims(shape, n_elements).into_iter().enumerate() {
            let bound = (6.0 / (i + o) as f64).sqrt();
            w.params
                .insert(format!("head.a{}", l + 1), uniform(i, o, bound, &mut rng));
        }
        w.params.insert("pos.l", uniform(h, 3, k, &mut rng));
        let theta0 = Array2::from_shape_fn((1, 2 * n_elements), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        w.params.insert("theta0", theta0);
        w
    }

    /// Replaces every bias with uniform draws in ±`scale`. Zero biases put
    /// whole batches on relu kinks and, when a row's head input is all zero,
    /// on the unit-modulus singularity at zero logits; gradient checks use
    /// this to evaluate at a generic point.
    pub fn randomize_biases(&mut self, scale: f64, seed: u64) {
        let mut rng = stream(seed, 1, Role::Init);
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with("head.b") || *n == "lstm.b")
            .cloned()
            .collect();
        for name in names {
            let cols = self.params.get(&name).expect("bias present").ncols();
            self.params.insert(name, uniform(1, cols, scale, &mut rng));
        }
    }

    /// Random weights with conditioning fitted to `scene` at the given pilot
    /// power.
    pub fn for_scene(
        shape: PolicyShape,
        mode: FeatureMode,
        scene: &Scene,
        pilot: &PilotParams,
        warmup_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut w = Self::random(shape, mode, scene.num_elements(), seed);
        w.scaler = FeatureScaler::fit(
            scene,
            pilot,
            mode,
            warmup_samples,
            crate::rng::derive_seed(seed, 0xFEA7),
        )?;
        w.output = OutputMap::for_region(&scene.ue_region);
        Ok(w)
    }

    pub fn initial_theta(&self) -> RisConfig {
        let t = self.params.get("theta0").expect("theta0 present");
        let n = self.n_elements;
        let re: Vec<f64> = (0..n).map(|k| t[[0, k]]).collect();
        let im: Vec<f64> = (0..n).map(|k| t[[0, n + k]]).collect();
        RisConfig::from_logits(&re, &im)
    }

    pub fn to_checkpoint(&self, extra: &[(&str, Value)]) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("kind".into(), Value::from("active-policy"));
        ck.meta
            .insert("feature_mode".into(), Value::from(self.mode.name()));
        ck.meta
            .insert("n_elements".into(), Value::from(self.n_elements));
        ck.meta.insert(
            "shape".into(),
            serde_json::to_value(self.shape).expect("shape"),
        );
        ck.meta.insert(
            "scaler".into(),
            serde_json::to_value(&self.scaler).expect("scaler"),
        );
        ck.meta.insert(
            "output".into(),
            serde_json::to_value(self.output).expect("output"),
        );
        for (k, v) in extra {
            ck.meta.insert((*k).to_string(), v.clone());
        }
        ck.push_params("", &self.params);
        ck
    }

    /// Restores weights, refusing a checkpoint built for another RIS size or
    /// feature mode.
    pub fn from_checkpoint(ck: &Checkpoint, n_elements: usize, mode: FeatureMode) -> Result<Self> {
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing `{k}`")))
        };
        if meta("kind")?.as_str() != Some("active-policy") {
            return Err(Error::CheckpointMismatch(
                "not an active-policy checkpoint".into(),
            ));
        }
        let ck_n = meta("n_elements")?.as_u64().unwrap_or(0) as usize;
        if ck_n != n_elements {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has N = {ck_n}, expected {n_elements}"
            )));
        }
        let ck_mode: FeatureMode = meta("feature_mode")?.as_str().unwrap_or("").parse()?;
        if ck_mode != mode {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint feature mode is {}, expected {}",
                ck_mode.name(),
                mode.name()
            )));
        }
        let shape: PolicyShape = serde_json::from_value(meta("shape")?)?;
        let mut w = Self::zeros(shape, mode, n_elements);
        w.scaler = serde_json::from_value(meta("scaler")?)?;
        w.output = serde_json::from_value(meta("output")?)?;
        let stored = ck.params("");
        for name in w.params.names().to_vec() {
            let v = stored
                .get(&name)
                .map_err(|_| Error::CheckpointMismatch(format!("missing tensor `{name}`")))?;
            if v.dim() != w.params.get(&name)?.dim() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor `{name}` has wrong shape"
                )));
            }
            w.params.insert(name, v.clone());
        }
        if !w.params.all_finite() {
            return Err(Error::CheckpointMismatch("non-finite weights".into()));
        }
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: &[(&str, Value)]) -> Result<()> {
        Ok(self.to_checkpoint(extra).save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, n_elements: usize, mode: FeatureMode) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_checkpoint(&Checkpoint::load(path)?, n_elements, mode)
    }
}

/// `(fan_in, fan_out)` of each RIS-head layer.
fn head_dims(shape: PolicyShape, n_elements: usize) -> Vec<(usize, usize)> {
    let l = shape.head_layers;
    (0..l)
        .map(|i| {
            let fan_in = if i == 0 {
                shape.hidden
            } else {
                shape.head_width
            };
            let fan_out = if i + 1 == l {
                2 * n_elements
            } else {
                shape.head_width
            };
            (fan_in, fan_out)
        })
        .collect()
}

/// Tape handles of one bound [`PolicyWeights`].
pub struct PolicyVars<'w> {
    pub weights: &'w PolicyWeights,
    pub u: Var,
    pub w: Var,
    pub b: Var,
    pub head: Vec<(Var, Var)>,
    pub pos: Var,
    pub theta0: Var,
}

impl<'w> PolicyVars<'w> {
    pub fn new(weights: &'w PolicyWeights, bound: &BoundParams) -> Result<Self> {
        let head = (1..=weights.shape.head_layers)
            .map(|l| {
                Ok((
                    bound.var(&format!("head.a{l}"))?,
                    bound.var(&format!("head.b{l}"))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            u: bound.var("lstm.u")?,
            w: bound.var("lstm.w")?,
            b: bound.var("lstm.b")?,
            head,
            pos: bound.var("pos.l")?,
            theta0: bound.var("theta0")?,
        })
    }
}

/// Hidden and cell state handles.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub s: Var,
    pub c: Var,
}

impl LstmVars {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        Self {
            s: tape.constant(Array2::zeros((batch, hidden))),
            c: tape.constant(Array2::zeros((batch, hidden))),
        }
    }
}

/// One LSTM cell update.
pub fn lstm_step(
    tape: &mut Tape,
    p: &PolicyVars,
    state: LstmVars,
    feature: Var,
) -> Result<LstmVars> {
    let h = p.weights.shape.hidden;
    if feature.cols() != p.weights.mode.dim() {
        return Err(Error::Dimension(format!(
            "feature has {} columns, policy expects {}",
            feature.cols(),
            p.weights.mode.dim()
        )));
    }
    let zx = tape.matmul(feature, p.u)?;
    let zs = tape.matmul(state.s, p.w)?;
    let z = tape.add(zx, zs)?;
    let z = tape.add_row(z, p.b)?;
    let cand = tape.slice_cols(z, 0, h)?;
    let cand = tape.tanh(cand);
    let f = tape.slice_cols(z, h, 2 * h)?;
    let f = tape.sigmoid(f);
    let i = tape.slice_cols(z, 2 * h, 3 * h)?;
    let i = tape.sigmoid(i);
    let o = tape.slice_cols(z, 3 * h, 4 * h)?;
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let s = tape.mul(o, tc)?;
    Ok(LstmVars { s, c })
}

/// Next RIS configuration from the hidden state, as unit-modulus
/// `[re | im]` rows.
pub fn ris_head(tape: &mut Tape, p: &PolicyVars, s: Var) -> Result<Var> {
    let mut x = s;
    let last = p.head.len() - 1;
    for (l, (a, b)) in p.head.iter().enumerate() {
        let z = tape.matmul(x, *a)?;
        let z = tape.add_row(z, *b)?;
        x = if l < last { tape.relu(z) } else { z };
    }
    Ok(tape.unit_modulus(x)?)
}

/// Linear position readout from the cell state.
pub fn position_head(tape: &mut Tape, p: &PolicyVars, c: Var) -> Result<Var> {
    let raw = tape.matmul(c, p.pos)?;
    p.weights.output.apply_on_tape(tape, raw)
}

/// Tape handles of an unrolled batch.
pub struct Rollout {
    pub thetas: Vec<Var>,
    pub pilots: Vec<(Var, Var)>,
    pub features: Vec<Var>,
    pub states: Vec<LstmVars>,
    pub estimates: Vec<Var>,
}

/// Unrolls `frames` sensing stages over a batch.
pub fn rollout(
    tape: &mut Tape,
    p: &PolicyVars,
    consts: &BatchConsts,
    pilot: &PilotParams,
    frames: usize,
) -> Result<Rollout> {
    if frames == 0 {
        return Err(Error::Config("frames must be >= 1".into()));
    }
    let b = consts.batch;
    let theta0 = tape.unit_modulus(p.theta0)?;
    let mut theta = tape.repeat_rows(theta0, b)?;
    let mut state = LstmVars::zeros(tape, b, p.weights.shape.hidden);
    let mut out = Rollout {
        thetas: Vec::with_capacity(frames),
        pilots: Vec::with_capacity(frames),
        features: Vec::with_capacity(frames),
        states: Vec::with_capacity(frames),
        estimates: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        out.thetas.push(theta);
        let y = measure_on_tape(tape, consts, theta, pilot, t)?;
        let feat = features_on_tape(tape, y, &p.weights.scaler)?;
        state = lstm_step(tape, p, state, feat)?;
        let est = position_head(tape, p, state.c)?;
        out.pilots.push(y);
        out.features.push(feat);
        out.states.push(state);
        out.estimates.push(est);
        if t + 1 < frames {
            theta = ris_head(tape, p, state.s)?;
        }
    }
    Ok(out)
}

/// Batch loss on an unrolled trajectory.
pub fn rollout_loss(tape: &mut Tape, r: &Rollout, target: Var, kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Final => {
            mean_squared_distance(tape, *r.estimates.last().expect("frames >= 1"), target)
        }
        LossKind::Average => {
            let mut total = None;
            for est in &r.estimates {
                let l = mean_squared_distance(tape, *est, target)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = total.expect("frames >= 1");
            Ok(tape.scale(total, 1.0 / r.estimates.len() as f64))
        }
    }
}

/// Per-frame record of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub thetas: Vec<RisConfig>,
    pub pilots: Vec<Complex64>,
    pub features: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    pub estimates: Vec<Vec3>,
}

impl EpisodeTrace {
    pub fn frames(&self) -> usize {
        self.estimates.len()
    }

    pub fn final_estimate(&self) -> Vec3 {
        *self.estimates.last().expect("non-empty trace")
    }
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Evaluation-batch size; bounds peak tape memory.
const EVAL_CHUNK: usize = 256;

/// Runs the policy on `episodes` without recording gradients.
pub fn run_episodes(
    scene: &Scene,
    episodes: &[Episode],
    pilot: &PilotParams,
    weights: &PolicyWeights,
) -> Result<Vec<EpisodeTrace>> {
    let frames = pilot.frames;
    let n = weights.n_elements;
    let mut traces = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let bound = weights.params.bind_frozen(&mut tape);
        let vars = PolicyVars::new(weights, &bound)?;
        let consts = BatchConsts::new(&mut tape, chunk, frames, scene.noise_power)?;
        let r = rollout(&mut tape, &vars, &consts, pilot, frames)?;
        for i in 0..chunk.len() {
            let mut tr = EpisodeTrace {
                thetas: Vec::with_capacity(frames),
                pilots: Vec::with_capacity(frames),
                features: Vec::with_capacity(frames),
                hidden: Vec::with_capacity(frames),
                cell: Vec::with_capacity(frames),
                estimates: Vec::with_capacity(frames),
            };
            for t in 0..frames {
                let th = tape.value(r.thetas[t]);
                let re: Vec<f64> = (0..n).map(|k| th[[i, k]]).collect();
                let im: Vec<f64> = (0..n).map(|k| th[[i, n + k]]).collect();
                tr.thetas.push(RisConfig::from_logits(&re, &im));
                let (yr, yi) = r.pilots[t];
                tr.pilots.push(Complex64::new(
                    tape.value(yr)[[i, 0]],
                    tape.value(yi)[[i, 0]],
                ));
                tr.features.push(row(tape.value(r.features[t]), i));
                tr.hidden.push(row(tape.value(r.states[t].s), i));
                tr.cell.push(row(tape.value(r.states[t].c), i));
                let e = tape.value(r.estimates[t]);
                tr.estimates.push([e[[i, 0]], e[[i, 1]], e[[i, 2]]]);
            }
            traces.push(tr);
        }
    }
    Ok(traces)
}

/// Runs one episode on `channel`, drawing pilot noise from `rng`.
pub fn run_episode(
    scene: &Scene,
    channel: &ChannelRealization,
    pilot: &PilotParams,
    weights: &PolicyWeights,
    rng: &mut impl Rng,
) -> Result<EpisodeTrace> {
    let noise = (0..pilot.frames).map(|_| complex_normal(rng)).collect();
    let ep = Episode {
        ue: [0.0; 3],
        channel: channel.clone(),
        noise,
    };
    Ok(run_episodes(scene, std::slice::from_ref(&ep), pilot, weights)?.remove(0))
}

/// Squared final-frame error averaged over a batch.
pub fn loss_final(traces: &[EpisodeTrace], truth: &[Vec3]) -> f64 {
    let total: f64 = traces
        .iter()
        .zip(truth)
        .map(|(tr, p)| squared_distance(tr.final_estimate(), *p))
        .sum();
    total / traces.len() as f64
}

/// Per-frame squared error averaged over frames, then over the batch.
pub fn loss_average(traces: &[EpisodeTrace], truth: &[Vec3]) -> f64 {
    let total: f64 = traces
        .iter()
        .zip(truth)
        .map(|(tr, p)| {
            tr.estimates
                .iter()
                .map(|e| squared_distance(*e, *p))
                .sum::<f64>()
                / tr.frames() as f64
        })
        .sum();
    total / traces.len() as f64
}

pub fn squared_distance(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Trainable wrapper binding weights to a scene, pilot and loss.
#[derive(Debug, Clone)]
pub struct ActivePolicy {
    pub weights: PolicyWeights,
    pub scene: Scene,
    pub pilot: PilotParams,
    pub loss: LossKind,
}

impl Trainable for ActivePolicy {
    fn params(&self) -> &ParamSet {
        &self.weights.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.weights.params
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
        let vars = PolicyVars::new(&self.weights, bound)?;
        let consts = BatchConsts::new(tape, episodes, self.pilot.frames, self.scene.noise_power)?;
        let r = rollout(tape, &vars, &consts, &self.pilot, self.pilot.frames)?;
        rollout_loss(tape, &r, consts.target, self.loss)
    }

    fn evaluate_mse(&self, episodes: &[Episode]) -> Result<f64> {
        let traces = run_episodes(&self.scene, episodes, &self.pilot, &self.weights)?;
        let truth: Vec<Vec3> = episodes.iter().map(|e| e.ue).collect();
        Ok(loss_final(&traces, &truth))
    }
}

/// Compares backpropagated gradients of the full rollout loss with central
/// differences of step `h`, for every weight tensor.
pub fn check_policy_gradients(
    scene: &Scene,
    pilot: &PilotParams,
    weights: &PolicyWeights,
    episodes: &[Episode],
    loss: LossKind,
    h: f64,
) -> Result<GradCheckReport> {
    let names = weights.params.names().to_vec();
    let build = |tape: &mut Tape, vars: &[Var]| -> risloc_autodiff::Result<Var> {
        let bound = BoundParams::new(&names, vars)?;
        let run = |tape: &mut Tape| -> Result<Var> {
            let p = PolicyVars::new(weights, &bound)?;
            let consts = BatchConsts::new(tape, episodes, pilot.frames, scene.noise_power)?;
            let r = rollout(tape, &p, &consts, pilot, pilot.frames)?;
            rollout_loss(tape, &r, consts.target, loss)
        };
        run(tape).map_err(|e| risloc_autodiff::AutodiffError::NonFinite(e.to_string()))
    };
    Ok(grad_check(build, weights.params.values(), h)?)
}

/// Estimates of every frame for a batch, as positions (used by tests and
/// the frame sweep).
pub fn estimates_by_frame(traces: &[EpisodeTrace]) -> Vec<Vec<Vec3>> {
    let frames = traces.first().map(|t| t.frames()).unwrap_or(0);
    (0..frames)
        .map(|t| traces.iter().map(|tr| tr.estimates[t]).collect())
        .collect()
}
