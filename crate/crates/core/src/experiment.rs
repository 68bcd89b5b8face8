//! Training and paired evaluation of every method, result tables, run
//! manifests and run-directory locking.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::crlb::crlb_active_episode;
use crate::baselines::fingerprint::{build_fingerprints, online_rss, wknn_localize, FingerprintDb};
use crate::baselines::static_dnn::{Provenance, StaticDnn, StaticRisDesign};
use crate::channel::{PilotParams, RisConfig};
use crate::config::{ExperimentConfig, Method};
use crate::dataset::{sample_episodes, Episode};
use crate::error::{Error, Result};
use crate::policy::{run_episodes, ActivePolicy, PolicyWeights};
use crate::rng::{derive_seed, stream, Role};
use crate::scene::distance;
use crate::training::{fit, LossKind, TrainLog};

/// Error statistics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    pub median: f64,
}

/// MSE (m²), RMSE (m) and median (m) of per-episode position errors.
pub fn metrics(errors: &[f64]) -> Result<Metrics> {
    if errors.is_empty() {
        return Err(Error::NonFiniteMetric("no episodes".into()));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite()) {
        return Err(Error::NonFiniteMetric(format!("episode error {e}")));
    }
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    Ok(Metrics {
        mse,
        rmse: mse.sqrt(),
        median: median(errors),
    })
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub snr_db: f64,
    pub frames: usize,
    pub mse_m2: f64,
    pub rmse_m: f64,
    pub median_err_m: f64,
    pub episodes: usize,
}

impl ResultRow {
    pub fn new(method: &str, snr_db: f64, frames: usize, errors: &[f64]) -> Result<Self> {
        let m = metrics(errors)?;
        Ok(Self {
            method: method.to_string(),
            snr_db,
            frames,
            mse_m2: m.mse,
            rmse_m: m.rmse,
            median_err_m: m.median,
            episodes: errors.len(),
        })
    }
}

/// Rows of `(method, SNR, T)` metrics. Wall time is kept in the manifest so
/// the CSV is reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "method",
                "snr_db",
                "frames",
                "mse_m2",
                "rmse_m",
                "median_err_m",
                "episodes",
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn find(&self, method: &str, snr_db: f64, frames: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.snr_db == snr_db && r.frames == frames)
    }
}

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn tag(method: Method, snr_db: f64) -> String {
        format!("{}_snr{}", method.name(), snr_db)
    }

    pub fn checkpoint(&self, method: Method, snr_db: f64) -> PathBuf {
        let ext = if method == Method::Wknn {
            "fpdb"
        } else {
            "ckpt"
        };
        self.root
            .join("checkpoints")
            .join(format!("{}.{ext}", Self::tag(method, snr_db)))
    }

    pub fn train_log(&self, method: Method, snr_db: f64) -> PathBuf {
        self.root
            .join("logs")
            .join(format!("{}.json", Self::tag(method, snr_db)))
    }

    pub fn table(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.csv"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

/// Config echo, checkpoint hashes, versions and timings of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: String,
    pub test_episodes: usize,
    pub checkpoints: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub timings_s: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut versions = BTreeMap::new();
        versions.insert("risloc".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("checkpoint_format".into(), "1".into());
        Ok(Self {
            config: cfg.to_toml_string()?,
            test_episodes: cfg.evaluation.episodes,
            versions,
            ..Self::default()
        })
    }

    /// Merges with an existing manifest so successive subcommands on one run
    /// directory accumulate.
    pub fn load_or_new(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let fresh = Self::new(cfg)?;
        if !path.exists() {
            return Ok(fresh);
        }
        let mut old: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        old.config = fresh.config;
        old.test_episodes = fresh.test_episodes;
        old.versions = fresh.versions;
        Ok(old)
    }

    pub fn record_file(&mut self, root: &Path, path: &Path) -> Result<()> {
        let key = path
            .strip_prefix(root)
            .unwrap_or(path)
            .display()
            .to_string();
        self.checkpoints.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(std::fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn method_salt(method: Method) -> u64 {
    match method {
        Method::Active => 1,
        Method::StaticRandom => 2,
        Method::StaticLearned => 3,
        Method::Wknn => 4,
        Method::CrlbGd => 5,
    }
}

/// The random RIS sequence shared by the random-design DNN, the initial
/// learned design and the fingerprint database.
pub fn shared_random_design(cfg: &ExperimentConfig) -> StaticRisDesign {
    StaticRisDesign::random(
        cfg.scene.num_elements(),
        cfg.pilot.frames,
        derive_seed(cfg.seeds.train, 0xDE51),
    )
}

/// The evaluation set: identical for every method and SNR point.
pub fn test_episodes(cfg: &ExperimentConfig, frames: usize) -> Result<Vec<Episode>> {
    sample_episodes(
        &cfg.scene,
        frames,
        cfg.seeds.eval,
        0,
        cfg.evaluation.episodes,
    )
}

/// Trains `method` at one SNR and writes its checkpoint. Returns the
/// training log for learned methods; the CRLB scheme has nothing to train.
pub fn train_method(
    cfg: &ExperimentConfig,
    method: Method,
    snr_db: f64,
    dir: &RunDir,
) -> Result<Option<TrainLog>> {
    let pilot = cfg.pilot.pilot(snr_db);
    let scene = &cfg.scene;
    let ckpt = dir.checkpoint(method, snr_db);
    std::fs::create_dir_all(ckpt.parent().expect("checkpoint dir"))?;
    let init_seed = derive_seed(cfg.seeds.train, method_salt(method));
    let log = match method {
        Method::Active => {
            let weights = PolicyWeights::for_scene(
                cfg.policy,
                cfg.pilot.feature,
                scene,
                &pilot,
                cfg.training.warmup_samples,
                init_seed,
            )?;
            let mut model = ActivePolicy {
                weights,
                scene: scene.clone(),
                pilot,
                loss: cfg.training.loss,
            };
            let (log, _) = fit(&mut model, scene, &cfg.training, cfg.seeds.train)?;
            model.weights.save(
                &ckpt,
                &[
                    ("frames", Value::from(pilot.frames)),
                    ("loss", Value::from(cfg.training.loss.name())),
                    ("snr_db", Value::from(snr_db)),
                    ("scene_fingerprint", Value::from(scene.fingerprint())),
                ],
            )?;
            Some(log)
        }
        Method::StaticRandom | Method::StaticLearned => {
            let mut design = shared_random_design(cfg);
            if method == Method::StaticLearned {
                design.provenance = Provenance::Learned;
            }
            let mut model = StaticDnn::new(
                scene,
                &pilot,
                cfg.pilot.feature,
                &cfg.static_dnn.hidden,
                design,
                cfg.training.warmup_samples,
                init_seed,
            )?;
            let (log, _) = fit(&mut model, scene, &cfg.training, cfg.seeds.train)?;
            model.save(&ckpt)?;
            Some(log)
        }
        Method::Wknn => {
            let design = shared_random_design(cfg);
            let db = build_fingerprints(
                scene,
                &pilot,
                &design.thetas,
                cfg.wknn.realizations_per_block,
                cfg.wknn.block_size,
                init_seed,
            )?;
            db.save(&ckpt)?;
            None
        }
        Method::CrlbGd => None,
    };
    if let Some(log) = &log {
        let path = dir.train_log(method, snr_db);
        std::fs::create_dir_all(path.parent().expect("log dir"))?;
        std::fs::write(path, serde_json::to_string_pretty(log)?)?;
    }
    Ok(log)
}

/// Per-episode final errors and the configurations each method emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEval {
    pub errors: Vec<f64>,
    /// Largest `||θ_n| − 1|` over every emitted configuration.
    pub max_modulus_error: f64,
    pub configurations: usize,
}

fn max_modulus(thetas: &[RisConfig]) -> f64 {
    thetas
        .iter()
        .map(RisConfig::max_modulus_error)
        .fold(0.0, f64::max)
}

/// Loads the active policy checkpoint of one SNR point.
pub fn load_active(cfg: &ExperimentConfig, dir: &RunDir, snr_db: f64) -> Result<PolicyWeights> {
    PolicyWeights::load(
        dir.checkpoint(Method::Active, snr_db),
        cfg.scene.num_elements(),
        cfg.pilot.feature,
    )
}

/// Evaluates a trained (or training-free) method on `episodes`.
pub fn evaluate_method(
    cfg: &ExperimentConfig,
    method: Method,
    snr_db: f64,
    dir: &RunDir,
    episodes: &[Episode],
) -> Result<MethodEval> {
    let scene = &cfg.scene;
    let pilot: PilotParams = cfg.pilot.pilot(snr_db);
    let ckpt = dir.checkpoint(method, snr_db);
    let mut errors = Vec::with_capacity(episodes.len());
    let mut max_err = 0.0f64;
    let mut configurations = 0;
    match method {
        Method::Active => {
            let weights = load_active(cfg, dir, snr_db)?;
            for (tr, ep) in run_episodes(scene, episodes, &pilot, &weights)?
                .iter()
                .zip(episodes)
            {
                errors.push(distance(tr.final_estimate(), ep.ue));
                max_err = max_err.max(max_modulus(&tr.thetas));
                configurations += tr.thetas.len();
            }
        }
        Method::StaticRandom | Method::StaticLearned => {
            let model = StaticDnn::load(&ckpt, scene, &pilot, cfg.pilot.feature)?;
            let design = model.current_design();
            for (e, ep) in model.estimate(episodes)?.iter().zip(episodes) {
                errors.push(distance(*e, ep.ue));
            }
            max_err = max_modulus(&design.thetas);
            configurations = design.thetas.len() * episodes.len();
        }
        Method::Wknn => {
            let db = FingerprintDb::load(&ckpt)?;
            if db.frames != pilot.frames {
                return Err(Error::CheckpointMismatch(format!(
                    "fingerprints have T = {}, config has {}",
                    db.frames, pilot.frames
                )));
            }
            for ep in episodes {
                let q = online_rss(&db, scene, &pilot, ep)?;
                errors.push(distance(wknn_localize(&db, &q, cfg.wknn.k)?, ep.ue));
            }
            max_err = max_modulus(&db.thetas);
            configurations = db.thetas.len() * episodes.len();
        }
        Method::CrlbGd => {
            for (i, ep) in episodes.iter().enumerate() {
                let mut rng = stream(
                    cfg.seeds.eval,
                    i as u64,
                    Role::Custom(method_salt(method) as u32),
                );
                let tr = crlb_active_episode(scene, ep, &pilot, &cfg.crlb, &mut rng)?;
                errors.push(distance(tr.final_estimate(), ep.ue));
                max_err = max_err.max(max_modulus(&tr.thetas));
                configurations += tr.thetas.len();
            }
        }
    }
    Ok(MethodEval {
        errors,
        max_modulus_error: max_err,
        configurations,
    })
}

/// Whether to train before evaluating or to require existing checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainAndEvaluate,
    EvaluateOnly,
}

/// One row per `(method, SNR)`, all methods scored on the same test set.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &RunDir, stage: Stage) -> Result<ResultTable> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&dir.root)?;
    let mut manifest = Manifest::load_or_new(&dir.manifest(), cfg)?;
    let episodes = test_episodes(cfg, cfg.pilot.frames)?;
    let mut table = ResultTable::default();
    for &snr in &cfg.pilot.snr_db {
        for &method in &cfg.methods {
            let key = format!("{}_snr{}", method.name(), snr);
            if stage == Stage::TrainAndEvaluate {
                let t0 = Instant::now();
                train_method(cfg, method, snr, dir)?;
                manifest
                    .timings_s
                    .insert(format!("train.{key}"), t0.elapsed().as_secs_f64());
            }
            let ckpt = dir.checkpoint(method, snr);
            if ckpt.exists() {
                manifest.record_file(&dir.root, &ckpt)?;
            }
            let t0 = Instant::now();
            let eval = evaluate_method(cfg, method, snr, dir, &episodes)?;
            manifest
                .timings_s
                .insert(format!("evaluate.{key}"), t0.elapsed().as_secs_f64());
            let row = ResultRow::new(method.name(), snr, cfg.pilot.frames, &eval.errors)?;
            info!(
                "{key}: mse {:.3} m2, median {:.3} m",
                row.mse_m2, row.median_err_m
            );
            table.rows.push(row);
        }
    }
    manifest.save(dir.manifest())?;
    Ok(table)
}

/// Trains every configured method at every SNR point without evaluating.
pub fn train_all(cfg: &ExperimentConfig, dir: &RunDir) -> Result<BTreeMap<String, TrainLog>> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&dir.root)?;
    let mut manifest = Manifest::load_or_new(&dir.manifest(), cfg)?;
    let mut logs = BTreeMap::new();
    for &snr in &cfg.pilot.snr_db {
        for &method in &cfg.methods {
            let key = format!("{}_snr{}", method.name(), snr);
            let t0 = Instant::now();
            let log = train_method(cfg, method, snr, dir)?;
            manifest
                .timings_s
                .insert(format!("train.{key}"), t0.elapsed().as_secs_f64());
            let ckpt = dir.checkpoint(method, snr);
            if ckpt.exists() {
                manifest.record_file(&dir.root, &ckpt)?;
            }
            if let Some(log) = log {
                logs.insert(key, log);
            }
        }
    }
    manifest.save(dir.manifest())?;
    Ok(logs)
}

/// Per-frame errors of one trained active policy on `episodes`.
pub fn per_frame_errors(
    cfg: &ExperimentConfig,
    weights: &PolicyWeights,
    snr_db: f64,
    episodes: &[Episode],
) -> Result<Vec<Vec<f64>>> {
    let pilot = cfg.pilot.pilot(snr_db);
    let traces = run_episodes(&cfg.scene, episodes, &pilot, weights)?;
    Ok((0..pilot.frames)
        .map(|t| {
            traces
                .iter()
                .zip(episodes)
                .map(|(tr, ep)| distance(tr.estimates[t], ep.ue))
                .collect()
        })
        .collect())
}

/// Rows for `t = 1..T` of the active policy truncated after frame `t`, with
/// no retraining. The policy is causal, so the frame-`t` estimate of a
/// `T`-frame rollout is exactly the output of a `t`-frame rollout.
pub fn sweep_frames(cfg: &ExperimentConfig, dir: &RunDir) -> Result<ResultTable> {
    cfg.validate()?;
    let _lock = RunLock::acquire(&dir.root)?;
    let mut manifest = Manifest::load_or_new(&dir.manifest(), cfg)?;
    let episodes = test_episodes(cfg, cfg.pilot.frames)?;
    let mut table = ResultTable::default();
    for &snr in &cfg.pilot.snr_db {
        let ckpt = dir.checkpoint(Method::Active, snr);
        let weights = load_active(cfg, dir, snr)?;
        let ck = risloc_autodiff::Checkpoint::load(&ckpt)?;
        if ck.meta.get("loss").and_then(Value::as_str) != Some(LossKind::Average.name()) {
            warn!("{} was not trained with the averaged loss", ckpt.display());
        }
        manifest.record_file(&dir.root, &ckpt)?;
        for (t, errs) in per_frame_errors(cfg, &weights, snr, &episodes)?
            .iter()
            .enumerate()
        {
            table
                .rows
                .push(ResultRow::new(Method::Active.name(), snr, t + 1, errs)?);
        }
    }
    manifest.save(dir.manifest())?;
    Ok(table)
}
