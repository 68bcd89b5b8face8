use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use risloc::config::{ExperimentConfig, Method};
use risloc::dataset::sample_episode;
use risloc::experiment::{run_experiment, sweep_frames, train_all, RunDir, RunLock, Stage};
use risloc::features::FeatureMode;
use risloc::policy::{check_policy_gradients, PolicyShape, PolicyWeights};
use risloc::radiomap::export_radiomap;
use risloc::scene::{GridSpec, Scene};
use risloc::training::LossKind;

#[derive(Parser)]
#[command(
    name = "risloc",
    version,
    about = "Active RIS configuration design for uplink localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Restricts the run to these methods (repeatable).
    #[arg(short, long)]
    method: Vec<Method>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Overrides the number of test episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

impl Common {
    /// Loads, overrides, validates and echoes the resolved configuration.
    fn resolve(&self) -> anyhow::Result<(ExperimentConfig, RunDir)> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if !self.method.is_empty() {
            cfg.methods = self.method.clone();
        }
        if let Some(s) = self.train_seed {
            cfg.seeds.train = s;
        }
        if let Some(s) = self.eval_seed {
            cfg.seeds.eval = s;
        }
        if let Some(n) = self.episodes {
            cfg.evaluation.episodes = n;
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        cfg.save(cfg.output_dir.join("config.resolved.toml"))?;
        let dir = RunDir::new(cfg.output_dir.clone());
        Ok((cfg, dir))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured methods at every SNR point and save checkpoints.
    Train(Common),
    /// Evaluate saved checkpoints on the shared test set.
    Evaluate(Common),
    /// Train and evaluate the baselines (every configured method except
    /// `active` unless `--method` is given).
    Baseline(Common),
    /// Evaluate the active policy truncated after each frame.
    SweepFrames {
        #[command(flatten)]
        common: Common,
        /// Train the policy with the averaged loss first.
        #[arg(long)]
        train: bool,
    },
    /// Write per-frame RSS maps for one test episode.
    Radiomap {
        #[command(flatten)]
        common: Common,
        /// Index into the test set.
        #[arg(long, default_value_t = 0)]
        episode: u64,
        /// SNR point of the checkpoint (defaults to the first listed).
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        pitch: f64,
    },
    /// Finite-difference check of the full policy gradient on a small model.
    GradCheck {
        #[arg(long, default_value_t = 2)]
        ris_rows: usize,
        #[arg(long, default_value_t = 2)]
        ris_cols: usize,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 8)]
        head_width: usize,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn print_table(table: &risloc::experiment::ResultTable) -> anyhow::Result<()> {
    print!("{}", table.to_csv_string()?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, dir) = common.resolve()?;
            for (key, log) in train_all(&cfg, &dir)? {
                let last = log.epochs.last().map_or(f64::NAN, |e| e.val_mse);
                println!("{key}: final validation mse {last:.3} m2");
            }
        }
        Command::Evaluate(common) => {
            let (cfg, dir) = common.resolve()?;
            let table = run_experiment(&cfg, &dir, Stage::EvaluateOnly)?;
            table.write_csv(dir.table("results"))?;
            print_table(&table)?;
        }
        Command::Baseline(common) => {
            let (mut cfg, dir) = common.resolve()?;
            if common.method.is_empty() {
                cfg.methods.retain(|m| *m != Method::Active);
            }
            if cfg.methods.is_empty() {
                bail!("no baseline methods selected");
            }
            let table = run_experiment(&cfg, &dir, Stage::TrainAndEvaluate)?;
            table.write_csv(dir.table("baselines"))?;
            print_table(&table)?;
        }
        Command::SweepFrames { common, train } => {
            let (mut cfg, dir) = common.resolve()?;
            if train {
                cfg.methods = vec![Method::Active];
                cfg.training.loss = LossKind::Average;
                train_all(&cfg, &dir)?;
            }
            let table = sweep_frames(&cfg, &dir)?;
            table.write_csv(dir.table("sweep_frames"))?;
            print_table(&table)?;
        }
        Command::Radiomap {
            common,
            episode,
            snr,
            pitch,
        } => {
            let (cfg, dir) = common.resolve()?;
            let _lock = RunLock::acquire(&dir.root)?;
            let snr = snr.unwrap_or(cfg.pilot.snr_db[0]);
            let pilot = cfg.pilot.pilot(snr);
            let weights = risloc::experiment::load_active(&cfg, &dir, snr)?;
            let ep = sample_episode(&cfg.scene, cfg.pilot.frames, cfg.seeds.eval, episode)?;
            let grid = GridSpec::over_region(&cfg.scene.ue_region, pitch)?;
            let map = export_radiomap(&cfg.scene, &pilot, &weights, &ep, grid)?;
            let out = dir.root.join("radiomap").join(format!("episode_{episode}"));
            map.write(&out)?;
            println!("frame,outshine_fraction");
            for t in 0..map.frames.len() {
                println!("{},{}", t + 1, map.outshine_fraction(t));
            }
            info!("radio maps written to {}", out.display());
        }
        Command::GradCheck {
            ris_rows,
            ris_cols,
            frames,
            hidden,
            head_width,
            batch,
            seed,
            tolerance,
        } => {
            let scene = Scene::reference().with_ris(ris_rows, ris_cols);
            scene.validate()?;
            let pilot = risloc::channel::PilotParams::new(20.0, frames);
            let shape = PolicyShape {
                hidden,
                head_width,
                head_layers: 4,
            };
            shape.validate()?;
            let mut weights =
                PolicyWeights::for_scene(shape, FeatureMode::Pilot, &scene, &pilot, 1000, seed)?;
            weights.randomize_biases(0.5, seed);
            let episodes = risloc::dataset::sample_episodes(&scene, frames, seed, 0, batch)?;
            let mut ok = true;
            for loss in [LossKind::Final, LossKind::Average] {
                let report =
                    check_policy_gradients(&scene, &pilot, &weights, &episodes, loss, 1e-6)?;
                let pass = report.passes(tolerance);
                ok &= pass;
                println!(
                    "{} loss: max relative error {:.3e} over {} tensors: {}",
                    loss.name(),
                    report.max_rel_error,
                    report.per_param.len(),
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
