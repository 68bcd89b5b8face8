//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use risloc::baselines::crlb::{crlb_objective, CrlbConfig};
use risloc::baselines::fingerprint::FingerprintDb;
use risloc::channel::{
    los_channel, pathlosses, sample_channel, LosJacobian, PilotParams, RisConfig,
};
use risloc::rng::{stream, Role};
use risloc::scene::{GridSpec, Scene, Vec3};
use risloc_autodiff::{Result as AdResult, Tape, Var};

/// Empirical second moment of a channel coefficient against its target.
#[derive(Debug, Clone)]
pub struct Moment {
    pub name: String,
    pub mean: f64,
    pub std_error: f64,
    pub target: f64,
}

impl Moment {
    pub fn within(&self, k: f64) -> bool {
        (self.mean - self.target).abs() <= k * self.std_error
    }
}

fn moment(name: String, xs: &[f64], target: f64) -> Moment {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Moment {
        name,
        mean,
        std_error: (var / n).sqrt(),
        target,
    }
}

/// `E|h_d|²`, `E|h_r[n]|²`, `E|g_r[n]|²` over `samples` draws at `ue`.
pub fn channel_moments(scene: &Scene, ue: Vec3, samples: usize, seed: u64) -> Vec<Moment> {
    let (rho, kappa, xi) = pathlosses(scene, ue).unwrap();
    let n = scene.num_elements();
    let mut hd = Vec::with_capacity(samples);
    let mut hr = vec![Vec::with_capacity(samples); n];
    let mut gr = vec![Vec::with_capacity(samples); n];
    for i in 0..samples as u64 {
        let ch = sample_channel(scene, ue, &mut stream(seed, i, Role::Channel)).unwrap();
        hd.push(ch.h_d.norm_sqr());
        for k in 0..n {
            hr[k].push(ch.h_r[k].norm_sqr());
            gr[k].push(ch.g_r[k].norm_sqr());
        }
    }
    let mut out = vec![moment("h_d".into(), &hd, rho * rho)];
    for k in 0..n {
        out.push(moment(format!("h_r[{k}]"), &hr[k], kappa * kappa));
        out.push(moment(format!("g_r[{k}]"), &gr[k], xi * xi));
    }
    out
}

/// Largest relative deviation of sampled channels from the LOS channel.
pub fn max_los_deviation(scene: &Scene, ue: Vec3, samples: usize, seed: u64) -> f64 {
    let los = los_channel(scene, ue).unwrap();
    let rel = |a: Complex64, b: Complex64| (a - b).norm() / b.norm();
    let mut worst: f64 = 0.0;
    for i in 0..samples as u64 {
        let ch = sample_channel(scene, ue, &mut stream(seed, i, Role::Channel)).unwrap();
        worst = worst.max(rel(ch.h_d, los.h_d));
        for k in 0..ch.h_r.len() {
            worst = worst.max(rel(ch.h_r[k], los.h_r[k]));
            worst = worst.max(rel(ch.g_r[k], los.g_r[k]));
        }
    }
    worst
}

/// Worst relative gap between the analytic position derivatives of the LOS
/// mean and central differences of step `h`.
pub fn mean_gradient_error(scene: &Scene, p: Vec3, theta: &RisConfig, h: f64) -> f64 {
    let g = LosJacobian::new(scene, p).unwrap().mean_gradient(theta);
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let (mut pp, mut pm) = (p, p);
        pp[k] += h;
        pm[k] -= h;
        let fp = los_channel(scene, pp).unwrap().response(theta);
        let fm = los_channel(scene, pm).unwrap().response(theta);
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max((fd - g[k]).norm() / g[k].norm().max(1e-300));
    }
    worst
}

/// Best `trace(J⁻¹)` over a `steps × steps` grid of phase pairs (N = 2).
pub fn grid_search_two_phases(
    scene: &Scene,
    pilot: &PilotParams,
    estimate: Vec3,
    past: &[RisConfig],
    steps: usize,
) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..steps {
        for b in 0..steps {
            let d = std::f64::consts::TAU / steps as f64;
            let theta = RisConfig::from_phases(&[a as f64 * d, b as f64 * d]);
            best = best.min(crlb_objective(scene, pilot, estimate, past, &theta).unwrap());
        }
    }
    best
}

pub fn toy_crlb_setup(seed: u64) -> (Scene, PilotParams, Vec3, Vec<RisConfig>, CrlbConfig) {
    let scene = Scene::reference().with_ris(1, 2);
    let pilot = PilotParams::new(20.0, 3);
    let mut rng = stream(seed, 0, Role::Theta);
    let past: Vec<RisConfig> = (0..2).map(|_| RisConfig::random(2, &mut rng)).collect();
    let estimate = scene
        .ue_region
        .sample(&mut stream(seed, 0, Role::UePosition));
    (scene, pilot, estimate, past, CrlbConfig::default())
}

/// A database with random centers and RSS rows; some rows are duplicated
/// so distance ties occur.
pub fn random_toy_db(seed: u64) -> FingerprintDb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = rng.random_range(3..40);
    let frames = rng.random_range(1..6);
    let mut rss: Vec<Vec<f64>> = Vec::with_capacity(blocks);
    for b in 0..blocks {
        if b > 0 && rng.random_bool(0.2) {
            let j = rng.random_range(0..b);
            rss.push(rss[j].clone());
        } else {
            rss.push((0..frames).map(|_| rng.random_range(0.0..10.0)).collect());
        }
    }
    let centers = (0..blocks)
        .map(|_| {
            [
                rng.random_range(-30.0..30.0),
                rng.random_range(-30.0..30.0),
                -20.0,
            ]
        })
        .collect();
    FingerprintDb {
        grid: GridSpec {
            origin: [0.0, 0.0, -20.0],
            pitch: 1.0,
            nx: blocks,
            ny: 1,
        },
        frames,
        seed,
        realizations: 1,
        thetas: vec![RisConfig::ones(1); frames],
        centers,
        rss,
    }
}

/// Full sort by (distance, index), first `k`, weights `1/(d + 1e-9)`.
pub fn brute_force_wknn(db: &FingerprintDb, query: &[f64], k: usize) -> Vec3 {
    let mut all: Vec<(f64, usize)> = Vec::new();
    for i in 0..db.rss.len() {
        let mut s = 0.0;
        for t in 0..query.len() {
            s += (db.rss[i][t] - query[t]) * (db.rss[i][t] - query[t]);
        }
        all.push((s.sqrt(), i));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut num = [0.0; 3];
    let mut den = 0.0;
    for &(d, i) in &all[..k] {
        let w = 1.0 / (d + 1e-9);
        for c in 0..3 {
            num[c] += w * db.centers[i][c];
        }
        den += w;
    }
    [num[0] / den, num[1] / den, num[2] / den]
}

/// Queries for a toy database: exact rows, perturbed rows and fresh points.
pub fn toy_queries(db: &FingerprintDb, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut out = vec![db.rss[0].clone()];
    let j = rng.random_range(0..db.rss.len());
    out.push(
        db.rss[j]
            .iter()
            .map(|v| v + rng.random_range(-0.5..0.5))
            .collect(),
    );
    out.push(
        (0..db.frames)
            .map(|_| rng.random_range(0.0..10.0))
            .collect(),
    );
    out
}

/// θ_n = conj(phase of v_r[n] / h_d) steers the UE's LOS cascade into phase
/// with its direct path.
pub fn matched_theta(scene: &Scene, ue: Vec3) -> RisConfig {
    let los = los_channel(scene, ue).unwrap();
    let ref_phase = los.h_d.arg();
    let phases: Vec<f64> = los.v_r.iter().map(|v| ref_phase - v.arg()).collect();
    RisConfig::from_phases(&phases)
}

/// A random graph of 5 to 9 ops over two or three parameters, ending in a
/// weighted sum.
pub fn random_graph(
    seed: u64,
) -> (
    Vec<Array2<f64>>,
    impl Fn(&mut Tape, &[Var]) -> AdResult<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..4);
    let cols = 2 * rng.random_range(1..3);
    let nparams = rng.random_range(2..4);
    let params: Vec<Array2<f64>> = (0..nparams)
        .map(|_| Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0)))
        .collect();
    let mixer = Array2::from_shape_fn((cols, cols), |_| rng.random_range(-1.0..1.0));
    let weights = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
    let ops: Vec<(u8, usize, usize)> = (0..rng.random_range(5..10))
        .map(|_| {
            (
                rng.random_range(0..9u8),
                rng.random::<u32>() as usize,
                rng.random::<u32>() as usize,
            )
        })
        .collect();
    let build = move |t: &mut Tape, v: &[Var]| -> AdResult<Var> {
        let mut pool: Vec<Var> = v.to_vec();
        let mixer = t.constant(mixer.clone());
        for &(op, i, j) in &ops {
            let a = pool[i % pool.len()];
            let b = pool[j % pool.len()];
            let out = match op {
                0 => t.add(a, b)?,
                1 => t.sub(a, b)?,
                2 => t.mul(a, b)?,
                3 => t.tanh(a),
                4 => t.sigmoid(a),
                5 => t.matmul(a, mixer)?,
                6 => {
                    let s = t.scale(a, 0.5);
                    t.square(s)
                }
                7 => t.unit_modulus(a)?,
                _ => {
                    let h = a.cols() / 2;
                    let (ar, ai) = (t.slice_cols(a, 0, h)?, t.slice_cols(a, h, 2 * h)?);
                    let (br, bi) = (t.slice_cols(b, 0, h)?, t.slice_cols(b, h, 2 * h)?);
                    let (r, i) = t.complex_mul((ar, ai), (br, bi))?;
                    t.concat_cols(&[r, i])?
                }
            };
            pool.push(out);
        }
        let last = *pool.last().expect("non-empty");
        let w = t.constant(weights.clone());
        let p = t.mul(last, w)?;
        Ok(t.sum(p))
    };
    (params, build)
}

/// A seconds-scale experiment over every method: 2×2 RIS, T = 2, small
/// networks and few episodes.
pub fn tiny_config(output_dir: &std::path::Path) -> risloc::config::ExperimentConfig {
    let mut cfg = risloc::config::ExperimentConfig::desk();
    cfg.scene = Scene::reference().with_ris(2, 2);
    cfg.pilot.frames = 2;
    cfg.policy = risloc::policy::PolicyShape {
        hidden: 8,
        head_width: 8,
        head_layers: 4,
    };
    cfg.training.steps = 6;
    cfg.training.batch_size = 16;
    cfg.training.steps_per_epoch = 3;
    cfg.training.validation_size = 16;
    cfg.training.warmup_samples = 200;
    cfg.static_dnn.hidden = vec![8, 8];
    cfg.wknn.block_size = 5.0;
    cfg.wknn.realizations_per_block = 2;
    cfg.crlb.gd_iterations = 5;
    cfg.crlb.refine_steps = 5;
    cfg.crlb.map_grid_pitch = 5.0;
    cfg.evaluation.episodes = 12;
    cfg.output_dir = output_dir.to_path_buf();
    cfg
}
