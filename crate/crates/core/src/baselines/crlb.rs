//! Adaptive baseline: each next RIS configuration minimizes the position
//! error bound at the current MAP estimate.
//!
//! The Fisher information uses the deterministic LOS model
//! `μ_t(p) = h_d(p) + v_r(p)ᵀθ_t` and treats fading as extra noise:
//! `J = (2P/σ²) Σ_t Re{∂μ_tᴴ ∂μ_t}`.

use log::warn;
use nalgebra::{Matrix3, SMatrix};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{los_channel, measure_with_noise, LosJacobian, PilotParams, RisConfig};
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::scene::{GridSpec, Scene, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrlbConfig {
    pub gd_iterations: usize,
    /// Initial phase step (rad); halved whenever a step fails to improve.
    pub gd_step: f64,
    pub map_grid_pitch: f64,
    pub refine_steps: usize,
}

impl Default for CrlbConfig {
    fn default() -> Self {
        Self {
            gd_iterations: 100,
            gd_step: 0.1,
            map_grid_pitch: 2.0,
            refine_steps: 50,
        }
    }
}

/// Added to a singular information matrix before inversion.
pub const FIM_REGULARIZATION: f64 = 1e-9;

/// `(2P/σ²) Σ Re{gᴴ g}` for per-frame complex gradients `g` of a `D`-parameter
/// mean.
pub fn fisher_from_gradients<const D: usize>(
    grads: &[[Complex64; D]],
    power: f64,
    noise_power: f64,
) -> SMatrix<f64, D, D> {
    let c = 2.0 * power / noise_power;
    let mut j = SMatrix::<f64, D, D>::zeros();
    for g in grads {
        for a in 0..D {
            for b in 0..D {
                j[(a, b)] += c * (g[a].conj() * g[b]).re;
            }
        }
    }
    j
}

/// Position Fisher information (1/m²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherInfo {
    pub matrix: Matrix3<f64>,
    pub position: Vec3,
}

impl FisherInfo {
    pub fn min_eigenvalue(&self) -> f64 {
        self.matrix.symmetric_eigenvalues().min()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.matrix - self.matrix.transpose()).amax() <= tol
    }

    /// `J⁻¹`, regularized with `1e-9·I` when `J` is singular.
    pub fn inverse(&self) -> Matrix3<f64> {
        regularized_inverse(&self.matrix)
    }

    /// `trace(J⁻¹)`: the bound on the mean squared position error.
    pub fn crlb(&self) -> f64 {
        self.inverse().trace()
    }
}

fn regularized_inverse(j: &Matrix3<f64>) -> Matrix3<f64> {
    if let Some(ch) = j.cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|x| x.is_finite()) {
            return inv;
        }
    }
    warn!("singular Fisher information, adding {FIM_REGULARIZATION:e}·I");
    let reg = j + Matrix3::identity() * FIM_REGULARIZATION;
    reg.cholesky()
        .map(|c| c.inverse())
        .or_else(|| reg.try_inverse())
        .unwrap_or_else(|| Matrix3::identity() / FIM_REGULARIZATION)
}

fn noise_weight(noise_power: f64) -> f64 {
    if noise_power > 0.0 {
        noise_power
    } else {
        1.0
    }
}

fn rotate(g: [Complex64; 3], x: Complex64) -> [Complex64; 3] {
    g.map(|z| z * x)
}

/// Fisher information at `position` for pilots sent under `thetas`.
pub fn fisher_info(
    scene: &Scene,
    pilot: &PilotParams,
    position: Vec3,
    thetas: &[RisConfig],
) -> Result<FisherInfo> {
    let jac = LosJacobian::new(scene, position)?;
    let grads: Vec<[Complex64; 3]> = thetas
        .iter()
        .map(|t| rotate(jac.mean_gradient(t), pilot.pilot_symbol))
        .collect();
    let j = fisher_from_gradients(&grads, pilot.power, noise_weight(scene.noise_power));
    Ok(FisherInfo {
        matrix: Matrix3::from(j),
        position,
    })
}

/// Objective and phase gradient of `trace((J₀ + J(θ(δ)))⁻¹)`.
struct PhaseObjective<'a> {
    jac: &'a LosJacobian,
    base: Matrix3<f64>,
    c: f64,
}

impl PhaseObjective<'_> {
    fn total(&self, theta: &RisConfig) -> (Matrix3<f64>, [Complex64; 3]) {
        let g = self.jac.mean_gradient(theta);
        let jc = fisher_from_gradients(&[g], 1.0, 1.0) * (self.c / 2.0);
        (self.base + Matrix3::from(jc), g)
    }

    fn value(&self, theta: &RisConfig) -> f64 {
        regularized_inverse(&self.total(theta).0).trace()
    }

    /// `∂f/∂δ_n = −2c (qᵀRe z_n + rᵀIm z_n)` with `M = J⁻²`, `q = M Re g`,
    /// `r = M Im g`, `z_n = jθ_n ∂v_n/∂p`.
    fn gradient(&self, theta: &RisConfig) -> (f64, Vec<f64>) {
        let (j, g) = self.total(theta);
        let inv = regularized_inverse(&j);
        let m = inv * inv;
        let g_re = nalgebra::Vector3::new(g[0].re, g[1].re, g[2].re);
        let g_im = nalgebra::Vector3::new(g[0].im, g[1].im, g[2].im);
        let q = m * g_re;
        let r = m * g_im;
        let jj = Complex64::new(0.0, 1.0);
        let grad = self
            .jac
            .dv_r
            .iter()
            .zip(theta.as_slice())
            .map(|(dv, t)| {
                let mut s = 0.0;
                for k in 0..3 {
                    let z = jj * t * dv[k];
                    s += q[k] * z.re + r[k] * z.im;
                }
                -2.0 * self.c * s
            })
            .collect();
        (inv.trace(), grad)
    }
}

/// Result of one phase design.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDesign {
    pub theta: RisConfig,
    pub objective: f64,
    pub initial_objective: f64,
}

/// Phase-domain descent from `initial`: steps of length `gd_step` (rad,
/// max-norm) along the negative gradient, halving the step on any
/// non-improving proposal. Returns the best iterate.
pub fn crlb_gd_from(
    scene: &Scene,
    pilot: &PilotParams,
    estimate: Vec3,
    past: &[RisConfig],
    initial: &RisConfig,
    cfg: &CrlbConfig,
) -> Result<PhaseDesign> {
    let jac = LosJacobian::new(scene, estimate)?;
    if initial.len() != jac.v_r.len() {
        return Err(Error::Dimension(format!(
            "initial configuration has {} elements, scene has {}",
            initial.len(),
            jac.v_r.len()
        )));
    }
    let base = fisher_info(scene, pilot, estimate, past)?.matrix;
    let obj = PhaseObjective {
        jac: &jac,
        base,
        c: 2.0 * pilot.power / noise_weight(scene.noise_power),
    };
    // |x| = 1, so the pilot symbol does not change Re{gᴴg}.
    let mut phases = initial.phases();
    let mut theta = initial.clone();
    let (mut value, mut grad) = obj.gradient(&theta);
    let initial_objective = value;
    let mut step = cfg.gd_step;
    for _ in 0..cfg.gd_iterations {
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !(scale > 0.0) || !scale.is_finite() {
            break;
        }
        let proposal: Vec<f64> = phases
            .iter()
            .zip(&grad)
            .map(|(d, g)| d - step * g / scale)
            .collect();
        let cand = RisConfig::from_phases(&proposal);
        let cand_value = obj.value(&cand);
        if cand_value < value {
            phases = proposal;
            theta = cand;
            (value, grad) = obj.gradient(&theta);
        } else {
            step *= 0.5;
        }
    }
    Ok(PhaseDesign {
        theta,
        objective: value,
        initial_objective,
    })
}

/// Next configuration by descent from a random initial point.
pub fn crlb_gd_next_theta(
    scene: &Scene,
    pilot: &PilotParams,
    estimate: Vec3,
    past: &[RisConfig],
    cfg: &CrlbConfig,
    rng: &mut impl Rng,
) -> Result<PhaseDesign> {
    let init = RisConfig::random(scene.num_elements(), rng);
    crlb_gd_from(scene, pilot, estimate, past, &init, cfg)
}

/// Objective `trace(J⁻¹)` for `past ∪ {candidate}`.
pub fn crlb_objective(
    scene: &Scene,
    pilot: &PilotParams,
    estimate: Vec3,
    past: &[RisConfig],
    candidate: &RisConfig,
) -> Result<f64> {
    let mut all = past.to_vec();
    all.push(candidate.clone());
    Ok(fisher_info(scene, pilot, estimate, &all)?.crlb())
}

/// LOS-model log-likelihood `−Σ|y_t − √P x μ_t(p)|²/σ²` (σ² = 0 is treated
/// as unit weighting).
pub fn log_likelihood(
    scene: &Scene,
    pilot: &PilotParams,
    position: Vec3,
    pilots: &[Complex64],
    thetas: &[RisConfig],
) -> Result<f64> {
    let los = los_channel(scene, position)?;
    let amp = pilot.power.sqrt() * pilot.pilot_symbol;
    let s: f64 = pilots
        .iter()
        .zip(thetas)
        .map(|(y, t)| (y - amp * los.response(t)).norm_sqr())
        .sum();
    Ok(-s / noise_weight(scene.noise_power))
}

fn log_likelihood_gradient(
    scene: &Scene,
    pilot: &PilotParams,
    position: Vec3,
    pilots: &[Complex64],
    thetas: &[RisConfig],
) -> Result<[f64; 3]> {
    let jac = LosJacobian::new(scene, position)?;
    let amp = pilot.power.sqrt() * pilot.pilot_symbol;
    let w = 2.0 / noise_weight(scene.noise_power);
    let mut out = [0.0; 3];
    for (y, t) in pilots.iter().zip(thetas) {
        let resid = y - amp * jac.mean(t);
        let dm = jac.mean_gradient(t);
        for k in 0..3 {
            out[k] += w * (resid.conj() * amp * dm[k]).re;
        }
    }
    Ok(out)
}

/// Maximum of the LOS likelihood over the UE region (uniform prior): coarse
/// grid search followed by improvement-only gradient ascent.
pub fn map_estimate(
    scene: &Scene,
    pilot: &PilotParams,
    pilots: &[Complex64],
    thetas: &[RisConfig],
    cfg: &CrlbConfig,
) -> Result<Vec3> {
    if pilots.is_empty() || pilots.len() != thetas.len() {
        return Err(Error::Dimension(format!(
            "{} pilots for {} configurations",
            pilots.len(),
            thetas.len()
        )));
    }
    let region = &scene.ue_region;
    let grid = GridSpec::over_region(region, cfg.map_grid_pitch)?;
    let mut best = (f64::NEG_INFINITY, region.center);
    for c in grid.centers() {
        let l = log_likelihood(scene, pilot, c, pilots, thetas)?;
        if l > best.0 {
            best = (l, c);
        }
    }
    let (mut value, mut p) = best;
    let mut step = cfg.map_grid_pitch / 2.0;
    for _ in 0..cfg.refine_steps {
        let g = log_likelihood_gradient(scene, pilot, p, pilots, thetas)?;
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        let cand = region.clamp([
            p[0] + step * g[0] / norm,
            p[1] + step * g[1] / norm,
            p[2] + step * g[2] / norm,
        ]);
        let l = log_likelihood(scene, pilot, cand, pilots, thetas)?;
        if l > value {
            value = l;
            p = cand;
        } else {
            step *= 0.5;
        }
    }
    Ok(p)
}

/// Per-frame record of one CRLB-GD episode.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlbTrace {
    pub thetas: Vec<RisConfig>,
    pub pilots: Vec<Complex64>,
    pub estimates: Vec<Vec3>,
}

impl CrlbTrace {
    pub fn final_estimate(&self) -> Vec3 {
        *self.estimates.last().expect("non-empty trace")
    }
}

/// Measure, re-estimate from all pilots so far, design the next
/// configuration; `θ_0` is random.
pub fn crlb_active_episode(
    scene: &Scene,
    episode: &Episode,
    pilot: &PilotParams,
    cfg: &CrlbConfig,
    rng: &mut impl Rng,
) -> Result<CrlbTrace> {
    let frames = pilot.frames;
    let mut tr = CrlbTrace {
        thetas: Vec::with_capacity(frames),
        pilots: Vec::with_capacity(frames),
        estimates: Vec::with_capacity(frames),
    };
    let mut theta = RisConfig::random(scene.num_elements(), rng);
    for t in 0..frames {
        let y = measure_with_noise(
            &episode.channel,
            &theta,
            pilot,
            scene.noise_power,
            episode.noise[t],
        )?;
        tr.thetas.push(theta.clone());
        tr.pilots.push(y);
        let est = map_estimate(scene, pilot, &tr.pilots, &tr.thetas, cfg)?;
        tr.estimates.push(est);
        if t + 1 < frames {
            theta = crlb_gd_next_theta(scene, pilot, est, &tr.thetas, cfg, rng)?.theta;
        }
    }
    Ok(tr)
}
