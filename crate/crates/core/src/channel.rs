//! Rician block-fading channels, RIS configurations and the pilot model.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scene::{
    angles_from_positions, distance, element_offsets, steering_vector, PathlossModel, Scene, Vec3,
};

/// Tolerance on `|θ_n| = 1`.
pub const UNIT_MODULUS_TOL: f64 = 1e-9;

/// Amplitude gain `10^(−(a + b·log10 d)/20)`.
pub fn pathloss_amplitude(distance: f64, model: PathlossModel) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::Domain(format!(
            "pathloss distance must be > 0, got {distance}"
        )));
    }
    Ok(10f64.powf(-(model.a + model.b * distance.log10()) / 20.0))
}

pub fn snr_to_power(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// Draw from CN(0, 1).
pub fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

/// Channels of one coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h_d: Complex64,
    pub h_r: Vec<Complex64>,
    pub g_r: Vec<Complex64>,
    /// Cascade `h_r ∘ g_r`.
    pub v_r: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn new(h_d: Complex64, h_r: Vec<Complex64>, g_r: Vec<Complex64>) -> Self {
        let v_r = h_r.iter().zip(&g_r).map(|(h, g)| h * g).collect();
        Self { h_d, h_r, g_r, v_r }
    }

    /// Cascade-only constructor for synthetic tests (`h_r = v_r`, `g_r = 1`).
    pub fn from_cascade(h_d: Complex64, v_r: Vec<Complex64>) -> Self {
        let ones = vec![Complex64::new(1.0, 0.0); v_r.len()];
        Self::new(h_d, v_r, ones)
    }

    pub fn num_elements(&self) -> usize {
        self.v_r.len()
    }

    /// Noise-free received amplitude per unit `√P_u·x_t`.
    pub fn response(&self, theta: &RisConfig) -> Complex64 {
        self.h_d
            + self
                .v_r
                .iter()
                .zip(theta.as_slice())
                .map(|(v, t)| v * t)
                .sum::<Complex64>()
    }
}

/// Unit-modulus reflection coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RisConfig(Vec<Complex64>);

impl RisConfig {
    pub fn new(theta: Vec<Complex64>) -> Result<Self> {
        for (index, t) in theta.iter().enumerate() {
            let modulus = t.norm();
            if !((modulus - 1.0).abs() <= UNIT_MODULUS_TOL) {
                return Err(Error::NotUnitModulus { index, modulus });
            }
        }
        Ok(Self(theta))
    }

    pub fn from_phases(phases: &[f64]) -> Self {
        Self(
            phases
                .iter()
                .map(|d| Complex64::from_polar(1.0, *d))
                .collect(),
        )
    }

    /// i.i.d. phases uniform on [0, 2π).
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let phases: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
        Self::from_phases(&phases)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![Complex64::new(1.0, 0.0); n])
    }

    /// Normalizes each `(re_n, im_n)` pair onto the unit circle; pairs with
    /// squared magnitude below 1e-24 become `1 + 0j`.
    pub fn from_logits(re: &[f64], im: &[f64]) -> Self {
        Self(
            re.iter()
                .zip(im)
                .map(|(&r, &i)| {
                    let m2 = r * r + i * i;
                    if m2 < risloc_autodiff::UNIT_MODULUS_FLOOR {
                        Complex64::new(1.0, 0.0)
                    } else {
                        let m = m2.sqrt();
                        Complex64::new(r / m, i / m)
                    }
                })
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.0.iter().map(|z| z.arg()).collect()
    }

    pub fn max_modulus_error(&self) -> f64 {
        self.0
            .iter()
            .map(|z| (z.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self) -> bool {
        self.max_modulus_error() <= UNIT_MODULUS_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotParams {
    /// Linear uplink power `P_u`.
    pub power: f64,
    pub pilot_symbol: Complex64,
    pub frames: usize,
}

impl PilotParams {
    pub fn new(snr_db: f64, frames: usize) -> Self {
        Self {
            power: snr_to_power(snr_db),
            pilot_symbol: Complex64::new(1.0, 0.0),
            frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0) {
            return Err(Error::Config("pilot power must be > 0".into()));
        }
        if (self.pilot_symbol.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("pilot symbol must have unit modulus".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        Ok(())
    }
}

fn rician_weights(scene: &Scene) -> (f64, f64) {
    let eps = scene.rician_factor;
    if eps.is_infinite() {
        return (1.0, 0.0);
    }
    ((eps / (1.0 + eps)).sqrt(), (1.0 / (1.0 + eps)).sqrt())
}

/// Pathloss amplitudes `(ρ, κ, ξ)` for BS–UE, RIS–UE and BS–RIS.
pub fn pathlosses(scene: &Scene, ue: Vec3) -> Result<(f64, f64, f64)> {
    let d_bu = distance(scene.bs_position, ue);
    let d_ru = distance(scene.ris_position, ue);
    let d_br = distance(scene.bs_position, scene.ris_position);
    if !(d_bu > 0.0) || !(d_ru > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "UE at {ue:?} coincides with the BS or the RIS"
        )));
    }
    Ok((
        pathloss_amplitude(d_bu, scene.pathloss_direct)?,
        pathloss_amplitude(d_ru, scene.pathloss_reflected)?,
        pathloss_amplitude(d_br, scene.pathloss_reflected)?,
    ))
}

/// LOS array responses `(a(φ,ψ), a(η,ϑ)*)` towards the UE and the BS.
fn los_responses(scene: &Scene, ue: Vec3) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let to_ue = angles_from_positions(ue, scene.ris_position)?;
    let to_bs = angles_from_positions(scene.bs_position, scene.ris_position)?;
    let a_ue = steering_vector(to_ue, scene);
    let a_bs = steering_vector(to_bs, scene)
        .into_iter()
        .map(|z| z.conj())
        .collect();
    Ok((a_ue, a_bs))
}

/// One Rician block-fading realization for a UE at `ue`.
pub fn sample_channel(scene: &Scene, ue: Vec3, rng: &mut impl Rng) -> Result<ChannelRealization> {
    let (rho, kappa, xi) = pathlosses(scene, ue)?;
    let (a_ue, a_bs) = los_responses(scene, ue)?;
    let (w_los, w_nlos) = rician_weights(scene);
    let n = scene.num_elements();
    let h_r: Vec<Complex64> = a_ue
        .iter()
        .map(|a| kappa * (w_los * a + w_nlos * complex_normal(rng)))
        .collect();
    let g_r: Vec<Complex64> = a_bs
        .iter()
        .map(|a| xi * (w_los * a + w_nlos * complex_normal(rng)))
        .collect();
    let h_d = rho * (w_los * Complex64::new(1.0, 0.0) + w_nlos * complex_normal(rng));
    debug_assert_eq!(h_r.len(), n);
    Ok(ChannelRealization::new(h_d, h_r, g_r))
}

/// Pure line-of-sight channel with deterministic pathloss (the ε → ∞ limit).
pub fn los_channel(scene: &Scene, ue: Vec3) -> Result<ChannelRealization> {
    let (rho, kappa, xi) = pathlosses(scene, ue)?;
    let (a_ue, a_bs) = los_responses(scene, ue)?;
    let h_r = a_ue.iter().map(|a| kappa * a).collect();
    let g_r = a_bs.iter().map(|a| xi * a).collect();
    Ok(ChannelRealization::new(Complex64::new(rho, 0.0), h_r, g_r))
}

/// LOS channel and its derivatives with respect to the UE position.
#[derive(Debug, Clone)]
pub struct LosJacobian {
    pub h_d: Complex64,
    pub v_r: Vec<Complex64>,
    /// `∂h_d/∂p`.
    pub dh_d: [Complex64; 3],
    /// `∂v_r[n]/∂p`.
    pub dv_r: Vec<[Complex64; 3]>,
}

impl LosJacobian {
    pub fn new(scene: &Scene, ue: Vec3) -> Result<Self> {
        let los = los_channel(scene, ue)?;
        let (rho, kappa, _) = pathlosses(scene, ue)?;
        let j = Complex64::new(0.0, 1.0);

        // h_d = ρ(d_bu); dρ/dd = −(b/20)·ρ/d.
        let rel_bu = crate::scene::sub3(ue, scene.bs_position);
        let d_bu = crate::scene::norm3(rel_bu);
        let drho = -(scene.pathloss_direct.b / 20.0) * rho / d_bu;
        let mut dh_d = [Complex64::new(0.0, 0.0); 3];
        for k in 0..3 {
            dh_d[k] = Complex64::new(drho * rel_bu[k] / d_bu, 0.0);
        }

        // v_r[n] = κ(d)·ξ·a_n(u, w)·b_n with u = Δy/d, w = Δz/d.
        let rel = crate::scene::sub3(ue, scene.ris_position);
        let d = crate::scene::norm3(rel);
        let dkappa = -(scene.pathloss_reflected.b / 20.0) * kappa / d;
        let mut du = [0.0; 3];
        let mut dw = [0.0; 3];
        for k in 0..3 {
            let e_y = if k == 1 { 1.0 } else { 0.0 };
            let e_z = if k == 2 { 1.0 } else { 0.0 };
            du[k] = e_y / d - rel[1] * rel[k] / (d * d * d);
            dw[k] = e_z / d - rel[2] * rel[k] / (d * d * d);
        }
        let dv_r = los
            .v_r
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (v1, v2) = element_offsets(i + 1, scene.ris_cols);
                let mut out = [Complex64::new(0.0, 0.0); 3];
                for k in 0..3 {
                    let phase_rate = scene.spacing_factor * (v1 * du[k] + v2 * dw[k]);
                    out[k] = v * (dkappa * rel[k] / d / kappa) + v * j * phase_rate;
                }
                out
            })
            .collect();
        Ok(Self {
            h_d: los.h_d,
            v_r: los.v_r,
            dh_d,
            dv_r,
        })
    }

    /// Mean response `h_d + v_rᵀθ`.
    pub fn mean(&self, theta: &RisConfig) -> Complex64 {
        self.h_d
            + self
                .v_r
                .iter()
                .zip(theta.as_slice())
                .map(|(v, t)| v * t)
                .sum::<Complex64>()
    }

    /// `∂(h_d + v_rᵀθ)/∂p`.
    pub fn mean_gradient(&self, theta: &RisConfig) -> [Complex64; 3] {
        let mut g = self.dh_d;
        for (dv, t) in self.dv_r.iter().zip(theta.as_slice()) {
            for k in 0..3 {
                g[k] += dv[k] * t;
            }
        }
        g
    }
}

/// Noisy pilot `√P_u (h_d + v_rᵀθ) x + n` with `n = √σ² · unit_noise`.
pub fn measure_with_noise(
    channel: &ChannelRealization,
    theta: &RisConfig,
    pilot: &PilotParams,
    noise_power: f64,
    unit_noise: Complex64,
) -> Result<Complex64> {
    if theta.len() != channel.num_elements() {
        return Err(Error::Dimension(format!(
            "theta has {} elements, channel has {}",
            theta.len(),
            channel.num_elements()
        )));
    }
    Ok(
        pilot.power.sqrt() * channel.response(theta) * pilot.pilot_symbol
            + noise_power.sqrt() * unit_noise,
    )
}

pub fn measure(
    channel: &ChannelRealization,
    theta: &RisConfig,
    pilot: &PilotParams,
    noise_power: f64,
    rng: &mut impl Rng,
) -> Result<Complex64> {
    let z = complex_normal(rng);
    measure_with_noise(channel, theta, pilot, noise_power, z)
}
