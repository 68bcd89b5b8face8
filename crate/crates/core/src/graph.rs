//! Tape builders shared by the learned estimators: the pilot model on a
//! batch of episodes, feature standardization and the output map.

use ndarray::Array2;
use risloc_autodiff::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::channel::PilotParams;
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureScaler};
use crate::scene::{Region, Vec3};

/// Episode data of a batch as tape constants.
pub struct BatchConsts {
    pub batch: usize,
    pub v_re: Var,
    pub v_im: Var,
    pub hd_re: Var,
    pub hd_im: Var,
    /// Per-frame `(re, im)` noise, already scaled by `√σ²`.
    pub noise: Vec<(Var, Var)>,
    pub target: Var,
}

impl BatchConsts {
    pub fn new(
        tape: &mut Tape,
        episodes: &[Episode],
        frames: usize,
        noise_power: f64,
    ) -> Result<Self> {
        let b = episodes.len();
        let n = episodes
            .first()
            .map(|e| e.channel.num_elements())
            .ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let mut v_re = Array2::zeros((b, n));
        let mut v_im = Array2::zeros((b, n));
        let mut hd_re = Array2::zeros((b, 1));
        let mut hd_im = Array2::zeros((b, 1));
        let mut target = Array2::zeros((b, 3));
        let mut noise_re = vec![Array2::zeros((b, 1)); frames];
        let mut noise_im = vec![Array2::zeros((b, 1)); frames];
        let sigma = noise_power.sqrt();
        for (i, ep) in episodes.iter().enumerate() {
            if ep.channel.num_elements() != n {
                return Err(Error::Dimension("mixed RIS sizes in one batch".into()));
            }
            if ep.noise.len() < frames {
                return Err(Error::Dimension(format!(
                    "episode has {} noise draws, need {frames}",
                    ep.noise.len()
                )));
            }
            for k in 0..n {
                v_re[[i, k]] = ep.channel.v_r[k].re;
                v_im[[i, k]] = ep.channel.v_r[k].im;
            }
            hd_re[[i, 0]] = ep.channel.h_d.re;
            hd_im[[i, 0]] = ep.channel.h_d.im;
            for k in 0..3 {
                target[[i, k]] = ep.ue[k];
            }
            for t in 0..frames {
                noise_re[t][[i, 0]] = sigma * ep.noise[t].re;
                noise_im[t][[i, 0]] = sigma * ep.noise[t].im;
            }
        }
        let noise = noise_re
            .into_iter()
            .zip(noise_im)
            .map(|(r, i)| (tape.constant(r), tape.constant(i)))
            .collect();
        Ok(Self {
            batch: b,
            v_re: tape.constant(v_re),
            v_im: tape.constant(v_im),
            hd_re: tape.constant(hd_re),
            hd_im: tape.constant(hd_im),
            noise,
            target: tape.constant(target),
        })
    }
}

/// Received pilot of `frame` for RIS coefficients `theta` laid out as
/// `[re_1..re_N | im_1..im_N]` per row.
pub fn measure_on_tape(
    tape: &mut Tape,
    consts: &BatchConsts,
    theta: Var,
    pilot: &PilotParams,
    frame: usize,
) -> Result<(Var, Var)> {
    let n = consts.v_re.cols();
    let t_re = tape.slice_cols(theta, 0, n)?;
    let t_im = tape.slice_cols(theta, n, 2 * n)?;
    let (c_re, c_im) = tape.complex_mul((consts.v_re, consts.v_im), (t_re, t_im))?;
    let s_re = tape.sum_cols(c_re);
    let s_im = tape.sum_cols(c_im);
    let r_re = tape.add(s_re, consts.hd_re)?;
    let r_im = tape.add(s_im, consts.hd_im)?;
    let amp = pilot.power.sqrt();
    let (x_re, x_im) = (pilot.pilot_symbol.re, pilot.pilot_symbol.im);
    // √P · r · x
    let a = tape.scale(r_re, amp * x_re);
    let b = tape.scale(r_im, amp * x_im);
    let c = tape.scale(r_re, amp * x_im);
    let d = tape.scale(r_im, amp * x_re);
    let y_re = tape.sub(a, b)?;
    let y_im = tape.add(c, d)?;
    let (n_re, n_im) = consts.noise[frame];
    Ok((tape.add(y_re, n_re)?, tape.add(y_im, n_im)?))
}

/// Standardized feature rows for a batch of pilots.
pub fn features_on_tape(tape: &mut Tape, y: (Var, Var), scaler: &FeatureScaler) -> Result<Var> {
    let raw = match scaler.mode {
        FeatureMode::Rss => {
            let a = tape.square(y.0);
            let b = tape.square(y.1);
            tape.add(a, b)?
        }
        FeatureMode::Pilot => tape.concat_cols(&[y.0, y.1])?,
    };
    let neg_mean = tape.constant(Array2::from_shape_fn((1, scaler.mean.len()), |(_, k)| {
        -scaler.mean[k]
    }));
    let inv_std = tape.constant(Array2::from_shape_fn((1, scaler.std.len()), |(_, k)| {
        1.0 / scaler.std[k]
    }));
    let centered = tape.add_row(raw, neg_mean)?;
    Ok(tape.mul_row(centered, inv_std)?)
}

/// Fixed affine map from network output to meters: `offset + scale ∘ x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputMap {
    pub offset: Vec3,
    pub scale: Vec3,
}

impl OutputMap {
    pub fn identity() -> Self {
        Self {
            offset: [0.0; 3],
            scale: [1.0; 3],
        }
    }

    /// Maps the unit box onto `region`; flat axes keep unit scale.
    pub fn for_region(region: &Region) -> Self {
        let mut scale = [1.0; 3];
        for (s, h) in scale.iter_mut().zip(region.half_extent) {
            if h >= 1.0 {
                *s = h;
            }
        }
        Self {
            offset: region.center,
            scale,
        }
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let scale =
            tape.constant(Array2::from_shape_vec((1, 3), self.scale.to_vec()).expect("1x3"));
        let offset =
            tape.constant(Array2::from_shape_vec((1, 3), self.offset.to_vec()).expect("1x3"));
        let scaled = tape.mul_row(x, scale)?;
        Ok(tape.add_row(scaled, offset)?)
    }
}

/// Mean over rows of `‖est − target‖²`.
pub fn mean_squared_distance(tape: &mut Tape, est: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(est, target)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / est.rows() as f64))
}

/// Converts a `b × 3` matrix of estimates to positions.
pub fn rows_to_positions(m: &Array2<f64>) -> Vec<Vec3> {
    m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}
