//! Scene geometry, RIS array layout and steering vectors.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}

/// Axis-aligned box given as center ± half-extent (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub center: Vec3,
    pub half_extent: Vec3,
}

impl Region {
    pub fn contains(&self, p: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.half_extent[i] + tol)
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        let mut out = p;
        for i in 0..3 {
            let lo = self.center[i] - self.half_extent[i];
            let hi = self.center[i] + self.half_extent[i];
            out[i] = p[i].clamp(lo, hi);
        }
        out
    }

    /// Uniform draw inside the box.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec3 {
        let mut p = self.center;
        for i in 0..3 {
            let u: f64 = rng.random_range(-1.0..=1.0);
            p[i] += u * self.half_extent[i];
        }
        p
    }
}

/// Log-distance pathloss `a + b·log10(d)` in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PathlossModel {
    pub a: f64,
    pub b: f64,
}

impl From<[f64; 2]> for PathlossModel {
    fn from(v: [f64; 2]) -> Self {
        Self { a: v[0], b: v[1] }
    }
}

impl From<PathlossModel> for [f64; 2] {
    fn from(m: PathlossModel) -> Self {
        [m.a, m.b]
    }
}

/// Fixed deployment: BS, RIS, UE sampling region and propagation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub bs_position: Vec3,
    pub ris_position: Vec3,
    pub ue_region: Region,
    pub ris_rows: usize,
    pub ris_cols: usize,
    /// `2π d_R / λ_c`.
    pub spacing_factor: f64,
    pub rician_factor: f64,
    pub pathloss_direct: PathlossModel,
    pub pathloss_reflected: PathlossModel,
    /// Linear noise power σ².
    pub noise_power: f64,
}

/// Default receiver noise power (linear, relative to unit transmit power).
pub const DEFAULT_NOISE_POWER: f64 = 1e-10;

impl Scene {
    /// The 8×8 deployment with BS at (40, −40, −10) and users in
    /// (20±15, 0±35, −20).
    pub fn reference() -> Self {
        Self {
            bs_position: [40.0, -40.0, -10.0],
            ris_position: [0.0, 0.0, 0.0],
            ue_region: Region {
                center: [20.0, 0.0, -20.0],
                half_extent: [15.0, 35.0, 0.0],
            },
            ris_rows: 8,
            ris_cols: 8,
            spacing_factor: 1.0,
            rician_factor: 10.0,
            pathloss_direct: PathlossModel { a: 32.6, b: 36.7 },
            pathloss_reflected: PathlossModel { a: 30.0, b: 22.0 },
            noise_power: DEFAULT_NOISE_POWER,
        }
    }

    /// Same geometry with a `rows × cols` RIS.
    pub fn with_ris(mut self, rows: usize, cols: usize) -> Self {
        self.ris_rows = rows;
        self.ris_cols = cols;
        self
    }

    pub fn num_elements(&self) -> usize {
        self.ris_rows * self.ris_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.ris_rows == 0 || self.ris_cols == 0 {
            return Err(Error::Config(
                "RIS must have at least one row and column".into(),
            ));
        }
        if self
            .ue_region
            .half_extent
            .iter()
            .any(|h| *h < 0.0 || !h.is_finite())
        {
            return Err(Error::Config("ue_region half extents must be >= 0".into()));
        }
        if !(self.rician_factor >= 0.0) {
            return Err(Error::Config("rician_factor must be >= 0".into()));
        }
        if !(self.noise_power > 0.0) {
            return Err(Error::Config("noise_power must be > 0".into()));
        }
        if !self.spacing_factor.is_finite() {
            return Err(Error::Config("spacing_factor must be finite".into()));
        }
        Ok(())
    }

    /// Short stable hash of the serialized scene.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("scene serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let scene: Scene = crate::config::parse_toml(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Direction cosines `(sin φ cos ψ, sin ψ)` of a source seen from the RIS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnglePair {
    pub sin_az_cos_el: f64,
    pub sin_el: f64,
}

pub fn angles_from_positions(source: Vec3, ris_position: Vec3) -> Result<AnglePair> {
    let d = distance(source, ris_position);
    if !(d > 0.0) {
        return Err(Error::DegenerateGeometry(format!(
            "source {source:?} coincides with RIS"
        )));
    }
    Ok(AnglePair {
        sin_az_cos_el: (source[1] - ris_position[1]) / d,
        sin_el: (source[2] - ris_position[2]) / d,
    })
}

/// Column and row index `(v1, v2)` of the 1-based element `n`.
pub fn element_offsets(n: usize, cols: usize) -> (f64, f64) {
    (((n - 1) % cols) as f64, ((n - 1) / cols) as f64)
}

/// Planar-array response; element `n` has phase
/// `spacing · (v1·sin φ cos ψ + v2·sin ψ)`.
pub fn steering_vector(angles: AnglePair, scene: &Scene) -> Vec<Complex64> {
    (1..=scene.num_elements())
        .map(|n| {
            let (v1, v2) = element_offsets(n, scene.ris_cols);
            let phase = scene.spacing_factor * (v1 * angles.sin_az_cos_el + v2 * angles.sin_el);
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

/// 1 m × 1 m block grid over the x–y extent of a region at fixed height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Center of block (0, 0).
    pub origin: Vec3,
    pub pitch: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Blocks of side `pitch` tiling the region's x–y footprint at its
    /// center height.
    pub fn over_region(region: &Region, pitch: f64) -> Result<Self> {
        let nx = ((2.0 * region.half_extent[0]) / pitch).round() as usize;
        let ny = ((2.0 * region.half_extent[1]) / pitch).round() as usize;
        if nx == 0 || ny == 0 {
            return Err(Error::Config("region has no area for a block grid".into()));
        }
        Ok(Self {
            origin: [
                region.center[0] - region.half_extent[0] + pitch / 2.0,
                region.center[1] - region.half_extent[1] + pitch / 2.0,
                region.center[2],
            ],
            pitch,
            nx,
            ny,
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Center of block `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> Vec3 {
        [
            self.origin[0] + ix as f64 * self.pitch,
            self.origin[1] + iy as f64 * self.pitch,
            self.origin[2],
        ]
    }

    /// Row-major (x outer, y inner) list of block centers.
    pub fn centers(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.len());
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                out.push(self.center(ix, iy));
            }
        }
        out
    }

    /// Block containing `p` (clamped to the grid).
    pub fn cell_of(&self, p: Vec3) -> (usize, usize) {
        let fx = ((p[0] - self.origin[0]) / self.pitch).round();
        let fy = ((p[1] - self.origin[1]) / self.pitch).round();
        (
            fx.clamp(0.0, (self.nx - 1) as f64) as usize,
            fy.clamp(0.0, (self.ny - 1) as f64) as usize,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn angles_examples() {
        let a = angles_from_positions([20.0, 0.0, -20.0], [0.0; 3]).unwrap();
        assert_eq!(a.sin_az_cos_el, 0.0);
        assert!((a.sin_el + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let b = angles_from_positions([0.0, 0.0, -5.0], [0.0; 3]).unwrap();
        assert_eq!((b.sin_az_cos_el, b.sin_el), (0.0, -1.0));
        let c = angles_from_positions([0.0, 7.0, 0.0], [0.0; 3]).unwrap();
        assert_eq!((c.sin_az_cos_el, c.sin_el), (1.0, 0.0));
        assert!(matches!(
            angles_from_positions([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn zero_angles_give_all_ones() {
        let scene = Scene::reference();
        let a = steering_vector(
            AnglePair {
                sin_az_cos_el: 0.0,
                sin_el: 0.0,
            },
            &scene,
        );
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn two_by_two_enumeration() {
        let scene = Scene::reference().with_ris(2, 2);
        let a = steering_vector(
            AnglePair {
                sin_az_cos_el: FRAC_PI_2,
                sin_el: 0.0,
            },
            &scene,
        );
        let j = Complex64::new(0.0, 1.0);
        let one = Complex64::new(1.0, 0.0);
        for (got, want) in a.iter().zip([one, j, one, j]) {
            assert!((got - want).norm() < 1e-15);
        }
    }

    #[test]
    fn reference_grid_has_2100_blocks() {
        let g = GridSpec::over_region(&Scene::reference().ue_region, 1.0).unwrap();
        assert_eq!(g.len(), 2100);
        assert_eq!(g.center(0, 0), [5.5, -34.5, -20.0]);
        assert_eq!(g.cell_of([5.4, -34.9, -20.0]), (0, 0));
        assert_eq!(g.cell_of([34.9, 34.9, -20.0]), (29, 69));
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut s = Scene::reference();
        s.noise_power = 0.0;
        assert!(s.validate().is_err());
        let mut s = Scene::reference();
        s.rician_factor = -1.0;
        assert!(s.validate().is_err());
        let mut s = Scene::reference();
        s.ue_region.half_extent[0] = -1.0;
        assert!(s.validate().is_err());
    }
}
