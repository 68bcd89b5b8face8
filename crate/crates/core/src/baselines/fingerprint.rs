//! RSS fingerprinting with a weighted k-nearest-neighbour matcher.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::channel::{complex_normal, measure_with_noise, sample_channel, PilotParams, RisConfig};
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::rng::{stream, Role};
use crate::scene::{GridSpec, Scene, Vec3};

const MAGIC: &[u8; 8] = b"RLFPDB\0\0";
const VERSION: u32 = 1;

/// Offline database: one averaged RSS vector per grid block.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDb {
    pub grid: GridSpec,
    pub frames: usize,
    pub seed: u64,
    pub realizations: usize,
    /// The fixed random configurations shared with online queries.
    pub thetas: Vec<RisConfig>,
    pub centers: Vec<Vec3>,
    pub rss: Vec<Vec<f64>>,
}

/// Measures every block center under `thetas`, averaging `|y_t|²` over
/// `realizations` independent channel and noise draws.
pub fn build_fingerprints(
    scene: &Scene,
    pilot: &PilotParams,
    thetas: &[RisConfig],
    realizations: usize,
    block_size: f64,
    seed: u64,
) -> Result<FingerprintDb> {
    if realizations == 0 {
        return Err(Error::Config("realizations_per_block must be >= 1".into()));
    }
    if thetas.is_empty() {
        return Err(Error::Config(
            "fingerprints need at least one RIS configuration".into(),
        ));
    }
    let grid = GridSpec::over_region(&scene.ue_region, block_size)?;
    let centers = grid.centers();
    let mut rss = Vec::with_capacity(centers.len());
    for (b, &center) in centers.iter().enumerate() {
        let mut acc = vec![0.0; thetas.len()];
        for r in 0..realizations {
            let mut rng = stream(seed, (b * realizations + r) as u64, Role::Fingerprint);
            let channel = sample_channel(scene, center, &mut rng)?;
            for (a, theta) in acc.iter_mut().zip(thetas) {
                let z = complex_normal(&mut rng);
                *a += measure_with_noise(&channel, theta, pilot, scene.noise_power, z)?.norm_sqr();
            }
        }
        rss.push(acc.into_iter().map(|a| a / realizations as f64).collect());
    }
    Ok(FingerprintDb {
        grid,
        frames: thetas.len(),
        seed,
        realizations,
        thetas: thetas.to_vec(),
        centers,
        rss,
    })
}

/// Inverse-distance weighted mean of the `k` nearest fingerprints.
/// Ties in distance are broken by block index.
pub fn wknn_localize(db: &FingerprintDb, query: &[f64], k: usize) -> Result<Vec3> {
    if query.len() != db.frames {
        return Err(Error::Dimension(format!(
            "query has {} entries, fingerprints have {}",
            query.len(),
            db.frames
        )));
    }
    if k == 0 || k > db.rss.len() {
        return Err(Error::Config(format!(
            "k = {k} outside 1..={}",
            db.rss.len()
        )));
    }
    let mut dist: Vec<(f64, usize)> = db
        .rss
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let d2: f64 = f.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2.sqrt(), i)
        })
        .collect();
    dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut nearest = dist[..k].to_vec();
    nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut num = [0.0; 3];
    let mut den = 0.0;
    for (d, i) in nearest {
        let w = 1.0 / (d + 1e-9);
        for (n, c) in num.iter_mut().zip(db.centers[i]) {
            *n += w * c;
        }
        den += w;
    }
    Ok(num.map(|n| n / den))
}

/// Online RSS vector of an episode under the database configurations.
pub fn online_rss(
    db: &FingerprintDb,
    scene: &Scene,
    pilot: &PilotParams,
    ep: &Episode,
) -> Result<Vec<f64>> {
    db.thetas
        .iter()
        .enumerate()
        .map(|(t, theta)| {
            Ok(
                measure_with_noise(&ep.channel, theta, pilot, scene.noise_power, ep.noise[t])?
                    .norm_sqr(),
            )
        })
        .collect()
}

fn put_f64(w: &mut impl Write, x: f64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_u64(w: &mut impl Write, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl FingerprintDb {
    pub fn len(&self) -> usize {
        self.rss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rss.is_empty()
    }

    /// Little-endian table: header (grid, T, seed, M, N, configurations)
    /// followed by one row per block (center, RSS vector).
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for x in self.grid.origin {
            put_f64(w, x)?;
        }
        put_f64(w, self.grid.pitch)?;
        put_u64(w, self.grid.nx as u64)?;
        put_u64(w, self.grid.ny as u64)?;
        put_u64(w, self.frames as u64)?;
        put_u64(w, self.seed)?;
        put_u64(w, self.realizations as u64)?;
        let n = self.thetas.first().map_or(0, RisConfig::len);
        put_u64(w, n as u64)?;
        for theta in &self.thetas {
            for z in theta.as_slice() {
                put_f64(w, z.re)?;
                put_f64(w, z.im)?;
            }
        }
        for (c, f) in self.centers.iter().zip(&self.rss) {
            for x in c {
                put_f64(w, *x)?;
            }
            for x in f {
                put_f64(w, *x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a fingerprint database".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        if u32::from_le_bytes(v) != VERSION {
            return Err(Error::Format(
                "unsupported fingerprint database version".into(),
            ));
        }
        let origin = [get_f64(r)?, get_f64(r)?, get_f64(r)?];
        let pitch = get_f64(r)?;
        let nx = get_u64(r)? as usize;
        let ny = get_u64(r)? as usize;
        let frames = get_u64(r)? as usize;
        let seed = get_u64(r)?;
        let realizations = get_u64(r)? as usize;
        let n = get_u64(r)? as usize;
        let mut thetas = Vec::with_capacity(frames);
        for _ in 0..frames {
            let mut z = Vec::with_capacity(n);
            for _ in 0..n {
                z.push(Complex64::new(get_f64(r)?, get_f64(r)?));
            }
            thetas.push(RisConfig::new(z)?);
        }
        let grid = GridSpec {
            origin,
            pitch,
            nx,
            ny,
        };
        let mut centers = Vec::with_capacity(grid.len());
        let mut rss = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            centers.push([get_f64(r)?, get_f64(r)?, get_f64(r)?]);
            rss.push(
                (0..frames)
                    .map(|_| get_f64(r))
                    .collect::<std::io::Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            grid,
            frames,
            seed,
            realizations,
            thetas,
            centers,
            rss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
