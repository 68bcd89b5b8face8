//! RSS radio maps induced by a sequence of RIS configurations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{los_channel, PilotParams, RisConfig};
use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::policy::{run_episodes, PolicyWeights};
use crate::scene::{GridSpec, Scene, Vec3};

/// Noise-free LOS RSS over a block grid, one `nx × ny` matrix per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioMap {
    pub grid: GridSpec,
    pub ue: Vec3,
    pub frames: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    grid: GridSpec,
    ue: Vec3,
    ue_cell: (usize, usize),
    frames: usize,
    files: Vec<String>,
}

pub const METADATA_FILE: &str = "radiomap.json";

fn frame_file(t: usize) -> String {
    format!("frame_{t}.csv")
}

/// `|√P_u (h_d + v_rᵀθ_t)|²` at every block center for each `θ_t`.
pub fn compute_radiomap(
    scene: &Scene,
    pilot: &PilotParams,
    thetas: &[RisConfig],
    ue: Vec3,
    grid: GridSpec,
) -> Result<RadioMap> {
    let mut frames = vec![vec![vec![0.0; grid.ny]; grid.nx]; thetas.len()];
    for ix in 0..grid.nx {
        for iy in 0..grid.ny {
            let los = los_channel(scene, grid.center(ix, iy))?;
            for (t, theta) in thetas.iter().enumerate() {
                frames[t][ix][iy] = pilot.power * los.response(theta).norm_sqr();
            }
        }
    }
    Ok(RadioMap { grid, ue, frames })
}

/// Replays `episode` through the policy and maps the configurations it chose.
pub fn export_radiomap(
    scene: &Scene,
    pilot: &PilotParams,
    weights: &PolicyWeights,
    episode: &Episode,
    grid: GridSpec,
) -> Result<RadioMap> {
    let trace = run_episodes(scene, std::slice::from_ref(episode), pilot, weights)?.remove(0);
    compute_radiomap(scene, pilot, &trace.thetas, episode.ue, grid)
}

impl RadioMap {
    /// RSS of the block containing the UE at frame `t` (0-based).
    pub fn ue_rss(&self, t: usize) -> f64 {
        let (ix, iy) = self.grid.cell_of(self.ue);
        self.frames[t][ix][iy]
    }

    /// Fraction of blocks whose RSS strictly exceeds the UE block's.
    pub fn outshine_fraction(&self, t: usize) -> f64 {
        let ue = self.ue_rss(t);
        let above = self.frames[t].iter().flatten().filter(|&&v| v > ue).count();
        above as f64 / self.grid.len() as f64
    }

    /// Writes `frame_1.csv .. frame_T.csv` and the metadata file.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.frames.len());
        for (t, m) in self.frames.iter().enumerate() {
            let name = frame_file(t + 1);
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(dir.join(&name))?;
            for row in m {
                w.write_record(row.iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
            files.push(name);
        }
        let meta = Metadata {
            grid: self.grid,
            ue: self.ue,
            ue_cell: self.grid.cell_of(self.ue),
            frames: self.frames.len(),
            files,
        };
        std::fs::write(
            dir.join(METADATA_FILE),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: Metadata =
            serde_json::from_str(&std::fs::read_to_string(dir.join(METADATA_FILE))?)?;
        let mut frames = Vec::with_capacity(meta.frames);
        for name in &meta.files {
            let mut r = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(dir.join(name))?;
            let mut m = Vec::with_capacity(meta.grid.nx);
            for rec in r.records() {
                let row = rec?
                    .iter()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|e| Error::Format(format!("{name}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != meta.grid.ny {
                    return Err(Error::Format(format!(
                        "{name}: row has {} values, expected {}",
                        row.len(),
                        meta.grid.ny
                    )));
                }
                m.push(row);
            }
            if m.len() != meta.grid.nx {
                return Err(Error::Format(format!(
                    "{name}: {} rows, expected {}",
                    m.len(),
                    meta.grid.nx
                )));
            }
            frames.push(m);
        }
        Ok(Self {
            grid: meta.grid,
            ue: meta.ue,
            frames,
        })
    }
}
