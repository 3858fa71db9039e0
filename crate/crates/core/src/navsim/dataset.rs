//! On-disk trajectory datasets.
//!
//! A dataset directory holds one `traj_NNNN/` subdirectory per trajectory,
//! each containing `meta.json` (world spec, seed, poses, controls) and
//! `frames.bin` (the rendered observations as concatenated tensors in the
//! shared tensor encoding). Frames are stored rather than re-rendered so a
//! dataset is a self-contained, hashable artifact.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ndgrad::Tensor;

use super::render::Observation;
use super::trajectory::Trajectory;
use super::world::WorldSpec;
use super::{Control, Pose, SimError};

#[derive(Serialize, Deserialize)]
struct TrajMeta {
    seed: u64,
    world: WorldSpec,
    poses: Vec<[f32; 3]>,
    controls: Vec<[f32; 2]>,
}

fn traj_dir_name(i: usize) -> String {
    format!("traj_{i:04}")
}

/// Writes trajectories under `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, trajectories: &[Trajectory]) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    for (i, traj) in trajectories.iter().enumerate() {
        let tdir = dir.join(traj_dir_name(i));
        fs::create_dir_all(&tdir)?;
        let meta = TrajMeta {
            seed: traj.seed,
            world: traj.world.clone(),
            poses: traj.poses.iter().map(|p| [p.x, p.y, p.phi]).collect(),
            controls: traj.controls.iter().map(|c| [c.v, c.omega]).collect(),
        };
        let mut mf = BufWriter::new(File::create(tdir.join("meta.json"))?);
        serde_json::to_writer_pretty(&mut mf, &meta)?;
        mf.write_all(b"\n")?;
        mf.flush()?;
        let mut ff = BufWriter::new(File::create(tdir.join("frames.bin"))?);
        for obs in &traj.observations {
            obs.data.write_to(&mut ff)?;
        }
        ff.flush()?;
    }
    Ok(())
}

/// Loads every `traj_NNNN/` under `dir`, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Trajectory>, SimError> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("traj_"))
        .collect();
    if names.is_empty() {
        return Err(SimError::Dataset(format!("no traj_* directories under {}", dir.display())));
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let tdir = dir.join(&name);
        let meta: TrajMeta = serde_json::from_reader(BufReader::new(File::open(tdir.join("meta.json"))?))?;
        let poses: Vec<Pose> = meta.poses.iter().map(|p| Pose::new(p[0], p[1], p[2])).collect();
        let controls: Vec<Control> = meta.controls.iter().map(|c| Control::new(c[0], c[1])).collect();
        if poses.len() != controls.len() + 1 {
            return Err(SimError::Dataset(format!(
                "{name}: {} poses do not match {} controls",
                poses.len(),
                controls.len()
            )));
        }
        let mut frames = BufReader::new(File::open(tdir.join("frames.bin"))?);
        let mut observations = Vec::with_capacity(poses.len());
        for _ in 0..poses.len() {
            let t = Tensor::read_from(&mut frames)
                .map_err(|e| SimError::Dataset(format!("{name}: {e}")))?;
            observations.push(Observation::from_tensor(t)?);
        }
        let mut rest = Vec::new();
        frames.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(SimError::Dataset(format!("{name}: {} trailing bytes in frames.bin", rest.len())));
        }
        out.push(Trajectory { world: meta.world, seed: meta.seed, poses, controls, observations });
    }
    Ok(out)
}
