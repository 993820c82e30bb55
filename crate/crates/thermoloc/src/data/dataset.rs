//! On-disk dataset layout and loading.
//!
//! Layout: `root/<scene>/<sequence>/poses.txt` plus `images/`. Each pose line
//! is `timestamp tx ty tz qw qx qy qz` (real part first) and references the
//! 8-bit grayscale PNG `images/<timestamp_ns>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preproc::ThermalFrame;
use crate::quat::{Pose, UnitQuaternion};

/// Quaternions in pose files may drift from unit norm by at most this much.
const QUAT_NORM_TOL: f64 = 1e-3;

/// One pose-annotated frame; the image itself is loaded on demand.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    /// Seconds.
    pub timestamp: f64,
    pub image_ref: PathBuf,
    pub pose: Pose,
}

impl TrajectoryRecord {
    pub fn load_frame(&self) -> Result<ThermalFrame> {
        if !self.image_ref.is_file() {
            return Err(Error::MissingAsset(self.image_ref.clone()));
        }
        ThermalFrame::load_png(&self.image_ref)
    }
}

/// One recorded trajectory within a scene.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene: String,
    pub name: String,
    pub records: Vec<TrajectoryRecord>,
}

impl Sequence {
    pub fn id(&self) -> String {
        format!("{}/{}", self.scene, self.name)
    }
}

/// Train/test partition; each sequence belongs wholly to one side.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

/// Image filename stem for a timestamp in seconds.
pub fn timestamp_ns(timestamp: f64) -> u64 {
    (timestamp * 1e9).round() as u64
}

fn parse_pose_line(line: &str, path: &Path, line_no: usize) -> Result<(f64, Pose)> {
    let err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: line_no,
        msg,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(err(format!("expected 8 fields, found {}", fields.len())));
    }
    let mut nums = [0.0f64; 8];
    for (i, f) in fields.iter().enumerate() {
        nums[i] = f
            .parse::<f64>()
            .map_err(|e| err(format!("field {}: {e}", i + 1)))?;
        if !nums[i].is_finite() {
            return Err(err(format!("field {} is not finite", i + 1)));
        }
    }
    let q = [nums[4], nums[5], nums[6], nums[7]];
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::DataIntegrity(format!(
            "{}:{line_no}: quaternion norm {norm} deviates from 1 by more than {QUAT_NORM_TOL}",
            path.display()
        )));
    }
    let orientation = UnitQuaternion::canonicalize(q)?;
    let pose = Pose::new([nums[1], nums[2], nums[3]], orientation)?;
    Ok((nums[0], pose))
}

/// Loads one sequence directory containing `poses.txt` and `images/`.
pub fn load_sequence(scene: &str, name: &str, dir: &Path) -> Result<Sequence> {
    let poses_path = dir.join("poses.txt");
    if !poses_path.is_file() {
        return Err(Error::MissingAsset(poses_path));
    }
    let text = fs::read_to_string(&poses_path)?;
    let mut records = Vec::new();
    let mut prev_t: Option<f64> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (timestamp, pose) = parse_pose_line(line, &poses_path, line_no)?;
        if let Some(prev) = prev_t {
            if timestamp <= prev {
                return Err(Error::DataIntegrity(format!(
                    "{}:{line_no}: timestamp {timestamp} not after {prev}",
                    poses_path.display()
                )));
            }
        }
        prev_t = Some(timestamp);
        let image_ref = dir.join("images").join(format!("{}.png", timestamp_ns(timestamp)));
        if !image_ref.is_file() {
            return Err(Error::MissingAsset(image_ref));
        }
        records.push(TrajectoryRecord {
            timestamp,
            image_ref,
            pose,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptySequence(format!("{scene}/{name}")));
    }
    Ok(Sequence {
        scene: scene.to_string(),
        name: name.to_string(),
        records,
    })
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every `scene/sequence` directory under `root`, in sorted order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    if !root.is_dir() {
        return Err(Error::MissingAsset(root.to_path_buf()));
    }
    let mut sequences = Vec::new();
    for (scene, scene_dir) in sorted_subdirs(root)? {
        for (name, seq_dir) in sorted_subdirs(&scene_dir)? {
            sequences.push(load_sequence(&scene, &name, &seq_dir)?);
        }
    }
    if sequences.is_empty() {
        return Err(Error::EmptySequence(format!(
            "no scene/sequence directories under {}",
            root.display()
        )));
    }
    Ok(sequences)
}

/// Writes a sequence directory: frames under `images/` and a `poses.txt`
/// whose float fields round-trip exactly (shortest-representation printing).
pub fn write_sequence(dir: &Path, frames: &[(f64, Pose, ThermalFrame)]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut lines = String::new();
    for (timestamp, pose, frame) in frames {
        let q = pose.orientation.as_wxyz();
        let l = pose.position;
        lines.push_str(&format!(
            "{timestamp} {} {} {} {} {} {} {}\n",
            l[0], l[1], l[2], q[0], q[1], q[2], q[3]
        ));
        frame.save_png(images.join(format!("{}.png", timestamp_ns(*timestamp))))?;
    }
    fs::write(dir.join("poses.txt"), lines)?;
    Ok(())
}

/// Default split: within each scene, every sequence but the last (sorted by
/// name) trains; the last one tests. Single-sequence scenes train only.
pub fn default_split(mut sequences: Vec<Sequence>) -> DatasetSplit {
    sequences.sort_by_key(|a| a.id());
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut i = 0;
    while i < sequences.len() {
        let scene = sequences[i].scene.clone();
        let mut j = i;
        while j < sequences.len() && sequences[j].scene == scene {
            j += 1;
        }
        let count = j - i;
        for (k, seq) in sequences[i..j].iter().enumerate() {
            if count >= 2 && k == count - 1 {
                test.push(seq.clone());
            } else {
                train.push(seq.clone());
            }
        }
        i = j;
    }
    DatasetSplit { train, test }
}
