//! On-disk dataset format.
//!
//! A dataset root holds `dataset.json` (format version, seed, resolved
//! config echo, scenario list with split assignment) and one directory
//! per scenario containing `manifest.json` (the full [`Scenario`],
//! from which frames can be re-rendered) plus per-frame binary records.
//!
//! Frame record layout, all integers and floats little-endian:
//!
//! ```text
//! magic      b"CPFR"
//! version    u32          (currently 1)
//! time       f64
//! ego_index  u32
//! n_agents   u32
//! per agent:
//!   count       u32
//!   points      f64 x 3 x count      (x, y, z)
//!   provenance  u8 x count
//!   pose        f64 x 12             (rotation row-major, then translation)
//! n_boxes    u32
//! per box:
//!   box        f64 x 7              (cx, cy, cz, l, w, h, yaw)
//!   class      u8                   (0 car, 1 truck)
//!   observed   u8                   (1 when any agent saw it)
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3D, Mat3, PointCloud, Pose, Vec3};

use super::{Frame, GtBox, ObjectClass, Scenario};

pub const FRAME_MAGIC: &[u8; 4] = b"CPFR";
pub const FRAME_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: bad magic; not a frame record")]
    BadMagic { path: PathBuf },
    #[error("{path}: format version {found} unsupported (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated or malformed record")]
    Malformed { path: PathBuf },
    #[error("dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub dir: String,
    pub split: Split,
    pub n_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_echo: serde_json::Value,
    pub scenarios: Vec<ScenarioEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub format_version: u32,
    pub scenario: Scenario,
    pub n_frames: usize,
}

fn write_pose(buf: &mut Vec<u8>, pose: &Pose) {
    for row in &pose.rotation.0 {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in [pose.translation.x, pose.translation.y, pose.translation.z] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize one frame to the binary record format.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    buf.extend_from_slice(&frame.time.to_le_bytes());
    buf.extend_from_slice(&(frame.ego_index as u32).to_le_bytes());
    buf.extend_from_slice(&(frame.clouds.len() as u32).to_le_bytes());
    for (cloud, pose) in frame.clouds.iter().zip(&frame.poses) {
        buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
        for p in cloud.points() {
            for v in [p.x, p.y, p.z] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &a in cloud.provenance() {
            buf.push(a as u8);
        }
        write_pose(&mut buf, pose);
    }
    buf.extend_from_slice(&(frame.gt_boxes.len() as u32).to_le_bytes());
    for gt in &frame.gt_boxes {
        let b = &gt.bbox;
        for v in [b.center.x, b.center.y, b.center.z, b.length, b.width, b.height, b.yaw] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(match gt.class {
            ObjectClass::Car => 0,
            ObjectClass::Truck => 1,
        });
        buf.push(gt.observed as u8);
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Malformed { path: self.path.to_path_buf() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parse a binary frame record.
pub fn decode_frame(bytes: &[u8], path: &Path) -> Result<Frame, DataError> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != FRAME_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf() });
    }
    let version = c.u32()?;
    if version != FRAME_VERSION {
        return Err(DataError::Version { path: path.to_path_buf(), found: version, expected: FRAME_VERSION });
    }
    let time = c.f64()?;
    let ego_index = c.u32()? as usize;
    let n_agents = c.u32()? as usize;
    let mut clouds = Vec::with_capacity(n_agents);
    let mut poses = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let count = c.u32()? as usize;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let (x, y, z) = (c.f64()?, c.f64()?, c.f64()?);
            points.push(Vec3::new(x, y, z));
        }
        let mut provenance = Vec::with_capacity(count);
        for _ in 0..count {
            provenance.push(c.u8()? as u32);
        }
        let mut rot = [[0.0; 3]; 3];
        for row in &mut rot {
            for v in row.iter_mut() {
                *v = c.f64()?;
            }
        }
        let t = Vec3::new(c.f64()?, c.f64()?, c.f64()?);
        clouds.push(PointCloud::from_parts(points, provenance));
        poses.push(Pose::new(Mat3(rot), t));
    }
    let n_boxes = c.u32()? as usize;
    let mut gt_boxes = Vec::with_capacity(n_boxes);
    for id in 0..n_boxes {
        let vals: Vec<f64> = (0..7).map(|_| c.f64()).collect::<Result<_, _>>()?;
        let class = match c.u8()? {
            0 => ObjectClass::Car,
            1 => ObjectClass::Truck,
            _ => return Err(DataError::Malformed { path: path.to_path_buf() }),
        };
        let observed = c.u8()? != 0;
        gt_boxes.push(GtBox {
            object_id: id as u32,
            class,
            bbox: Box3D::new(Vec3::new(vals[0], vals[1], vals[2]), vals[3], vals[4], vals[5], vals[6]),
            observed,
        });
    }
    Ok(Frame { time, ego_index, clouds, poses, gt_boxes })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.bin")
}

pub fn scenario_dir_name(index: usize) -> String {
    format!("scenario_{index:03}")
}

/// Counts reported by the dataset writer.
#[derive(Debug, Clone, Copy, Default)]
pub struct WriteStats {
    pub frames: usize,
    pub points: usize,
}

/// Render and write every frame of a scenario (ego is agent 0), plus
/// its manifest.
pub fn write_scenario(dir: &Path, scenario: &Scenario) -> Result<WriteStats, crate::Error> {
    std::fs::create_dir_all(dir).map_err(DataError::Io)?;
    let n_frames = scenario.n_frames();
    let manifest = ScenarioManifest { format_version: DATASET_VERSION, scenario: scenario.clone(), n_frames };
    let json = serde_json::to_vec_pretty(&manifest).map_err(DataError::Json)?;
    std::fs::write(dir.join("manifest.json"), json).map_err(DataError::Io)?;
    use rayon::prelude::*;
    let encoded: Vec<Result<(Vec<u8>, usize), crate::Error>> = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let frame = super::render_frame(scenario, scenario.frame_time(i), 0)?;
            let points = frame.clouds.iter().map(|c| c.len()).sum();
            Ok((encode_frame(&frame), points))
        })
        .collect();
    let mut stats = WriteStats { frames: n_frames, points: 0 };
    for (i, result) in encoded.into_iter().enumerate() {
        let (bytes, points) = result?;
        stats.points += points;
        let mut file = std::fs::File::create(dir.join(frame_file_name(i))).map_err(DataError::Io)?;
        file.write_all(&bytes).map_err(DataError::Io)?;
    }
    Ok(stats)
}

/// Split sizes for `n` scenarios at fractions (train, val, test).
pub fn split_counts(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((n as f64 * fractions.0).round() as usize).clamp(1.min(n), n);
    let val = ((n as f64 * fractions.1).round() as usize).min(n - train);
    let test = n - train - val;
    (train, val, test)
}

/// A dataset on disk, opened for reading.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset, DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(root.join("dataset.json"))?.read_to_end(&mut bytes)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != DATASET_VERSION {
            return Err(DataError::Version {
                path: root.join("dataset.json"),
                found: manifest.format_version,
                expected: DATASET_VERSION,
            });
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ScenarioEntry> {
        self.manifest.scenarios.iter().filter(move |e| e.split == split)
    }

    pub fn load_scenario(&self, entry: &ScenarioEntry) -> Result<Scenario, DataError> {
        let path = self.root.join(&entry.dir).join("manifest.json");
        let mut bytes = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let manifest: ScenarioManifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != DATASET_VERSION {
            return Err(DataError::Version {
                path,
                found: manifest.format_version,
                expected: DATASET_VERSION,
            });
        }
        Ok(manifest.scenario)
    }

    pub fn load_frame(&self, entry: &ScenarioEntry, index: usize) -> Result<Frame, DataError> {
        let path = self.root.join(&entry.dir).join(frame_file_name(index));
        let bytes = std::fs::read(&path)?;
        decode_frame(&bytes, &path)
    }

    /// Every frame of a split, scenario-major order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Frame>, DataError> {
        let mut frames = Vec::new();
        for entry in self.entries(split) {
            for i in 0..entry.n_frames {
                frames.push(self.load_frame(entry, i)?);
            }
        }
        Ok(frames)
    }

    /// Scenarios of a split (for re-rendering with injectors).
    pub fn load_split_scenarios(&self, split: Split) -> Result<Vec<Scenario>, DataError> {
        self.entries(split).map(|e| self.load_scenario(e)).collect()
    }
}
