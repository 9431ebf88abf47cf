//! Paired synthetic video/skeleton classification data.
//!
//! Every class owns a joint-angle trajectory prototype. A sample perturbs
//! that prototype, runs forward kinematics to get 3D joint coordinates, and
//! renders a clip by splatting Gaussian blobs at the orthographic (x, y)
//! projection of each joint. Classes grouped into "appearance pairs" share a
//! prototype exactly and differ only by a static coloured patch, so a pose
//! model cannot separate them while a pixel model can.

mod corrupt;
mod generate;
mod io;
mod skeleton;

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use corrupt::{corrupt_poses, MAX_OCCLUSION_FRACTION, MAX_JITTER_STD};
pub use generate::{appearance_pairs, generate_sample, generate_split, render_clip, project_to_pixels};
pub use io::{load_sample, load_split, read_array, write_array, FORMAT_VERSION, MAGIC};
pub use skeleton::{row_normalize, SkeletonTopology, JOINT_NAMES};

/// 3D joint coordinates, shape `3 × J × t_p`, normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub coords: Array3<f32>,
}

impl PoseSequence {
    pub fn new(coords: Array3<f32>) -> Result<Self> {
        if coords.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "pose must be 3 × J × t, got {:?}",
                coords.shape()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose coordinates".into()));
        }
        Ok(Self { coords })
    }

    pub fn joints(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[2]
    }
}

/// RGB frames, shape `ch × T × H × W`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f32>,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clip pixels".into()));
        }
        if frames.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::OutOfRange("clip pixels must lie in [0, 1]".into()));
        }
        Ok(Self { frames })
    }

    /// `(ch, T, H, W)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Generator settings. Serialized as a flat TOML table with these field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub joints: usize,
    pub pose_frames: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pose_signal_strength: f64,
    pub appearance_pair_fraction: f64,
    pub pixel_noise_std: f64,
    pub blob_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            class_count: 8,
            samples_per_class: 40,
            test_samples_per_class: 20,
            joints: 13,
            pose_frames: 20,
            frames: 16,
            height: 32,
            width: 32,
            channels: 3,
            pose_signal_strength: 1.0,
            appearance_pair_fraction: 0.25,
            pixel_noise_std: 0.05,
            blob_sigma: 1.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("class_count", self.class_count),
            ("samples_per_class", self.samples_per_class),
            ("pose_frames", self.pose_frames),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.class_count < 2 {
            return Err(Error::InvalidConfig("class_count must be at least 2".into()));
        }
        if self.joints != JOINT_NAMES.len() {
            return Err(Error::InvalidConfig(format!(
                "joints must be {} (the body skeleton)",
                JOINT_NAMES.len()
            )));
        }
        for (name, v) in [
            ("pose_signal_strength", self.pose_signal_strength),
            ("appearance_pair_fraction", self.appearance_pair_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.pixel_noise_std >= 0.0 && self.pixel_noise_std.is_finite()) {
            return Err(Error::InvalidConfig("pixel_noise_std must be >= 0".into()));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return Err(Error::InvalidConfig("blob_sigma must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of SHA-256 over the TOML form.
    pub fn hash(&self) -> String {
        short_hash(self.to_toml().as_bytes())
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..16].to_string()
}

/// One row of `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub clip_path: String,
    pub pose_path: String,
    pub label: usize,
    pub split: Split,
}

/// An in-memory labelled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub clip: VideoClip,
    pub pose: PoseSequence,
}

/// Index of a generated dataset directory: `manifest.csv` plus `gen_config.toml`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<SampleEntry>,
    pub class_count: usize,
    pub config_hash: String,
    pub seed: u64,
    pub config: GenConfig,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GEN_CONFIG_FILE: &str = "gen_config.toml";

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Reads `manifest.csv` and `gen_config.toml` from `dir` and checks them.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(GEN_CONFIG_FILE);
        let cfg_text =
            std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        // A stored config that no longer parses is damaged data, not user config.
        let config = GenConfig::from_toml(&cfg_text).map_err(|e| Error::Data(format!("{}: {e}", cfg_path.display())))?;
        let csv_path = dir.join(MANIFEST_FILE);
        let mut reader = csv::Reader::from_path(&csv_path)
            .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        let header = reader
            .headers()
            .map_err(|e| Error::Data(e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != io::MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "{}: expected header {}",
                csv_path.display(),
                io::MANIFEST_HEADER.join(",")
            )));
        }
        let mut samples = Vec::new();
        for row in reader.deserialize() {
            samples.push(row.map_err(|e| Error::Data(e.to_string()))?);
        }
        let manifest = Self {
            root: dir.to_path_buf(),
            samples,
            class_count: config.class_count,
            config_hash: config.hash(),
            seed: config.seed,
            config,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self) -> Result<()> {
        let cfg_path = self.root.join(GEN_CONFIG_FILE);
        std::fs::write(&cfg_path, self.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let csv_path = self.root.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        for s in &self.samples {
            w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if s.label >= self.class_count {
                return Err(Error::Data(format!(
                    "sample {} has label {} outside [0, {})",
                    s.sample_id, s.label, self.class_count
                )));
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.sample_id)));
            }
            for p in [&s.clip_path, &s.pose_path] {
                if !self.resolve(p).is_file() {
                    return Err(Error::Data(format!("missing sample file {p}")));
                }
            }
        }
        Ok(())
    }
}

/// Generates both splits into `out_dir` and writes the manifest.
///
/// The train split holds `class_count × samples_per_class` samples and the
/// test split `class_count × test_samples_per_class`. Output is a pure
/// function of `cfg`.
pub fn gen_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = out_dir.join(split.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for sample in generate_split(cfg, split) {
            let clip_rel = format!("{}/{}.clip.vpsd", split.as_str(), sample.id);
            let pose_rel = format!("{}/{}.pose.vpsd", split.as_str(), sample.id);
            write_array(
                &out_dir.join(&clip_rel),
                sample.clip.frames.shape(),
                sample.clip.frames.iter().copied(),
            )?;
            write_array(
                &out_dir.join(&pose_rel),
                sample.pose.coords.shape(),
                sample.pose.coords.iter().copied(),
            )?;
            samples.push(SampleEntry {
                sample_id: sample.id,
                clip_path: clip_rel,
                pose_path: pose_rel,
                label: sample.label,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        samples,
        class_count: cfg.class_count,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    manifest.save()?;
    Ok(manifest)
}
