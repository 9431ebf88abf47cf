use ndarray::{s, Array2, IxDyn};
use rand::Rng;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::syndata::{
    corrupt_poses, generate_split, load_split, DatasetManifest, GenConfig, Sample, SkeletonTopology, Split,
};

/// Both splits held in memory.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub gen: GenConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Identifies the dataset and any pose corruption applied to it.
    pub data_hash: String,
    /// Raw (unnormalized) skeleton adjacency.
    pub adjacency: Array2<f64>,
    /// Input standardization, measured on the training clips.
    pub clip_norm: ClipNorm,
}

/// Per-channel affine standardization of clip pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ClipNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel means and standard deviations over every pixel of `samples`.
    pub fn fit(samples: &[Sample]) -> Self {
        let ch = samples[0].clip.dims().0;
        let mut sum = vec![0.0; ch];
        let mut sq = vec![0.0; ch];
        let mut n = 0usize;
        for s in samples {
            for (k, plane) in s.clip.frames.outer_iter().enumerate() {
                for &v in plane.iter() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            n += s.clip.frames.len() / ch;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Self { mean, std }
    }
}

impl TrainingData {
    pub fn from_samples(gen: GenConfig, train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        for s in train.iter().chain(&test) {
            if s.label >= gen.class_count {
                return Err(Error::Data(format!("{}: label {} out of range", s.id, s.label)));
            }
            let (ch, t, h, w) = s.clip.dims();
            if (ch, t, h, w) != (gen.channels, gen.frames, gen.height, gen.width)
                || s.pose.joints() != gen.joints
                || s.pose.frames() != gen.pose_frames
            {
                return Err(Error::ShapeMismatch(format!(
                    "{}: sample geometry does not match the dataset configuration",
                    s.id
                )));
            }
        }
        Ok(Self {
            data_hash: gen.hash(),
            adjacency: SkeletonTopology::body13().adjacency().clone(),
            clip_norm: ClipNorm::fit(&train),
            gen,
            train,
            test,
        })
    }

    /// Generates both splits without touching the disk.
    pub fn generate(gen: &GenConfig) -> Result<Self> {
        gen.validate()?;
        Self::from_samples(
            gen.clone(),
            generate_split(gen, Split::Train),
            generate_split(gen, Split::Test),
        )
    }

    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let mut data = Self::from_samples(
            m.config.clone(),
            load_split(m, Split::Train)?,
            load_split(m, Split::Test)?,
        )?;
        data.data_hash = m.config_hash.clone();
        Ok(data)
    }

    /// Applies the same corruption level to the poses of both splits.
    /// Clips are left untouched.
    pub fn with_pose_corruption(&self, level: f64, seed: u64) -> Result<Self> {
        if level == 0.0 {
            return Ok(self.clone());
        }
        let corrupt = |samples: &[Sample], split: Split| -> Result<Vec<Sample>> {
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let sample_seed: u64 = stream(seed, &format!("corrupt-{}", split.as_str()), i as u64).random();
                    Ok(Sample {
                        pose: corrupt_poses(&s.pose, level, sample_seed)?,
                        ..s.clone()
                    })
                })
                .collect()
        };
        Ok(Self {
            gen: self.gen.clone(),
            train: corrupt(&self.train, Split::Train)?,
            test: corrupt(&self.test, Split::Test)?,
            data_hash: format!("{}-pq{level}-{seed}", self.data_hash),
            adjacency: self.adjacency.clone(),
            clip_norm: self.clip_norm.clone(),
        })
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.split(split).iter().map(|s| s.label).collect()
    }
}

/// Stacks standardized clips into `[B, ch, T, H, W]`, shifting clip `k`
/// right by `shifts[k]` pixels (left when negative). Vacated columns are
/// zero after standardization.
pub fn clip_batch(samples: &[&Sample], shifts: &[isize], norm: &ClipNorm) -> Tensor {
    assert_eq!(samples.len(), shifts.len());
    let (ch, t, h, w) = samples[0].clip.dims();
    let mut out = Tensor::zeros(IxDyn(&[samples.len(), ch, t, h, w]));
    for (k, (s, &dx)) in samples.iter().zip(shifts).enumerate() {
        let src = &s.clip.frames;
        let shift = dx.unsigned_abs().min(w);
        let (dst_cols, src_cols) = if dx >= 0 {
            (shift..w, 0..w - shift)
        } else {
            (0..w - shift, shift..w)
        };
        for c in 0..ch {
            let (m, sd) = (norm.mean[c], norm.std[c]);
            let mut dst = out.slice_mut(s![k, c, .., .., dst_cols.clone()]);
            let view = src.slice(s![c, .., .., src_cols.clone()]);
            dst.zip_mut_with(&view, |d, &v| *d = (v as f64 - m) / sd);
        }
    }
    out
}

/// Stacks poses into `[B, 3, J, T_p]`.
pub fn pose_batch(samples: &[&Sample]) -> Tensor {
    let (a, j, t) = samples[0].pose.coords.dim();
    let mut out = Tensor::zeros(IxDyn(&[samples.len(), a, j, t]));
    for (k, s) in samples.iter().enumerate() {
        out.slice_mut(s![k, .., .., ..])
            .zip_mut_with(&s.pose.coords, |d, &v| *d = v as f64);
    }
    out
}
