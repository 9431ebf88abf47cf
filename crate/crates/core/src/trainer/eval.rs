use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, POSE, STUDENT, VPN};
use super::config::Recipe;
use super::data::{clip_batch, pose_batch, ClipNorm, TrainingData};
use super::train::argmax_rows;
use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::syndata::{Sample, Split};
use crate::distill::student_saliency;
use crate::vpn::{pose_net_forward, student_forward, vpn_forward, ModelConfig};

const EVAL_BATCH: usize = 8;

/// Which network of a checkpoint produces the predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPath {
    /// RGB only.
    Student,
    /// Poses only.
    PoseTeacher,
    /// RGB and poses.
    VpnTeacher,
}

impl ModelPath {
    pub fn network(self) -> &'static str {
        match self {
            ModelPath::Student => STUDENT,
            ModelPath::PoseTeacher => POSE,
            ModelPath::VpnTeacher => VPN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelPath::Student => "student",
            ModelPath::PoseTeacher => "pose_teacher",
            ModelPath::VpnTeacher => "vpn_teacher",
        }
    }

    pub fn uses_poses(self) -> bool {
        self != ModelPath::Student
    }
}

/// Chooses the evaluated network. Without pose inputs only a student can
/// run; with pose inputs, checkpoints that carry a collaboratively trained
/// attention teacher evaluate that teacher.
pub fn select_path(ckpt: &Checkpoint, pose_inputs: bool) -> Result<ModelPath> {
    match (ckpt.recipe, pose_inputs) {
        (Recipe::PoseTeacher, true) => Ok(ModelPath::PoseTeacher),
        (Recipe::VpnTeacher | Recipe::VpnA | Recipe::VpnPp, true) => Ok(ModelPath::VpnTeacher),
        (Recipe::RgbStudent | Recipe::VpnF, true) => Err(Error::Incompatible(format!(
            "{} checkpoint has no pose-input path",
            ckpt.recipe
        ))),
        (r, false) if r.has_student() => Ok(ModelPath::Student),
        (r, false) => Err(Error::Incompatible(format!("{r} checkpoint needs pose inputs"))),
    }
}

/// Horizontal crop offsets used at inference.
pub fn crop_offsets(shift: usize) -> Vec<isize> {
    if shift == 0 {
        vec![0]
    } else {
        let s = shift as isize;
        vec![-s, 0, s]
    }
}

/// Class probabilities `[B, C]` for one batch, max-pooled over crops.
pub fn batch_scores(
    model: &ModelConfig,
    params: &ParamSet,
    path: ModelPath,
    samples: &[&Sample],
    adj: &Array2<f64>,
    norm: &ClipNorm,
    offsets: &[isize],
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let b = params.bind(&tape, false);
    let none = None::<&mut ChaCha8Rng>;
    if path == ModelPath::PoseTeacher {
        let poses = tape.constant(pose_batch(samples));
        let out = pose_net_forward(model, &b, poses, adj, none)?;
        return Ok(to2(&out.logits.softmax().value()));
    }
    let poses = (path == ModelPath::VpnTeacher).then(|| tape.constant(pose_batch(samples)));
    let mut best: Option<Array2<f64>> = None;
    for &dx in offsets {
        let clips = tape.constant(clip_batch(samples, &vec![dx; samples.len()], norm));
        let logits = match path {
            ModelPath::Student => student_forward(model, &b, clips, None::<&mut ChaCha8Rng>)?.logits,
            _ => vpn_forward(model, &b, clips, poses.unwrap(), adj, false, None::<&mut ChaCha8Rng>)?.logits,
        };
        let p = to2(&logits.softmax().value());
        best = Some(match best {
            None => p,
            Some(mut acc) => {
                acc.zip_mut_with(&p, |a, &v| *a = a.max(v));
                acc
            }
        });
    }
    Ok(best.expect("at least one crop"))
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality::<Ix2>().expect("rank-2 scores")
}

/// Max-pooled crop scores for every sample and the mean wall-clock seconds
/// per clip spent in the forward passes.
pub fn predict_scores(
    model: &ModelConfig,
    params: &ParamSet,
    path: ModelPath,
    samples: &[&Sample],
    adj: &Array2<f64>,
    norm: &ClipNorm,
    shift: usize,
) -> Result<(Array2<f64>, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let offsets = crop_offsets(shift);
    let mut parts = Vec::new();
    let mut elapsed = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let start = Instant::now();
        parts.push(batch_scores(model, params, path, chunk, adj, norm, &offsets)?);
        elapsed += start.elapsed().as_secs_f64();
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let scores = ndarray::concatenate(Axis(0), &views).unwrap();
    Ok((scores, elapsed / samples.len() as f64))
}

pub fn top1(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(&scores.clone().into_dyn());
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub mean_latency_s: f64,
}

impl Metrics {
    pub fn from_scores(scores: &Array2<f64>, labels: &[usize], classes: usize, mean_latency_s: f64) -> Result<Self> {
        if scores.nrows() != labels.len() || scores.ncols() != classes {
            return Err(Error::ShapeMismatch(format!(
                "scores {:?} for {} labels and {classes} classes",
                scores.dim(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (p, &l) in argmax_rows(&scores.clone().into_dyn()).iter().zip(labels) {
            confusion[l][*p] += 1;
        }
        let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let total: usize = confusion.iter().flatten().sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect();
        Ok(Self {
            top1: trace as f64 / total.max(1) as f64,
            per_class,
            confusion,
            mean_latency_s,
        })
    }

    /// Mean accuracy over the given classes.
    pub fn mean_class_accuracy(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.per_class[c]).sum::<f64>() / classes.len().max(1) as f64
    }

    /// `true_class,predicted_class,count` rows.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true_class,predicted_class,count\n");
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                out.push_str(&format!("{t},{p},{n}\n"));
            }
        }
        out
    }
}

fn check_geometry(ckpt: &Checkpoint, data: &TrainingData) -> Result<()> {
    let mut expected = ckpt.config.model.clone();
    expected.adapt_to(&data.gen);
    if expected != ckpt.config.model {
        return Err(Error::Incompatible(
            "dataset geometry or class count differs from the checkpoint".into(),
        ));
    }
    Ok(())
}

/// Test-split probabilities of a checkpoint along `path`, with the
/// checkpoint's pose corruption applied to the test poses.
pub fn checkpoint_scores(ckpt: &Checkpoint, data: &TrainingData, path: ModelPath) -> Result<(Array2<f64>, f64)> {
    check_geometry(ckpt, data)?;
    let data = data.with_pose_corruption(ckpt.config.pose_corruption, data.gen.seed)?;
    let params = &ckpt.network(path.network())?.params;
    let test: Vec<&Sample> = data.test.iter().collect();
    predict_scores(&ckpt.config.model, params, path, &test, &data.adjacency, &data.clip_norm, ckpt.config.shift)
}

pub fn evaluate(ckpt: &Checkpoint, data: &TrainingData, pose_inputs: bool) -> Result<Metrics> {
    evaluate_with_scores(ckpt, data, pose_inputs).map(|(m, _)| m)
}

pub fn evaluate_with_scores(ckpt: &Checkpoint, data: &TrainingData, pose_inputs: bool) -> Result<(Metrics, Array2<f64>)> {
    let path = select_path(ckpt, pose_inputs)?;
    let (scores, latency) = checkpoint_scores(ckpt, data, path)?;
    let m = Metrics::from_scores(&scores, &data.labels(Split::Test), data.gen.class_count, latency)?;
    Ok((m, scores))
}

/// Rescales each row to sum to one.
pub fn normalize_rows(p: &Array2<f64>) -> Array2<f64> {
    let mut out = p.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
    out
}

/// Elementwise mean of two score matrices.
pub fn late_fuse(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok((a + b) * 0.5)
}

/// Checkpoints whose inference paths are timed.
#[derive(Clone, Copy, Debug, Default)]
pub struct BenchModels<'a> {
    pub student: Option<&'a Checkpoint>,
    pub pose_teacher: Option<&'a Checkpoint>,
    /// Any checkpoint carrying a video-pose network.
    pub vpn_teacher: Option<&'a Checkpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub path: String,
    pub mean_latency_s: f64,
    pub std_latency_s: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub entries: Vec<TimingEntry>,
    /// Seconds spent building the cached inputs; never part of a latency.
    pub input_prep_s: f64,
    pub clips: usize,
    pub repeats: usize,
}

impl TimingReport {
    pub fn get(&self, path: &str) -> Option<&TimingEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,mean_latency_s,std_latency_s,accuracy\n");
        for e in &self.entries {
            out.push_str(&format!("{},{:.9},{:.9},{:.6}\n", e.path, e.mean_latency_s, e.std_latency_s, e.accuracy));
        }
        out
    }
}

/// Per-clip inputs prepared ahead of timing.
struct CachedClip<'s> {
    sample: [&'s Sample; 1],
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times single-clip inference for each available path.
///
/// Every path runs the same procedure as [`evaluate`] (including the crop
/// max-pooling) on one clip at a time. `warmup` untimed passes precede the
/// `repeats` timed passes over `clips` test clips. Accuracy is measured on
/// the full test split and is not timed.
pub fn bench_inference(
    models: BenchModels<'_>,
    data: &TrainingData,
    clips: usize,
    repeats: usize,
    warmup: usize,
) -> Result<TimingReport> {
    if repeats < 5 {
        return Err(Error::InvalidConfig(format!("bench needs at least 5 repeats, got {repeats}")));
    }
    let prep_start = Instant::now();
    let n = clips.min(data.test.len()).max(1);
    let cached: Vec<CachedClip<'_>> = data.test.iter().take(n).map(|s| CachedClip { sample: [s] }).collect();
    let input_prep_s = prep_start.elapsed().as_secs_f64();

    let labels = data.labels(Split::Test);
    let mut entries = Vec::new();
    let runs: Vec<(&str, &Checkpoint, ModelPath)> = [
        models.student.map(|c| ("student", c, ModelPath::Student)),
        models.pose_teacher.map(|c| ("pose_teacher", c, ModelPath::PoseTeacher)),
        models.vpn_teacher.map(|c| ("vpn_teacher", c, ModelPath::VpnTeacher)),
    ]
    .into_iter()
    .flatten()
    .collect();

    let mut per_path_times: Vec<Vec<f64>> = Vec::new();
    let mut per_path_scores: Vec<Array2<f64>> = Vec::new();
    for &(name, ckpt, path) in &runs {
        check_geometry(ckpt, data)?;
        let params = &ckpt.network(path.network())?.params;
        let model = &ckpt.config.model;
        let offsets = crop_offsets(ckpt.config.shift);
        let time_one = |c: &CachedClip<'_>| -> Result<f64> {
            let start = Instant::now();
            let s = batch_scores(model, params, path, &c.sample, &data.adjacency, &data.clip_norm, &offsets)?;
            std::hint::black_box(&s);
            Ok(start.elapsed().as_secs_f64())
        };
        for _ in 0..warmup {
            for c in &cached {
                time_one(c)?;
            }
        }
        // One sample per repeat: the mean per-clip latency of that pass.
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut total = 0.0;
            for c in &cached {
                total += time_one(c)?;
            }
            times.push(total / cached.len() as f64);
        }
        let (scores, _) = checkpoint_scores(ckpt, data, path)?;
        let (mean, std) = mean_std(&times);
        entries.push(TimingEntry {
            path: name.to_string(),
            mean_latency_s: mean,
            std_latency_s: std,
            accuracy: super::eval::top1(&scores, &labels),
        });
        per_path_times.push(times);
        per_path_scores.push(scores);
    }
    // Late fusion runs the student and the pose teacher back to back.
    let si = runs.iter().position(|r| r.2 == ModelPath::Student);
    let pi = runs.iter().position(|r| r.2 == ModelPath::PoseTeacher);
    if let (Some(si), Some(pi)) = (si, pi) {
        let times: Vec<f64> = per_path_times[si]
            .iter()
            .zip(&per_path_times[pi])
            .map(|(a, b)| a + b)
            .collect();
        let fused = late_fuse(&normalize_rows(&per_path_scores[si]), &normalize_rows(&per_path_scores[pi]))?;
        let (mean, std) = mean_std(&times);
        entries.push(TimingEntry {
            path: "late_fusion".to_string(),
            mean_latency_s: mean,
            std_latency_s: std,
            accuracy: top1(&fused, &labels),
        });
    }
    Ok(TimingReport {
        entries,
        input_prep_s,
        clips: n,
        repeats,
    })
}

/// Attention of one test clip, each map shaped `[t, m, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub sample_id: String,
    /// Pose-driven map of the video-pose network, if the checkpoint has one.
    pub teacher: Option<Array3<f64>>,
    /// Student self-attention saliency, if the checkpoint has a student.
    pub student: Option<Array3<f64>>,
}

/// Eval-mode attention maps for the first `count` test clips (unshifted).
pub fn attention_maps(ckpt: &Checkpoint, data: &TrainingData, count: usize) -> Result<Vec<AttentionMaps>> {
    check_geometry(ckpt, data)?;
    let data = data.with_pose_corruption(ckpt.config.pose_corruption, data.gen.seed)?;
    let model = &ckpt.config.model;
    let (_, t, m, n) = model.feature_dims()?;
    let samples: Vec<&Sample> = data.test.iter().take(count).collect();
    if samples.is_empty() {
        return Err(Error::Data("no test clips to visualize".into()));
    }
    let clips_t = clip_batch(&samples, &vec![0; samples.len()], &data.clip_norm);
    let to_maps = |v: &Tensor| -> Vec<Array3<f64>> {
        v.outer_iter()
            .map(|row| row.to_owned().into_shape_with_order((t, m, n)).expect("t·m·n positions"))
            .collect()
    };
    let none = || None::<&mut ChaCha8Rng>;
    let mut teacher = None;
    if let Ok(net) = ckpt.network(VPN) {
        let tape = Tape::new();
        let b = net.params.bind(&tape, false);
        let clips = tape.constant(clips_t.clone());
        let poses = tape.constant(pose_batch(&samples));
        let out = vpn_forward(model, &b, clips, poses, &data.adjacency, false, none())?;
        teacher = Some(to_maps(&out.attention.value()));
    }
    let mut student = None;
    if let Ok(net) = ckpt.network(STUDENT) {
        let tape = Tape::new();
        let b = net.params.bind(&tape, false);
        let out = student_forward(model, &b, tape.constant(clips_t), none())?;
        student = Some(to_maps(&student_saliency(out.attention).value()));
    }
    if teacher.is_none() && student.is_none() {
        return Err(Error::Incompatible(format!("{} checkpoint has no attention", ckpt.recipe)));
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| AttentionMaps {
            sample_id: s.id.clone(),
            teacher: teacher.as_ref().map(|v| v[i].clone()),
            student: student.as_ref().map(|v| v[i].clone()),
        })
        .collect())
}

/// Argmax of a probability vector.
pub fn predicted_class(p: &Array1<f64>) -> usize {
    argmax_rows(&p.clone().insert_axis(Axis(0)).into_dyn())[0]
}
