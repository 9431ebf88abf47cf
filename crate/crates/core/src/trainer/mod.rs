//! Training recipes, checkpoints, evaluation and timing.

mod checkpoint;
mod config;
mod data;
mod eval;
mod report;
mod train;

pub use checkpoint::{Checkpoint, Network, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, POSE, STUDENT, VPN};
pub use config::{Recipe, Schedule, TrainConfig};
pub use data::{clip_batch, pose_batch, ClipNorm, TrainingData};
pub use eval::{
    attention_maps, batch_scores, bench_inference, checkpoint_scores, crop_offsets, evaluate, evaluate_with_scores, late_fuse,
    normalize_rows, predict_scores, predicted_class, select_path, top1, AttentionMaps, BenchModels, Metrics, ModelPath,
    TimingEntry, TimingReport,
};
pub use report::{EpochRecord, TrainReport, REPORT_HEADER};
pub use train::{primary_path, train, train_from_manifest};
