use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::PoseSequence;
use crate::error::{Error, Result};
use crate::rng::stream;

/// Fraction of joint tracks zeroed at `level = 1`.
pub const MAX_OCCLUSION_FRACTION: f64 = 0.5;
/// Coordinate jitter standard deviation at `level = 1`.
pub const MAX_JITTER_STD: f64 = 0.05;

/// Degrades a pose sequence the way a weak pose estimator would: each joint
/// track is zeroed with probability `0.5 · level` (a partial occlusion) and
/// the surviving coordinates get Gaussian jitter of std `0.05 · level`.
///
/// The occlusion draw for each joint is a single uniform compared against the
/// threshold, so for a fixed seed the occluded set grows monotonically with
/// `level`.
pub fn corrupt_poses(p: &PoseSequence, level: f64, seed: u64) -> Result<PoseSequence> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::OutOfRange(format!("corruption level {level} not in [0, 1]")));
    }
    if level == 0.0 {
        return Ok(p.clone());
    }
    let mut rng = stream(seed, "corrupt-poses", 0);
    let mut coords = p.coords.clone();
    let (_, joints, frames) = coords.dim();
    let occlusion = MAX_OCCLUSION_FRACTION * level;
    let jitter = Normal::new(0.0, MAX_JITTER_STD * level).unwrap();
    for j in 0..joints {
        let occluded = rng.random::<f64>() < occlusion;
        for t in 0..frames {
            for axis in 0..3 {
                let v = &mut coords[[axis, j, t]];
                // Draw unconditionally so every joint consumes the same stream.
                let noise = jitter.sample(&mut rng);
                *v = if occluded {
                    0.0
                } else {
                    ((*v as f64) + noise).clamp(-1.0, 1.0) as f32
                };
            }
        }
    }
    Ok(PoseSequence { coords })
}
