use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{GenConfig, PoseSequence, Sample, Split, VideoClip};
use crate::rng::stream;

/// Angle degrees of freedom driving the body.
const DOF: usize = 9;
const LEAN: usize = 0;
const L_SHOULDER: usize = 1;
const L_ELBOW: usize = 2;
const R_SHOULDER: usize = 3;
const R_ELBOW: usize = 4;
const L_HIP: usize = 5;
const R_HIP: usize = 6;
const L_REACH: usize = 7;
const R_REACH: usize = 8;

const BACKGROUND: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
struct Oscillator {
    base: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

type Prototype = [Oscillator; DOF];

/// Class pairs that share a pose prototype and differ only by a patch.
pub fn appearance_pairs(cfg: &GenConfig) -> Vec<(usize, usize)> {
    let available = cfg.class_count / 2;
    let n = (cfg.appearance_pair_fraction * available as f64).round() as usize;
    (0..n.min(available)).map(|i| (2 * i, 2 * i + 1)).collect()
}

fn class_prototype(cfg: &GenConfig, class: usize) -> Prototype {
    let pairs = appearance_pairs(cfg);
    let source = pairs
        .iter()
        .find(|&&(_, b)| b == class)
        .map(|&(a, _)| a)
        .unwrap_or(class);
    let mut rng = stream(cfg.seed, "class-prototype", source as u64);
    let active: Vec<usize> = {
        let mut picks = Vec::new();
        while picks.len() < 2 {
            let d = rng.random_range(1..DOF);
            if !picks.contains(&d) {
                picks.push(d);
            }
        }
        picks
    };
    std::array::from_fn(|d| {
        let (lo, hi) = match d {
            LEAN => (-0.15, 0.15),
            L_SHOULDER | R_SHOULDER => (0.1, 0.9),
            L_ELBOW | R_ELBOW => (0.0, 0.7),
            L_HIP | R_HIP => (0.0, 0.3),
            _ => (0.0, 0.5),
        };
        let amp = if active.contains(&d) {
            rng.random_range(0.6..1.2)
        } else {
            rng.random_range(0.0..0.15)
        };
        Oscillator {
            base: rng.random_range(lo..hi),
            amp,
            freq: rng.random_range(0.5..1.5),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    })
}

/// Forward kinematics for one frame. Returns `[x, y, z]` per joint, image
/// convention (`y` grows downward).
fn body_joints(angles: &[f64; DOF]) -> [[f64; 3]; 13] {
    let lean = angles[LEAN];
    let pelvis = [0.0, 0.2, 0.0];
    let up = [lean.sin(), -lean.cos()];
    let across = [lean.cos(), lean.sin()];
    let neck = [pelvis[0] + 0.45 * up[0], pelvis[1] + 0.45 * up[1], 0.0];
    let head = [neck[0] + 0.2 * up[0], neck[1] + 0.2 * up[1], 0.0];
    let l_sh = [neck[0] - 0.15 * across[0], neck[1] - 0.15 * across[1], 0.0];
    let r_sh = [neck[0] + 0.15 * across[0], neck[1] + 0.15 * across[1], 0.0];
    // Limb direction: angle 0 hangs straight down, positive swings outward;
    // `reach` tilts the limb toward the camera, foreshortening it.
    let limb = |from: [f64; 3], len: f64, angle: f64, reach: f64, side: f64| {
        let planar = len * reach.cos();
        [
            from[0] + side * planar * angle.sin(),
            from[1] + planar * angle.cos(),
            from[2] + len * reach.sin(),
        ]
    };
    let l_el = limb(l_sh, 0.25, angles[L_SHOULDER], angles[L_REACH], -1.0);
    let l_wr = limb(l_el, 0.22, angles[L_SHOULDER] + angles[L_ELBOW], angles[L_REACH], -1.0);
    let r_el = limb(r_sh, 0.25, angles[R_SHOULDER], angles[R_REACH], 1.0);
    let r_wr = limb(r_el, 0.22, angles[R_SHOULDER] + angles[R_ELBOW], angles[R_REACH], 1.0);
    let l_hip = [pelvis[0] - 0.1, pelvis[1], 0.0];
    let r_hip = [pelvis[0] + 0.1, pelvis[1], 0.0];
    let l_knee = limb(l_hip, 0.35, angles[L_HIP], 0.0, -1.0);
    let r_knee = limb(r_hip, 0.35, angles[R_HIP], 0.0, 1.0);
    [
        head, neck, l_sh, l_el, l_wr, r_sh, r_el, r_wr, pelvis, l_hip, l_knee, r_hip, r_knee,
    ]
}

/// Orthographic projection of normalized `(x, y)` onto a `height × width` grid.
pub fn project_to_pixels(x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
    (
        (y + 1.0) * 0.5 * (height as f64 - 1.0),
        (x + 1.0) * 0.5 * (width as f64 - 1.0),
    )
}

/// Draws one sample of `class`. `index` selects the perturbation stream.
pub fn generate_sample(cfg: &GenConfig, split: Split, class: usize, index: usize) -> Sample {
    let proto = class_prototype(cfg, class);
    let stream_index = ((class as u64) << 32) | index as u64;
    let mut rng = stream(cfg.seed, &format!("sample-{}", split.as_str()), stream_index);

    let amp_scale: [f64; DOF] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
    let base_shift = Normal::new(0.0, 0.05).unwrap();
    let base_offset: [f64; DOF] = std::array::from_fn(|_| base_shift.sample(&mut rng));
    let phase_shift = rng.random_range(-0.4..0.4);
    let speed = rng.random_range(0.9..1.1);
    let scale = rng.random_range(0.9..1.1);
    let shift = [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)];
    let jitter = Normal::new(0.0, 0.01).unwrap();

    let tp = cfg.pose_frames;
    let mut coords = Array3::<f32>::zeros((3, cfg.joints, tp));
    for k in 0..tp {
        let s = if tp > 1 { k as f64 / (tp - 1) as f64 } else { 0.0 };
        let angles: [f64; DOF] = std::array::from_fn(|d| {
            let o = proto[d];
            o.base
                + base_offset[d]
                + o.amp * amp_scale[d] * (2.0 * PI * o.freq * speed * s + o.phase + phase_shift).sin()
        });
        for (j, p) in body_joints(&angles).iter().enumerate() {
            let xyz = [
                p[0] * scale + shift[0],
                p[1] * scale + shift[1],
                p[2] * scale,
            ];
            for (axis, v) in xyz.iter().enumerate() {
                let v = (v + jitter.sample(&mut rng)).clamp(-1.0, 1.0);
                coords[[axis, j, k]] = v as f32;
            }
        }
    }
    let pose = PoseSequence { coords };
    let clip = render_clip(cfg, &pose, class, &mut rng);
    Sample {
        id: format!("{}-{:02}-{:04}", split.as_str(), class, index),
        label: class,
        clip,
        pose,
    }
}

/// Renders a clip from a pose: max-combined Gaussian blobs scaled by
/// `pose_signal_strength` over a flat background, the appearance patch for
/// paired classes, then i.i.d. pixel noise, clamped to `[0, 1]`.
pub fn render_clip(cfg: &GenConfig, pose: &PoseSequence, class: usize, rng: &mut impl Rng) -> VideoClip {
    let (ch, t, h, w) = (cfg.channels, cfg.frames, cfg.height, cfg.width);
    let tp = pose.frames();
    let two_sigma_sq = 2.0 * cfg.blob_sigma * cfg.blob_sigma;
    let mut frames = Array4::<f32>::zeros((ch, t, h, w));
    let patch = patch_color(cfg, class);
    let patch_size = (h / 8).max(2);
    let noise = Normal::new(0.0, cfg.pixel_noise_std.max(0.0)).unwrap();
    for tau in 0..t {
        let pos = if t > 1 {
            tau as f64 * (tp - 1) as f64 / (t - 1) as f64
        } else {
            0.0
        };
        let k0 = pos.floor() as usize;
        let k1 = (k0 + 1).min(tp - 1);
        let frac = pos - k0 as f64;
        let joints: Vec<(f64, f64)> = (0..pose.joints())
            .map(|j| {
                let lerp = |axis: usize| {
                    let a = pose.coords[[axis, j, k0]] as f64;
                    let b = pose.coords[[axis, j, k1]] as f64;
                    a + (b - a) * frac
                };
                project_to_pixels(lerp(0), lerp(1), h, w)
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let blob = joints
                    .iter()
                    .map(|&(pr, pc)| {
                        let d2 = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
                        (-d2 / two_sigma_sq).exp()
                    })
                    .fold(0.0, f64::max);
                let in_patch = r >= 1 && r < 1 + patch_size && c >= 1 && c < 1 + patch_size;
                for k in 0..ch {
                    let base = match (&patch, in_patch) {
                        (Some(color), true) => color[k],
                        _ => BACKGROUND + cfg.pose_signal_strength * blob,
                    };
                    let v = if cfg.pixel_noise_std > 0.0 {
                        base + noise.sample(rng)
                    } else {
                        base
                    };
                    frames[[k, tau, r, c]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    VideoClip { frames }
}

fn patch_color(cfg: &GenConfig, class: usize) -> Option<Vec<f64>> {
    let member = appearance_pairs(cfg).iter().find_map(|&(a, b)| {
        if class == a {
            Some(0)
        } else if class == b {
            Some(1)
        } else {
            None
        }
    })?;
    let ch = cfg.channels;
    Some(if ch == 1 {
        vec![if member == 0 { 0.8 } else { 0.45 }]
    } else {
        let hot = if member == 0 { 0 } else { 1 };
        (0..ch).map(|k| if k == hot { 0.8 } else { 0.15 }).collect()
    })
}

/// All samples of one split, ordered by class then index.
pub fn generate_split(cfg: &GenConfig, split: Split) -> Vec<Sample> {
    let per_class = match split {
        Split::Train => cfg.samples_per_class,
        Split::Test => cfg.test_samples_per_class,
    };
    (0..cfg.class_count)
        .flat_map(|c| (0..per_class).map(move |i| (c, i)))
        .map(|(c, i)| generate_sample(cfg, split, c, i))
        .collect()
}
