//! Desk-scale training experiments behind criteria 4 to 7. Runs are cached
//! so later criteria reuse the checkpoints of earlier ones.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use vpnpp::backbones::{PoseArch, VideoArch};
use vpnpp::syndata::{appearance_pairs, GenConfig};
use vpnpp::trainer::{
    bench_inference, evaluate, select_path, train, BenchModels, Checkpoint, ModelPath, Recipe, Schedule, TrainConfig,
    TrainingData,
};

use super::Outcome;

pub const SEEDS: [u64; 3] = [0, 1, 2];
const PIXEL_NOISE: f64 = 0.25;
const TEACHER_EPOCHS: usize = 30;
const STUDENT_EPOCHS: usize = 20;
const PAIR_CONSTANT: f64 = 1.0;
const GRAD_CLIP: f64 = 2.0;

pub fn gen(seed: u64) -> GenConfig {
    GenConfig {
        class_count: 8,
        samples_per_class: 40,
        test_samples_per_class: 20,
        frames: 8,
        height: 16,
        width: 16,
        pose_signal_strength: 0.3,
        appearance_pair_fraction: 0.25,
        pixel_noise_std: PIXEL_NOISE,
        seed,
        ..Default::default()
    }
}

pub fn config(recipe: Recipe, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::for_recipe(recipe);
    c.seed = seed;
    c.epochs = if recipe == Recipe::PoseTeacher { TEACHER_EPOCHS } else { STUDENT_EPOCHS };
    c.schedule = Schedule::Step { every: c.epochs * 2 / 3, factor: 0.1 };
    c.grad_clip = Some(GRAD_CLIP);
    c.pair_constant = Some(PAIR_CONSTANT);
    c.model.video = VideoArch {
        in_channels: 3,
        widths: vec![8, 16, 32, 32],
        pools: vec![[1, 2, 2], [2, 2, 2], [1, 1, 1], [1, 1, 1]],
    };
    c.model.pose = PoseArch { joints: 13, widths: vec![16, 32], temporal_pool: 2 };
    c.model.spaces.se_dim = 16;
    c.model.spaces.feat_dim = 32;
    c.model.spaces.att_dim = 64;
    c
}

/// One trained run and its test accuracy on the path the recipe reports.
pub struct Run {
    pub ckpt: Checkpoint,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Key {
    seed: u64,
    recipe: Recipe,
    alpha_milli: Option<u64>,
    corruption_milli: u64,
}

#[derive(Default)]
struct Lab {
    data: HashMap<u64, Arc<TrainingData>>,
    runs: HashMap<Key, Arc<Run>>,
}

fn lab() -> &'static Mutex<Lab> {
    static LAB: OnceLock<Mutex<Lab>> = OnceLock::new();
    LAB.get_or_init(Default::default)
}

pub fn data(seed: u64) -> Arc<TrainingData> {
    let mut lab = lab().lock().unwrap();
    lab.data
        .entry(seed)
        .or_insert_with(|| Arc::new(TrainingData::generate(&gen(seed)).unwrap()))
        .clone()
}

/// Trains (or reuses) `recipe` on seed `seed`, optionally overriding α and
/// the pose corruption level. Student recipes get the matching pose teacher.
pub fn run(recipe: Recipe, seed: u64, alpha: Option<f64>, corruption: f64) -> Arc<Run> {
    let key = Key {
        seed,
        recipe,
        alpha_milli: alpha.map(|a| (a * 1000.0) as u64),
        corruption_milli: (corruption * 1000.0) as u64,
    };
    if let Some(r) = lab().lock().unwrap().runs.get(&key) {
        return r.clone();
    }
    let teacher = recipe
        .needs_pose_teacher()
        .then(|| run(Recipe::PoseTeacher, seed, None, corruption));
    let data = data(seed);
    let mut cfg = config(recipe, seed);
    cfg.pose_corruption = corruption;
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    let (ckpt, _) = train(&cfg, &data, teacher.as_ref().map(|t| &t.ckpt)).unwrap();
    let pose_inputs = !recipe.has_student();
    let acc = evaluate(&ckpt, &data, pose_inputs).unwrap().top1;
    let r = Arc::new(Run { ckpt, acc });
    lab().lock().unwrap().runs.insert(key, r.clone());
    r
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn seed_mean(recipe: Recipe, alpha: Option<f64>, corruption: f64) -> (f64, Vec<f64>) {
    let accs: Vec<f64> = SEEDS.iter().map(|&s| run(recipe, s, alpha, corruption).acc).collect();
    (mean(&accs), accs)
}

/// Classes whose clips carry no appearance cue.
fn pose_dominant_classes() -> Vec<usize> {
    let g = gen(0);
    let paired: Vec<usize> = appearance_pairs(&g).iter().flat_map(|&(a, b)| [a, b]).collect();
    (0..g.class_count).filter(|c| !paired.contains(c)).collect()
}

pub fn criterion_4() -> Outcome {
    let start = Instant::now();
    let classes = pose_dominant_classes();
    let teacher_pd: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            let t = run(Recipe::PoseTeacher, s, None, 0.0);
            evaluate(&t.ckpt, &data(s), true).unwrap().mean_class_accuracy(&classes)
        })
        .collect();
    let (rgb, rgb_all) = seed_mean(Recipe::RgbStudent, None, 0.0);
    let (vpn_f, vpn_f_all) = seed_mean(Recipe::VpnF, None, 0.0);
    let (vpn_pp, vpn_pp_all) = seed_mean(Recipe::VpnPp, None, 0.0);
    let secs = start.elapsed().as_secs_f64();
    let precondition = mean(&teacher_pd) >= 0.85;
    let pass = precondition && vpn_f >= rgb + 0.08 && vpn_pp >= vpn_f && secs < 1800.0;
    let show = |v: &[f64]| v.iter().map(|&x| pct(x)).collect::<Vec<_>>().join("/");
    Outcome::new(
        pass,
        format!(
            "pose teacher on pose-dominant classes {}% (>= 85: {precondition}); rgb {}% [{}], vpn_f {}% [{}] (need >= rgb + 8), vpn_pp {}% [{}] (need >= vpn_f); {secs:.0}s < 1800s",
            pct(mean(&teacher_pd)),
            pct(rgb),
            show(&rgb_all),
            pct(vpn_f),
            show(&vpn_f_all),
            pct(vpn_pp),
            show(&vpn_pp_all),
        ),
    )
}

pub fn criterion_5() -> Outcome {
    let (a0, _) = seed_mean(Recipe::VpnF, Some(0.0), 0.0);
    let (a50, _) = seed_mean(Recipe::VpnF, None, 0.0);
    let (a1000, _) = seed_mean(Recipe::VpnF, Some(1000.0), 0.0);
    Outcome::new(
        a50 >= a0 + 0.03 && a1000 < a50,
        format!(
            "vpn_f alpha=0 {}%, alpha=50 {}% (need >= alpha=0 + 3), alpha=1000 {}% (need < alpha=50)",
            pct(a0),
            pct(a50),
            pct(a1000)
        ),
    )
}

pub fn criterion_6() -> Outcome {
    let (pose_clean, _) = seed_mean(Recipe::PoseTeacher, None, 0.0);
    let (pose_bad, _) = seed_mean(Recipe::PoseTeacher, None, 1.0);
    let (pp_clean, _) = seed_mean(Recipe::VpnPp, None, 0.0);
    let (pp_bad, _) = seed_mean(Recipe::VpnPp, None, 1.0);
    let (drop_pose, drop_pp) = (pose_clean - pose_bad, pp_clean - pp_bad);
    Outcome::new(
        drop_pose > drop_pp,
        format!(
            "pose teacher {}% -> {}% (drop {}), vpn_pp {}% -> {}% (drop {}); need pose drop > vpn_pp drop",
            pct(pose_clean),
            pct(pose_bad),
            pct(drop_pose),
            pct(pp_clean),
            pct(pp_bad),
            pct(drop_pp)
        ),
    )
}

pub fn criterion_7() -> Outcome {
    let seed = SEEDS[0];
    let d = data(seed);
    let student = run(Recipe::VpnPp, seed, None, 0.0);
    let teacher = run(Recipe::PoseTeacher, seed, None, 0.0);
    let path = select_path(&student.ckpt, false).unwrap();
    let pose_free = evaluate(&student.ckpt, &d, false).unwrap().top1;
    let report = bench_inference(
        BenchModels {
            student: Some(&student.ckpt),
            pose_teacher: Some(&teacher.ckpt),
            vpn_teacher: Some(&student.ckpt),
        },
        &d,
        32,
        5,
        1,
    )
    .unwrap();
    let s = report.get("student").unwrap();
    let v = report.get("vpn_teacher").unwrap();
    let fused = report.get("late_fusion").unwrap();
    let pass = path == ModelPath::Student && s.mean_latency_s < v.mean_latency_s && fused.accuracy >= s.accuracy;
    Outcome::new(
        pass,
        format!(
            "student evaluates pose-free ({}%); latency student {:.2}ms vs vpn teacher {:.2}ms (need <); late fusion {}% vs vpn_pp {}% (need >=)",
            pct(pose_free),
            1e3 * s.mean_latency_s,
            1e3 * v.mean_latency_s,
            pct(fused.accuracy),
            pct(s.accuracy)
        ),
    )
}
