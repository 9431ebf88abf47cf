//! Type invariants as proptest runs. Each function panics with the
//! minimized counterexample on failure.

use std::fmt::Debug;
use std::sync::OnceLock;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseResult, TestRunner};

use vpnpp::backbones::PoseFeature;
use vpnpp::distill::{attention_distill_loss, project_student_attention, project_teacher_attention};
use vpnpp::syndata::{gen_dataset, generate_split, load_split, DatasetManifest, GenConfig, Sample, Split};
use vpnpp::trainer::{train, Checkpoint, EpochRecord, Recipe, POSE};
use vpnpp::vpn::{spatial_embedding_loss, stc_forward, Projection, StcVars};
use vpnpp::{Tape, Tensor};

use super::{constant, randn, rng, tiny_cfg, tiny_data, uniform};

fn run<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> TestCaseResult)
where
    S: Strategy,
    S::Value: Debug,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    if let Err(e) = runner.run(&strategy, test) {
        panic!("{e}");
    }
}

type StcCase = (usize, usize, usize, usize, usize, f64, u64);

fn stc_case() -> impl Strategy<Value = StcCase> {
    (1usize..4, 1usize..6, 1usize..4, 1usize..4, 1usize..4, 0.1f64..20.0, any::<u64>())
}

/// Returns `(z1, z2, A)` values for a random coupler.
fn coupled((bs, dp, t, m, n, scale, seed): StcCase) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let tape = Tape::new();
    let pooled = constant(&tape, &(randn(&[bs, dp], &mut r) * scale));
    let h_star = constant(&tape, &Tensor::zeros(ndarray::IxDyn(&[bs, dp, 1])));
    let vars = StcVars {
        spatial_w: constant(&tape, &randn(&[m * n, dp], &mut r)),
        spatial_b: constant(&tape, &randn(&[m * n], &mut r)),
        temporal_w: constant(&tape, &randn(&[t, dp], &mut r)),
        temporal_b: constant(&tape, &randn(&[t], &mut r)),
    };
    let (f, a) = stc_forward(&PoseFeature { h_star, pooled }, (t, m, n), &vars).unwrap();
    (
        f.z1.value().as_ref().clone(),
        f.z2.value().as_ref().clone(),
        a.value().as_ref().clone(),
    )
}

/// Spatial factors are distributions over positions, temporal factors lie
/// in `[0, 1]`, and the coupled map is their outer product.
pub fn attention_factors(cases: u32) {
    run(cases, stc_case(), |case| {
        let (bs, _, t, m, n, _, _) = case;
        let (z1, z2, a) = coupled(case);
        prop_assert_eq!(a.shape(), &[bs, t, m, n]);
        for b in 0..bs {
            let s: f64 = (0..m * n).map(|p| z1[[b, p]]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12, "z1 row sums to {}", s);
            prop_assert!((0..m * n).all(|p| z1[[b, p]] >= 0.0));
            prop_assert!((0..t).all(|k| (0.0..=1.0).contains(&z2[[b, k]])));
            for k in 0..t {
                for i in 0..m {
                    for j in 0..n {
                        prop_assert_eq!(a[[b, k, i, j]], z2[[b, k]] * z1[[b, i * n + j]]);
                    }
                }
            }
        }
        Ok(())
    });
}

/// Each coupled map, read as a `t × (m·n)` matrix, has rank one: its
/// largest singular value carries the whole Frobenius norm.
pub fn rank_one_coupling(cases: u32) {
    run(cases, stc_case(), |case| {
        let (bs, _, t, m, n, _, _) = case;
        let (_, _, a) = coupled(case);
        for b in 0..bs {
            let mat = a
                .index_axis(ndarray::Axis(0), b)
                .to_owned()
                .into_shape_with_order((t, m * n))
                .unwrap();
            let fro2 = mat.iter().map(|x| x * x).sum::<f64>();
            let s1 = top_singular_value(&mat);
            prop_assert!(
                (fro2 - s1 * s1).abs() <= 1e-10 * fro2.max(1e-300),
                "residual {} of {}",
                fro2 - s1 * s1,
                fro2
            );
        }
        Ok(())
    });
}

/// Power iteration on `MᵀM`.
fn top_singular_value(m: &ndarray::Array2<f64>) -> f64 {
    let gram = m.t().dot(m);
    let mut v = ndarray::Array1::from_elem(gram.nrows(), 1.0);
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = gram.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w) / v.dot(&v);
        v = w / norm;
    }
    lambda.max(0.0).sqrt()
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    x2.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Normalized embeddings and both attention projections have unit rows.
pub fn unit_norm_embeddings(cases: u32) {
    let strategy = (1usize..5, 1usize..10, -3.0f64..3.0, 1usize..3, 1usize..4, 1usize..4, any::<u64>());
    run(cases, strategy, |(bs, d, log_scale, t, m, n, seed)| {
        let mut r = rng(seed);
        let tape = Tape::new();
        let x = randn(&[bs, d], &mut r) * 10f64.powf(log_scale);
        prop_assume!(row_norms(&x).iter().all(|&v| v > 1e-9));
        let y = constant(&tape, &x).l2_normalize().value();
        for v in row_norms(&y) {
            prop_assert!((v - 1.0).abs() < 1e-12, "norm {}", v);
        }
        let p = t * m * n;
        let teacher = constant(&tape, &uniform(&[bs, t, m, n], 0.0, 1.0, &mut r));
        let tp = project_teacher_attention(teacher, t).unwrap().value();
        for v in row_norms(&tp) {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
        let a_s = constant(&tape, &randn(&[bs, p, p], &mut r)).softmax();
        let embed = Projection {
            w: constant(&tape, &randn(&[d, p], &mut r)),
            b: constant(&tape, &randn(&[d], &mut r)),
        };
        let sp = project_student_attention(a_s, &embed).unwrap().value();
        for v in row_norms(&sp) {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
        Ok(())
    });
}

/// Squared distances between unit vectors stay in `[0, 4]`.
pub fn distance_losses_bounded(cases: u32) {
    let strategy = (1usize..5, 1usize..10, 1usize..4, 1usize..3, 1usize..3, any::<u64>());
    run(cases, strategy, |(bs, d, t, m, n, seed)| {
        let mut r = rng(seed);
        let tape = Tape::new();
        let a = constant(&tape, &randn(&[bs, d], &mut r)).l2_normalize();
        let b = constant(&tape, &randn(&[bs, d], &mut r)).l2_normalize();
        let l_d = attention_distill_loss(a, b).unwrap().item();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l_d), "L_D = {}", l_d);
        let same = attention_distill_loss(a, a).unwrap().item();
        prop_assert!(same.abs() < 1e-12);
        let opposite = attention_distill_loss(a, a.neg()).unwrap().item();
        prop_assert!((opposite - 4.0).abs() < 1e-12);

        let c = 8;
        let f = constant(&tape, &randn(&[bs, c, t, m, n], &mut r));
        let z1 = constant(&tape, &randn(&[bs, m * n], &mut r)).softmax();
        let video = Projection {
            w: constant(&tape, &randn(&[d, c * m * n], &mut r)),
            b: constant(&tape, &randn(&[d], &mut r)),
        };
        let pose = Projection {
            w: constant(&tape, &randn(&[d, m * n], &mut r)),
            b: constant(&tape, &randn(&[d], &mut r)),
        };
        let l_e = spatial_embedding_loss(f, z1, &video, &pose).unwrap().item();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&l_e), "L_e = {}", l_e);
        Ok(())
    });
}

/// Student recipes never move the pose teacher's weights.
pub fn frozen_teacher_hash(cases: u32) {
    run(cases, (0u64..1000, 0u64..1000), |(data_seed, seed)| {
        let data = tiny_data(3, data_seed);
        let teacher = train(&tiny_cfg(Recipe::PoseTeacher, seed), &data, None).unwrap().0;
        let before = teacher.network(POSE).unwrap().params.hash();
        for recipe in [Recipe::VpnF, Recipe::VpnPp] {
            let (ck, _) = train(&tiny_cfg(recipe, seed), &data, Some(&teacher)).unwrap();
            let net = ck.network(POSE).unwrap();
            prop_assert!(net.frozen);
            prop_assert_eq!(net.params.hash(), before.clone());
        }
        prop_assert_eq!(teacher.network(POSE).unwrap().params.hash(), before);
        Ok(())
    });
}

fn template_checkpoint() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let data = tiny_data(3, 7);
        let teacher = train(&tiny_cfg(Recipe::PoseTeacher, 1), &data, None).unwrap().0;
        train(&tiny_cfg(Recipe::VpnPp, 1), &data, Some(&teacher)).unwrap().0
    })
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.iter().map(|x| x.to_bits()).collect()
}

/// Serialize, parse and serialize again: identical bytes and identical
/// values, down to the bit, through memory and through a file.
pub fn checkpoint_round_trip(cases: u32) {
    let strategy = (any::<u64>(), 0usize..1000, proptest::collection::vec(any::<(f64, f64, Option<f64>)>(), 0..4));
    run(cases, strategy, |(seed, epoch, hist)| {
        let mut r = rng(seed);
        let mut ck = template_checkpoint().clone();
        ck.epoch = epoch;
        ck.data_hash = format!("{seed:016x}");
        ck.history = hist
            .iter()
            .enumerate()
            .map(|(i, &(a, b, c))| EpochRecord {
                epoch: i,
                l_c_s: a,
                l_c_t: b,
                l_scd: -a,
                l_d: b.abs(),
                l_e: 0.0,
                total: a + b,
                train_acc: 0.5,
                test_acc: c,
            })
            .filter(|rec| rec.l_c_s.is_finite() && rec.l_c_t.is_finite() && rec.total.is_finite())
            .filter(|rec| rec.test_acc.is_none_or(f64::is_finite))
            .collect();
        for net in ck.networks.values_mut() {
            let names: Vec<String> = net.params.iter().map(|(k, _)| k.to_string()).collect();
            for name in names {
                let p = net.params.get_mut(&name).unwrap();
                *p = randn(p.shape(), &mut r).mapv(|x| (x * 3.0) as f32 as f64);
            }
            for v in net.velocity.values_mut() {
                *v = randn(v.shape(), &mut r).mapv(|x| x as f32 as f64);
            }
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        for (name, net) in &ck.networks {
            let other = &back.networks[name];
            prop_assert_eq!(net.params.hash(), other.params.hash());
            for (k, v) in &net.params.iter().collect::<Vec<_>>() {
                prop_assert_eq!(bits(v), bits(other.params.get(k).unwrap()));
            }
            for (k, v) in &net.velocity {
                prop_assert_eq!(bits(v), bits(&other.velocity[k]));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        ck.save(&path).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
        prop_assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        Ok(())
    });
}

fn sample_bits(s: &Sample) -> (String, usize, Vec<u32>, Vec<u32>) {
    (
        s.id.clone(),
        s.label,
        s.clip.frames.iter().map(|x| x.to_bits()).collect(),
        s.pose.coords.iter().map(|x| x.to_bits()).collect(),
    )
}

/// Written datasets read back bit-identical to the in-memory generator,
/// and generation is a pure function of the config.
pub fn dataset_round_trip(cases: u32) {
    let strategy = (2usize..4, 1usize..3, 1usize..3, 1usize..4, 2usize..8, 1usize..4, 0.0f64..0.3, any::<u64>());
    run(cases, strategy, |(classes, spc, tspc, frames, hw, channels, noise, seed)| {
        let cfg = GenConfig {
            class_count: classes,
            samples_per_class: spc,
            test_samples_per_class: tspc,
            pose_frames: 6,
            frames,
            height: hw,
            width: hw + 1,
            channels,
            pixel_noise_std: noise,
            seed,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let written = gen_dataset(&cfg, dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        prop_assert_eq!(&loaded.samples, &written.samples);
        prop_assert_eq!(&loaded.config, &cfg);
        for split in [Split::Train, Split::Test] {
            let a: Vec<_> = load_split(&loaded, split).unwrap().iter().map(sample_bits).collect();
            let b: Vec<_> = generate_split(&cfg, split).iter().map(sample_bits).collect();
            prop_assert_eq!(a, b);
        }
        let again = tempfile::tempdir().unwrap();
        gen_dataset(&cfg, again.path()).unwrap();
        for entry in &written.samples {
            for rel in [&entry.clip_path, &entry.pose_path] {
                prop_assert_eq!(
                    std::fs::read(dir.path().join(rel)).unwrap(),
                    std::fs::read(again.path().join(rel)).unwrap()
                );
            }
        }
        Ok(())
    });
}
