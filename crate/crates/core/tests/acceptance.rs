//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass a criterion number to run only that one.

mod common;
mod desk;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, IxDyn};
use rand::Rng;

use vpnpp::backbones::{graph_conv, GraphConvVars, PoseArch, PoseFeature};
use vpnpp::distill::{
    attention_distill_loss, project_student_attention, project_teacher_attention, scd_loss, total_loss,
    LossComponents, PairBatch, PairItem,
};
use vpnpp::params::{Init, ParamSet};
use vpnpp::syndata::SkeletonTopology;
use vpnpp::vpn::{modulate, self_attention_forward, spatial_embedding_loss, stc_forward, Projection, SelfAttnVars, StcVars};
use vpnpp::{Tape, Tensor};

use common::{constant, invariants, max_fd_rel_error, randn, rng, uniform};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

// Toy shapes for the gradient checks.
const C: usize = 8;
const T: usize = 2;
const M: usize = 3;
const N: usize = 3;
const J: usize = 5;
const B: usize = 2;
const FD_EPS: f64 = 1e-5;
// Denominator floor for the relative error. Some true gradients are exactly
// zero (key biases under softmax) and central differences only resolve them
// to ~1e-8.
const FD_FLOOR: f64 = 1e-4;

fn grads_scd() -> f64 {
    let mut r = rng(1);
    let mut p = ParamSet::new();
    p.insert("teacher", randn(&[6, C], &mut r));
    p.insert("student", randn(&[6, C], &mut r));
    let flags = [true, true, true, false, false, false];
    let batch = PairBatch {
        items: flags
            .iter()
            .enumerate()
            .map(|(i, &positive)| PairItem { video: i % 3, pose: i, label: i % 3, positive })
            .collect(),
        positives: 3,
        negatives: 3,
        m: 0.4,
    };
    max_fd_rel_error(
        &p,
        |_, b| scd_loss(&batch, b.var("teacher").l2_normalize(), b.var("student").l2_normalize()).unwrap(),
        FD_EPS,
        FD_FLOOR,
    )
}

fn grads_attention_distill() -> f64 {
    let mut r = rng(2);
    let positions = T * M * N;
    let att = 6;
    let teacher = uniform(&[B, T, M, N], 0.1, 1.0, &mut r);
    let mut p = ParamSet::new();
    p.insert("logits", randn(&[B, positions, positions], &mut r));
    p.insert("ea.w", randn(&[att, positions], &mut r));
    p.insert("ea.b", randn(&[att], &mut r));
    max_fd_rel_error(
        &p,
        |tape, b| {
            let t = project_teacher_attention(constant(tape, &teacher), att).unwrap();
            let embed = Projection { w: b.var("ea.w"), b: b.var("ea.b") };
            let s = project_student_attention(b.var("logits").softmax(), &embed).unwrap();
            attention_distill_loss(t, s).unwrap()
        },
        FD_EPS,
        FD_FLOOR,
    )
}

fn grads_embedding() -> f64 {
    let mut r = rng(3);
    let se = 4;
    let mut p = ParamSet::new();
    p.insert("f", randn(&[B, C, T, M, N], &mut r));
    p.insert("z1_logits", randn(&[B, M * N], &mut r));
    p.insert("se.video.w", randn(&[se, C * M * N], &mut r));
    p.insert("se.video.b", randn(&[se], &mut r));
    p.insert("se.pose.w", randn(&[se, M * N], &mut r));
    p.insert("se.pose.b", randn(&[se], &mut r));
    max_fd_rel_error(
        &p,
        |_, b| {
            spatial_embedding_loss(
                b.var("f"),
                b.var("z1_logits").softmax(),
                &Projection::from_bound(b, "se.video"),
                &Projection::from_bound(b, "se.pose"),
            )
            .unwrap()
        },
        FD_EPS,
        FD_FLOOR,
    )
}

fn toy_adjacency() -> Array2<f64> {
    SkeletonTopology::chain(J).unwrap().adjacency().clone()
}

/// Pose backbone, coupler and modulation, probed by a fixed random tensor.
fn grads_stc_path() -> f64 {
    let mut r = rng(4);
    let arch = PoseArch { joints: J, widths: vec![4, 6], temporal_pool: 2 };
    let mut p = ParamSet::new();
    {
        let mut init_rng = rng(40);
        let mut init = Init::new(&mut init_rng);
        arch.init("pose", &mut init, &mut p);
    }
    let names: Vec<String> = p.iter().map(|(k, _)| k.to_string()).collect();
    for name in names {
        // Non-zero offsets and biases so every parameter carries gradient.
        let shape = p.get(&name).unwrap().shape().to_vec();
        let noise = randn(&shape, &mut r) * 0.1;
        *p.get_mut(&name).unwrap() += &noise;
    }
    let d_p = arch.feature_dim();
    p.insert("poses", randn(&[B, 3, J, 4], &mut r));
    p.insert("f", randn(&[B, C, T, M, N], &mut r));
    p.insert("stc.spatial.w", randn(&[M * N, d_p], &mut r));
    p.insert("stc.spatial.b", randn(&[M * N], &mut r));
    p.insert("stc.temporal.w", randn(&[T, d_p], &mut r));
    p.insert("stc.temporal.b", randn(&[T], &mut r));
    let probe = randn(&[B, C, T, M, N], &mut r);
    let adj = toy_adjacency();
    max_fd_rel_error(
        &p,
        |tape, b| {
            let h = arch.forward(b, "pose", b.var("poses"), &adj).unwrap();
            let (_, a) = stc_forward(&h, (T, M, N), &StcVars::from_bound(b, "stc")).unwrap();
            modulate(b.var("f"), a).unwrap().mul(constant(tape, &probe)).sum()
        },
        FD_EPS,
        FD_FLOOR,
    )
}

fn grads_self_attention() -> f64 {
    let mut r = rng(5);
    let (d_qk, d_v) = (C / 8, C / 2);
    let positions = T * M * N;
    let mut p = ParamSet::new();
    p.insert("f", randn(&[B, C, T, M, N], &mut r));
    for (name, d) in [("attn.q", d_qk), ("attn.k", d_qk), ("attn.v", d_v)] {
        p.insert(format!("{name}.w"), randn(&[d, C], &mut r));
        p.insert(format!("{name}.b"), randn(&[d], &mut r));
    }
    p.insert("attn.o.w", randn(&[C, d_v], &mut r));
    p.insert("attn.o.b", randn(&[C], &mut r));
    let probe_out = randn(&[B, C, T, M, N], &mut r);
    let probe_attn = randn(&[B, positions, positions], &mut r);
    max_fd_rel_error(
        &p,
        |tape, b| {
            let (attn, out) = self_attention_forward(b.var("f"), &SelfAttnVars::from_bound(b, "attn")).unwrap();
            out.mul(constant(tape, &probe_out))
                .sum()
                .add(attn.mul(constant(tape, &probe_attn)).sum())
        },
        FD_EPS,
        FD_FLOOR,
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks = [
        ("L_SCD", grads_scd()),
        ("L_D", grads_attention_distill()),
        ("L_e", grads_embedding()),
        ("STC path", grads_stc_path()),
        ("self-attention", grads_self_attention()),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(
        worst < 1e-4 && secs < 60.0,
        format!("max rel err {worst:.1e} < 1e-4 [{detail}], {secs:.1}s < 60s"),
    )
}

/// Per-pair loop: `Σ log s` over positives plus `Σ log(1 − s)` over
/// negatives, over the positive count.
fn scd_oracle(batch: &PairBatch, t: &Array2<f64>, s: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (k, item) in batch.items.iter().enumerate() {
        let mut d = 0.0;
        for c in 0..t.ncols() {
            d += t[[k, c]] * s[[k, c]];
        }
        let score = d.exp() / (d.exp() + batch.m);
        total += if item.positive { score.ln() } else { (1.0 - score).ln() };
    }
    total / batch.positives as f64
}

fn normalized_rows(x: Tensor) -> Array2<f64> {
    let mut x = x.into_dimensionality::<ndarray::Ix2>().unwrap();
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    x
}

fn oracle_scd() -> f64 {
    let mut r = rng(20);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let positives = r.random_range(1..=8);
        let npp = r.random_range(0..=2);
        let d = r.random_range(2..=16);
        let n = positives * (1 + npp);
        let mut items = Vec::with_capacity(n);
        for i in 0..positives {
            items.push(PairItem { video: i, pose: i, label: 0, positive: true });
        }
        for i in 0..positives * npp {
            items.push(PairItem { video: i % positives, pose: positives + i, label: 0, positive: false });
        }
        let batch = PairBatch { items, positives, negatives: positives * npp, m: r.random_range(0.01..2.0) };
        let t = normalized_rows(randn(&[n, d], &mut r));
        let s = normalized_rows(randn(&[n, d], &mut r));
        let tape = Tape::new();
        let got = scd_loss(
            &batch,
            constant(&tape, &t.clone().into_dyn()),
            constant(&tape, &s.clone().into_dyn()),
        )
        .unwrap()
        .item();
        worst = worst.max((got - scd_oracle(&batch, &t, &s)).abs());
    }
    worst
}

fn oracle_stc() -> f64 {
    let mut r = rng(21);
    let (bs, dp, t, m, n) = (3, 5, 3, 2, 4);
    let pooled = randn(&[bs, dp], &mut r);
    let (sw, sb) = (randn(&[m * n, dp], &mut r), randn(&[m * n], &mut r));
    let (tw, tb) = (randn(&[t, dp], &mut r), randn(&[t], &mut r));
    let tape = Tape::new();
    let feature = PoseFeature {
        h_star: constant(&tape, &Tensor::zeros(IxDyn(&[bs, dp, 1]))),
        pooled: constant(&tape, &pooled),
    };
    let vars = StcVars {
        spatial_w: constant(&tape, &sw),
        spatial_b: constant(&tape, &sb),
        temporal_w: constant(&tape, &tw),
        temporal_b: constant(&tape, &tb),
    };
    let a = stc_forward(&feature, (t, m, n), &vars).unwrap().1.value();
    let mut worst: f64 = 0.0;
    for b in 0..bs {
        let logit = |w: &Tensor, bias: &Tensor, row: usize| {
            let mut v = bias[[row]];
            for k in 0..dp {
                v += w[[row, k]] * pooled[[b, k]];
            }
            v
        };
        let spatial: Vec<f64> = (0..m * n).map(|p| logit(&sw, &sb, p)).collect();
        let top = spatial.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = spatial.iter().map(|v| (v - top).exp()).sum();
        for tau in 0..t {
            let z2 = 1.0 / (1.0 + (-logit(&tw, &tb, tau)).exp());
            for i in 0..m {
                for j in 0..n {
                    let z1 = (spatial[i * n + j] - top).exp() / denom;
                    worst = worst.max((a[[b, tau, i, j]] - z2 * z1).abs());
                }
            }
        }
    }
    worst
}

fn oracle_self_attention() -> f64 {
    let mut r = rng(22);
    let (bs, c, t, m, n, d_qk, d_v) = (2, 8, 2, 2, 2, 3, 4);
    let positions = t * m * n;
    let f = randn(&[bs, c, t, m, n], &mut r);
    let w: Vec<(Tensor, Tensor)> = [(d_qk, c), (d_qk, c), (d_v, c), (c, d_v)]
        .iter()
        .map(|&(o, i)| (randn(&[o, i], &mut r), randn(&[o], &mut r)))
        .collect();
    let tape = Tape::new();
    let proj = |k: usize| Projection { w: constant(&tape, &w[k].0), b: constant(&tape, &w[k].1) };
    let vars = SelfAttnVars { query: proj(0), key: proj(1), value: proj(2), restore: proj(3) };
    let (attn, out) = self_attention_forward(constant(&tape, &f), &vars).unwrap();
    let (attn, out) = (attn.value(), out.value());
    let fl = f.clone().into_shape_with_order((bs, c, positions)).unwrap();
    let outl = out.as_ref().clone().into_shape_with_order((bs, c, positions)).unwrap();
    // Affine map `k` applied to one position's vector.
    let apply = |k: usize, x: &[f64]| -> Vec<f64> {
        let (wk, bk) = &w[k];
        (0..wk.shape()[0])
            .map(|o| bk[[o]] + x.iter().enumerate().map(|(i, v)| wk[[o, i]] * v).sum::<f64>())
            .collect()
    };
    let mut worst: f64 = 0.0;
    for b in 0..bs {
        let cols: Vec<Vec<f64>> = (0..positions).map(|p| (0..c).map(|i| fl[[b, i, p]]).collect()).collect();
        let q: Vec<Vec<f64>> = cols.iter().map(|x| apply(0, x)).collect();
        let k: Vec<Vec<f64>> = cols.iter().map(|x| apply(1, x)).collect();
        let v: Vec<Vec<f64>> = cols.iter().map(|x| apply(2, x)).collect();
        for p in 0..positions {
            let logits: Vec<f64> = (0..positions)
                .map(|p2| (0..d_qk).map(|d| q[p][d] * k[p2][d]).sum::<f64>() / (d_qk as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp() / z).collect();
            for p2 in 0..positions {
                worst = worst.max((attn[[b, p, p2]] - weights[p2]).abs());
            }
            let gathered: Vec<f64> = (0..d_v)
                .map(|e| (0..positions).map(|p2| weights[p2] * v[p2][e]).sum())
                .collect();
            let restored = apply(3, &gathered);
            for ch in 0..c {
                worst = worst.max((outl[[b, ch, p]] - (cols[p][ch] + restored[ch])).abs());
            }
        }
    }
    worst
}

fn oracle_graph_conv() -> f64 {
    let mut r = rng(23);
    let topo = SkeletonTopology::body13();
    let adj = topo.adjacency().clone();
    let joints = topo.joint_count();
    let (bs, d_in, d_out, t) = (2, 3, 4, 5);
    let x = randn(&[bs, d_in, joints, t], &mut r);
    let weight = randn(&[d_out, d_in], &mut r);
    let bias = randn(&[d_out], &mut r);
    let offset = randn(&[joints, joints], &mut r) * 0.1;
    let tw = randn(&[d_out, d_out, 1, 1, 3], &mut r);
    let tb = randn(&[d_out], &mut r);
    let tape = Tape::new();
    let vars = GraphConvVars {
        weight: constant(&tape, &weight),
        bias: constant(&tape, &bias),
        offset: constant(&tape, &offset),
        temporal: constant(&tape, &tw),
        temporal_bias: constant(&tape, &tb),
    };
    let got = graph_conv(constant(&tape, &x), &adj, &vars, true).unwrap().value();

    let mut a_hat = Array2::<f64>::zeros((joints, joints));
    for i in 0..joints {
        let degree: f64 = (0..joints).map(|k| adj[[i, k]]).sum();
        for k in 0..joints {
            a_hat[[i, k]] = adj[[i, k]] / degree + offset[[i, k]];
        }
    }
    let mut worst: f64 = 0.0;
    for b in 0..bs {
        // Spatial stage for every frame: W · X_τ · Âᵀ + bias.
        let mut y = vec![vec![vec![0.0; t]; joints]; d_out];
        for tau in 0..t {
            let x_tau = Array2::from_shape_fn((d_in, joints), |(i, j)| x[[b, i, j, tau]]);
            let agg = x_tau.dot(&a_hat.t());
            let mixed = weight.view().into_dimensionality::<ndarray::Ix2>().unwrap().dot(&agg);
            for o in 0..d_out {
                for j in 0..joints {
                    y[o][j][tau] = mixed[[o, j]] + bias[[o]];
                }
            }
        }
        for o in 0..d_out {
            for j in 0..joints {
                for tau in 0..t {
                    let mut z = tb[[o]];
                    for o2 in 0..d_out {
                        for dt in 0..3 {
                            let src = tau as isize + dt as isize - 1;
                            if (0..t as isize).contains(&src) {
                                z += tw[[o, o2, 0, 0, dt]] * y[o2][j][src as usize];
                            }
                        }
                    }
                    worst = worst.max((got[[b, o, j, tau]] - z.max(0.0)).abs());
                }
            }
        }
    }
    worst
}

fn criterion_2() -> Outcome {
    let scd = oracle_scd();
    let stc = oracle_stc();
    let attn = oracle_self_attention();
    let gc = oracle_graph_conv();
    Outcome::new(
        scd < 1e-10 && stc < 1e-12 && attn < 1e-10 && gc < 1e-10,
        format!(
            "scd {scd:.1e} < 1e-10 (100 batches), stc {stc:.1e} < 1e-12, self-attention {attn:.1e} < 1e-10, graph_conv {gc:.1e} < 1e-10"
        ),
    )
}

fn criterion_3() -> Outcome {
    let c = LossComponents { l_c_s: 1.0, l_c_t: 1.2, l_scd: -0.7, l_d: 0.01, l_e: 0.0 };
    let base = total_loss(c, 50.0, 50.0).unwrap().total;
    let delta = 0.25;
    let scd_up = total_loss(LossComponents { l_scd: c.l_scd + delta, ..c }, 50.0, 50.0).unwrap().total;
    let d_up = total_loss(LossComponents { l_d: c.l_d + delta, ..c }, 50.0, 50.0).unwrap().total;
    let zero = total_loss(c, 0.0, 0.0).unwrap().total;
    let pass = base == 37.7
        && scd_up < base
        && (base - scd_up - 50.0 * delta).abs() < 1e-12
        && d_up > base
        && (d_up - base - 50.0 * delta).abs() < 1e-12
        && zero == c.l_c_s + c.l_c_t;
    Outcome::new(
        pass,
        format!(
            "total {base} == 37.7; L_SCD +{delta} -> {scd_up:.4} (lower); L_D +{delta} -> {d_up:.4} (higher); alpha=beta=0 -> {zero}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let checks: [(&str, fn()); 7] = [
        ("attention factors", || invariants::attention_factors(128)),
        ("rank-1 coupling", || invariants::rank_one_coupling(128)),
        ("unit-norm embeddings", || invariants::unit_norm_embeddings(128)),
        ("L_D in [0,4]", || invariants::distance_losses_bounded(128)),
        ("frozen teacher hash", || invariants::frozen_teacher_hash(3)),
        ("checkpoint round-trip", || invariants::checkpoint_round_trip(24)),
        ("dataset round-trip", || invariants::dataset_round_trip(8)),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        if catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = if failed.is_empty() {
        format!("{} invariants hold", checks.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Outcome::new(failed.is_empty() && secs < 300.0, format!("{detail}, {secs:.1}s < 300s"))
}

fn main() {
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", criterion_1),
        (2, "oracle equivalence", criterion_2),
        (3, "total loss arithmetic", criterion_3),
        (8, "contract suite", criterion_8),
        (4, "distillation benefit", desk::criterion_4),
        (5, "alpha sensitivity", desk::criterion_5),
        (6, "pose-quality resilience", desk::criterion_6),
        (7, "pose-free inference and speed", desk::criterion_7),
    ];
    let mut failures = 0;
    for (n, name, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} ({name}): {verdict} | {} | {:.1}s",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        failures += usize::from(!outcome.pass);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
