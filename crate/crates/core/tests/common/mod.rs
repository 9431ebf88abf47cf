//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod invariants;

use std::sync::Arc;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use vpnpp::autograd::Gradients;
use vpnpp::backbones::{PoseArch, VideoArch};
use vpnpp::params::{Bound, ParamSet};
use vpnpp::syndata::GenConfig;
use vpnpp::trainer::{Recipe, TrainConfig, TrainingData};
use vpnpp::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn constant<'t>(tape: &'t Tape, t: &Tensor) -> Var<'t> {
    tape.leaf(Arc::new(t.clone()), false)
}

/// Scalar loss built from named inputs; returns the value and, when asked,
/// the gradient of every input.
pub fn eval_loss<F>(inputs: &ParamSet, f: &F, grad: bool) -> (f64, Option<std::collections::BTreeMap<String, Tensor>>)
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let b = inputs.bind(&tape, grad);
    let y = f(&tape, &b);
    let v = y.item();
    if grad {
        let g: Gradients = tape.backward(y);
        (v, Some(b.grads(&g)))
    } else {
        (v, None)
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every scalar of every input. The denominator is floored at `floor`.
pub fn max_fd_rel_error<F>(inputs: &ParamSet, f: F, eps: f64, floor: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    let (_, grads) = eval_loss(inputs, &f, true);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = inputs.iter().map(|(k, _)| k.to_string()).collect();
    for name in names {
        let base = inputs.get(&name).unwrap().clone();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(base.raw_dim()));
        for i in 0..base.len() {
            let mut probe = inputs.clone();
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = base.as_slice().unwrap()[i] + eps;
            let up = eval_loss(&probe, &f, false).0;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = base.as_slice().unwrap()[i] - eps;
            let down = eval_loss(&probe, &f, false).0;
            let num = (up - down) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn tiny_gen(classes: usize, seed: u64) -> GenConfig {
    GenConfig {
        class_count: classes,
        samples_per_class: 3,
        test_samples_per_class: 1,
        frames: 4,
        height: 8,
        width: 8,
        seed,
        ..Default::default()
    }
}

pub fn tiny_data(classes: usize, seed: u64) -> TrainingData {
    TrainingData::generate(&tiny_gen(classes, seed)).unwrap()
}

pub fn tiny_cfg(recipe: Recipe, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_recipe(recipe);
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = seed;
    cfg.model.video = VideoArch {
        in_channels: 3,
        widths: vec![8, 8],
        pools: vec![[2, 2, 2], [1, 1, 1]],
    };
    cfg.model.pose = PoseArch {
        joints: 13,
        widths: vec![8, 16],
        temporal_pool: 2,
    };
    cfg.model.spaces.se_dim = 8;
    cfg.model.spaces.feat_dim = 16;
    cfg.model.spaces.att_dim = 16;
    cfg
}
