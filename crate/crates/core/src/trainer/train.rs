use std::collections::BTreeMap;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Network, POSE, STUDENT, VPN};
use super::config::{Recipe, TrainConfig};
use super::data::{clip_batch, pose_batch, TrainingData};
use super::eval::{predict_scores, top1, ModelPath};
use super::report::{EpochRecord, TrainReport};
use crate::autograd::{Tape, Tensor};
use crate::backbones::cross_entropy;
use crate::distill::{
    attention_distill_loss, build_pair_batch_from_labels, project_student_attention, project_teacher_attention,
    scd_loss, total_loss_var, LossComponents,
};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Sgd};
use crate::rng::stream;
use crate::syndata::{DatasetManifest, Sample, Split};
use crate::vpn::{
    ensure_nonzero_rows, global_pool, init_pose_net, init_student, init_vpn, pose_net_forward, student_forward,
    vpn_forward, ModelConfig, Projection,
};

const FEATURE_BATCH: usize = 32;

struct NetState {
    params: ParamSet,
    frozen: bool,
    sgd: Sgd,
}

/// Loads the manifest and trains. See [`train`].
pub fn train_from_manifest(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    pose_teacher: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainReport)> {
    let data = TrainingData::from_manifest(manifest)?;
    train(cfg, &data, pose_teacher)
}

/// Runs one recipe to completion.
///
/// The model geometry is taken from the dataset. Pose corruption from the
/// config is applied to both splits with a data-level seed, so teacher and
/// student runs over the same data see the same corrupted poses.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainingData,
    pose_teacher: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainReport)> {
    let mut cfg = cfg.clone();
    cfg.model.adapt_to(&data.gen);
    cfg.validate()?;
    let data = data.with_pose_corruption(cfg.pose_corruption, data.gen.seed)?;
    let mut run = Run::new(&cfg, &data, pose_teacher)?;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        report.records.push(run.epoch(epoch)?);
    }
    let ckpt = run.into_checkpoint(report.records.clone());
    Ok((ckpt, report))
}

/// Path whose accuracy a recipe reports.
pub fn primary_path(recipe: Recipe) -> ModelPath {
    match recipe {
        Recipe::PoseTeacher => ModelPath::PoseTeacher,
        Recipe::VpnTeacher => ModelPath::VpnTeacher,
        _ => ModelPath::Student,
    }
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainingData,
    labels: Vec<usize>,
    nets: BTreeMap<String, NetState>,
    /// Normalized frozen pose-teacher features of every training sample.
    teacher_feats: Option<Tensor>,
    frozen_hashes: BTreeMap<String, String>,
    step: u64,
}

struct StepStats {
    comps: LossComponents,
    total: f64,
    correct: usize,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a TrainingData, pose_teacher: Option<&Checkpoint>) -> Result<Self> {
        let model = &cfg.model;
        let fresh = |params: ParamSet| NetState {
            params,
            frozen: false,
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
        };
        let mut nets = BTreeMap::new();
        match cfg.recipe {
            Recipe::PoseTeacher => {
                let p = init_pose_net(model, &mut stream(cfg.seed, "init-pose", 0));
                nets.insert(POSE.to_string(), fresh(p));
            }
            Recipe::VpnTeacher => {
                let p = init_vpn(model, cfg.with_se, &mut stream(cfg.seed, "init-vpn", 0))?;
                nets.insert(VPN.to_string(), fresh(p));
            }
            _ => {
                let p = init_student(model, &mut stream(cfg.seed, "init-student", 0))?;
                nets.insert(STUDENT.to_string(), fresh(p));
            }
        }
        if cfg.recipe.uses_attention_teacher() {
            let p = init_vpn(model, false, &mut stream(cfg.seed, "init-vpn", 0))?;
            nets.insert(VPN.to_string(), fresh(p));
        }
        let mut teacher_feats = None;
        if cfg.recipe.needs_pose_teacher() {
            let teacher = pose_teacher.ok_or_else(|| {
                Error::MissingCheckpoint(format!("recipe {} needs a trained pose_teacher checkpoint", cfg.recipe))
            })?;
            let params = check_pose_teacher(teacher, cfg, data)?;
            teacher_feats = Some(teacher_features(&teacher.config.model, &params, &data.train, data)?);
            nets.insert(
                POSE.to_string(),
                NetState {
                    params,
                    frozen: true,
                    sgd: Sgd::default(),
                },
            );
        }
        let frozen_hashes = nets
            .iter()
            .filter(|(_, n)| n.frozen)
            .map(|(k, n)| (k.clone(), n.params.hash()))
            .collect();
        Ok(Self {
            cfg,
            data,
            labels: data.labels(Split::Train),
            nets,
            teacher_feats,
            frozen_hashes,
            step: 0,
        })
    }

    fn epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let cfg = self.cfg;
        let lr = cfg.schedule.lr(cfg.lr, epoch);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "epoch-order", epoch as u64));
        let mut sums = LossComponents::default();
        let mut total = 0.0;
        let mut correct = 0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.positives_per_step()) {
            let s = self.step(chunk, lr)?;
            sums.l_c_s += s.comps.l_c_s;
            sums.l_c_t += s.comps.l_c_t;
            sums.l_scd += s.comps.l_scd;
            sums.l_d += s.comps.l_d;
            sums.l_e += s.comps.l_e;
            total += s.total;
            correct += s.correct;
            steps += 1;
            self.step += 1;
        }
        for (name, expected) in &self.frozen_hashes {
            let now = self.nets[name].params.hash();
            if &now != expected {
                return Err(Error::FrozenMutation(format!(
                    "`{name}` changed during epoch {epoch}: {expected} -> {now}"
                )));
            }
        }
        let evaluate = epoch + 1 == cfg.epochs || (cfg.eval_every > 0 && (epoch + 1).is_multiple_of(cfg.eval_every));
        let test_acc = if evaluate && !self.data.test.is_empty() {
            let path = primary_path(cfg.recipe);
            let params = &self.nets[path.network()].params;
            let test: Vec<&Sample> = self.data.test.iter().collect();
            let (scores, _) = predict_scores(&cfg.model, params, path, &test, &self.data.adjacency, &self.data.clip_norm, cfg.shift)?;
            Some(top1(&scores, &self.data.labels(Split::Test)))
        } else {
            None
        };
        let n = steps.max(1) as f64;
        Ok(EpochRecord {
            epoch,
            l_c_s: sums.l_c_s / n,
            l_c_t: sums.l_c_t / n,
            l_scd: sums.l_scd / n,
            l_d: sums.l_d / n,
            l_e: sums.l_e / n,
            total: total / n,
            train_acc: correct as f64 / self.data.train.len() as f64,
            test_acc,
        })
    }

    fn step(&mut self, idx: &[usize], lr: f64) -> Result<StepStats> {
        let (stats, grads) = self.forward_backward(idx)?;
        for (name, mut g) in grads {
            if let Some(c) = self.cfg.grad_clip {
                clip_global_norm(&mut g, c);
            }
            let net = self.nets.get_mut(&name).unwrap();
            net.sgd.step(&mut net.params, &g, lr);
        }
        Ok(stats)
    }

    #[allow(clippy::type_complexity)]
    fn forward_backward(&self, idx: &[usize]) -> Result<(StepStats, BTreeMap<String, BTreeMap<String, Tensor>>)> {
        let cfg = self.cfg;
        let model = &cfg.model;
        let step = self.step;
        let tape = Tape::new();
        let bound: BTreeMap<&str, _> = self
            .nets
            .iter()
            .filter(|(_, n)| !n.frozen)
            .map(|(k, n)| (k.as_str(), n.params.bind(&tape, true)))
            .collect();
        let samples: Vec<&Sample> = idx.iter().map(|&i| &self.data.train[i]).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut aug = stream(cfg.seed, "augment", step);
        let max_shift = cfg.shift as i64;
        let shifts: Vec<isize> = samples
            .iter()
            .map(|_| if max_shift == 0 { 0 } else { aug.random_range(-max_shift..=max_shift) as isize })
            .collect();
        let adj = &self.data.adjacency;
        let needs_clips = cfg.recipe != Recipe::PoseTeacher;
        let needs_poses = matches!(cfg.recipe, Recipe::PoseTeacher | Recipe::VpnTeacher) || cfg.recipe.uses_attention_teacher();
        let clips = needs_clips.then(|| tape.constant(clip_batch(&samples, &shifts, &self.data.clip_norm)));
        let poses = needs_poses.then(|| tape.constant(pose_batch(&samples)));

        let mut comps = LossComponents::default();
        let (total, logits) = match cfg.recipe {
            Recipe::PoseTeacher => {
                let mut drop = stream(cfg.seed, "dropout-pose", step);
                let out = pose_net_forward(model, &bound[POSE], poses.unwrap(), adj, Some(&mut drop))?;
                let ce = cross_entropy(out.logits, &labels);
                comps.l_c_t = ce.item();
                (ce, out.logits)
            }
            Recipe::VpnTeacher => {
                let w = &cfg.vpn_loss;
                let mut drop = stream(cfg.seed, "dropout-vpn", step);
                let out = vpn_forward(model, &bound[VPN], clips.unwrap(), poses.unwrap(), adj, cfg.with_se, Some(&mut drop))?;
                let ce = cross_entropy(out.logits, &labels);
                comps.l_c_t = ce.item();
                let mut total = ce.scale(w.entropy);
                if let Some(le) = out.embedding_loss {
                    comps.l_e = le.item();
                    if w.embedding != 0.0 {
                        total = total.add(le.scale(w.embedding));
                    }
                }
                if w.attention_reg != 0.0 {
                    let reg = out.factors.z2.sum().scale(1.0 / labels.len() as f64);
                    total = total.add(reg.scale(w.attention_reg));
                }
                (total, out.logits)
            }
            _ => {
                let sb = &bound[STUDENT];
                let mut drop = stream(cfg.seed, "dropout-student", step);
                let st = student_forward(model, sb, clips.unwrap(), Some(&mut drop))?;
                let l_c_s = cross_entropy(st.logits, &labels);
                comps.l_c_s = l_c_s.item();
                let mut l_scd = None;
                let mut l_c_t = None;
                let mut l_d = None;
                if cfg.recipe.uses_contrastive() {
                    let pair_seed: u64 = stream(cfg.seed, "pairs", step).random();
                    let batch = build_pair_batch_from_labels(
                        &self.labels,
                        idx,
                        cfg.negatives_per_positive,
                        cfg.pair_constant,
                        pair_seed,
                    )?;
                    let raw = Projection::from_bound(sb, "embed_f").apply(global_pool(st.features));
                    ensure_nonzero_rows(raw, "student feature embedding")?;
                    let emb = raw.l2_normalize();
                    let slots: Vec<usize> = batch
                        .items
                        .iter()
                        .map(|it| idx.iter().position(|&v| v == it.video).unwrap())
                        .collect();
                    let pose_ids: Vec<usize> = batch.items.iter().map(|it| it.pose).collect();
                    let feats = self.teacher_feats.as_ref().unwrap();
                    let teacher_rows = tape.constant(feats.select(Axis(0), &pose_ids));
                    let l = scd_loss(&batch, teacher_rows, emb.select_rows(&slots))?;
                    comps.l_scd = l.item();
                    l_scd = Some(l);
                }
                if cfg.recipe.uses_attention_teacher() {
                    let mut drop_t = stream(cfg.seed, "dropout-vpn", step);
                    let out = vpn_forward(model, &bound[VPN], clips.unwrap(), poses.unwrap(), adj, false, Some(&mut drop_t))?;
                    let ce_t = cross_entropy(out.logits, &labels);
                    comps.l_c_t = ce_t.item();
                    let a_t = project_teacher_attention(out.attention, model.spaces.att_dim)?;
                    let e_a = project_student_attention(st.attention, &Projection::from_bound(sb, "embed_a"))?;
                    let d = attention_distill_loss(a_t, e_a)?;
                    comps.l_d = d.item();
                    l_c_t = Some(ce_t);
                    l_d = Some(d);
                }
                let total = total_loss_var(Some(l_c_s), l_c_t, l_scd, l_d, cfg.alpha, cfg.beta).unwrap();
                (total, st.logits)
            }
        };
        let total_value = total.item();
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let correct = argmax_rows(&logits.value())
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        let g = tape.backward(total);
        let grads = bound.iter().map(|(k, b)| (k.to_string(), b.grads(&g))).collect();
        Ok((
            StepStats {
                comps,
                total: total_value,
                correct,
            },
            grads,
        ))
    }

    fn into_checkpoint(self, history: Vec<EpochRecord>) -> Checkpoint {
        let networks = self
            .nets
            .into_iter()
            .map(|(k, n)| {
                (
                    k,
                    Network {
                        params: n.params,
                        frozen: n.frozen,
                        velocity: n.sgd.velocity().clone(),
                    },
                )
            })
            .collect();
        Checkpoint {
            recipe: self.cfg.recipe,
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            data_hash: self.data.data_hash.clone(),
            epoch: self.cfg.epochs,
            networks,
            history,
        }
    }
}

fn check_pose_teacher(teacher: &Checkpoint, cfg: &TrainConfig, data: &TrainingData) -> Result<ParamSet> {
    if teacher.recipe != Recipe::PoseTeacher {
        return Err(Error::Incompatible(format!(
            "expected a pose_teacher checkpoint, got {}",
            teacher.recipe
        )));
    }
    if teacher.data_hash != data.data_hash {
        return Err(Error::Incompatible(format!(
            "pose teacher was trained on data {}, this run uses {}",
            teacher.data_hash, data.data_hash
        )));
    }
    let tm = &teacher.config.model;
    if tm.pose.feature_dim() != cfg.model.spaces.feat_dim || tm.pose.joints != cfg.model.pose.joints {
        return Err(Error::Incompatible(format!(
            "pose teacher features have {} dims, the student embeds into {}",
            tm.pose.feature_dim(),
            cfg.model.spaces.feat_dim
        )));
    }
    Ok(teacher.network(POSE)?.params.clone())
}

/// L2-normalized pooled pose features, `[N, d_p]`.
fn teacher_features(model: &ModelConfig, params: &ParamSet, samples: &[Sample], data: &TrainingData) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(FEATURE_BATCH) {
        let tape = Tape::new();
        let b = params.bind(&tape, false);
        let refs: Vec<&Sample> = chunk.iter().collect();
        let poses = tape.constant(pose_batch(&refs));
        let out = pose_net_forward(model, &b, poses, &data.adjacency, None::<&mut ChaCha8Rng>)?;
        ensure_nonzero_rows(out.feature.pooled, "pose teacher feature")?;
        rows.push(out.feature.pooled.l2_normalize().value().as_ref().clone());
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("consistent feature widths"))
}

pub(crate) fn argmax_rows(x: &Tensor) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
}
