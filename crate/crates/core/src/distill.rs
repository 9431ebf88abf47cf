//! Cross-modal distillation: pair sampling and the contrastive loss on
//! feature embeddings, attention projections and their squared-distance loss,
//! and the joint objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::syndata::{DatasetManifest, Split};
use crate::vpn::{ensure_nonzero_rows, Projection};

/// One video-pose pair. `video` and `pose` index the training split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairItem {
    pub video: usize,
    pub pose: usize,
    /// Class of the video.
    pub label: usize,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    /// Positives first, in the order given, then negatives grouped by the
    /// positive they were drawn for.
    pub items: Vec<PairItem>,
    pub positives: usize,
    pub negatives: usize,
    /// Additive constant in the pair score denominator.
    pub m: f64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct video indices in first-appearance order and, for every item,
    /// its position in that list.
    pub fn unique_videos(&self) -> (Vec<usize>, Vec<usize>) {
        unique_in_order(self.items.iter().map(|it| it.video))
    }

    /// Same as [`unique_videos`](Self::unique_videos) for pose indices.
    pub fn unique_poses(&self) -> (Vec<usize>, Vec<usize>) {
        unique_in_order(self.items.iter().map(|it| it.pose))
    }
}

fn unique_in_order(it: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let mut uniq = Vec::new();
    let mut slot = Vec::new();
    for v in it {
        let pos = match uniq.iter().position(|&u| u == v) {
            Some(p) => p,
            None => {
                uniq.push(v);
                uniq.len() - 1
            }
        };
        slot.push(pos);
    }
    (uniq, slot)
}

/// Default constant: negatives in the batch over the training-set size.
/// A batch without negatives uses one in the numerator.
pub fn default_m(negatives: usize, train_size: usize) -> f64 {
    negatives.max(1) as f64 / train_size.max(1) as f64
}

/// Builds a batch from class labels of the training split.
///
/// Each positive `(V_i, P_i)` is followed by `negatives_per_positive` pairs
/// `(V_i, P_j)` whose pose comes from a class drawn uniformly among the other
/// classes, then a sample drawn uniformly within that class.
pub fn build_pair_batch_from_labels(
    labels: &[usize],
    positive_ids: &[usize],
    negatives_per_positive: usize,
    m_override: Option<f64>,
    seed: u64,
) -> Result<PairBatch> {
    let classes = labels.iter().copied().max().map_or(0, |c| c + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    if negatives_per_positive > 0 && present.len() < 2 {
        return Err(Error::NoNegatives(format!(
            "{} class(es) in the training split",
            present.len()
        )));
    }
    if let Some(m) = m_override {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidConfig(format!("pair constant M = {m} must be > 0")));
        }
    }
    let mut rng = stream(seed, "pair-batch", 0);
    let mut items = Vec::with_capacity(positive_ids.len() * (1 + negatives_per_positive));
    for &i in positive_ids {
        let label = *labels
            .get(i)
            .ok_or_else(|| Error::OutOfRange(format!("positive index {i} of {}", labels.len())))?;
        items.push(PairItem {
            video: i,
            pose: i,
            label,
            positive: true,
        });
    }
    for &i in positive_ids {
        let label = labels[i];
        let others: Vec<usize> = present.iter().copied().filter(|&c| c != label).collect();
        for _ in 0..negatives_per_positive {
            let c = others[rng.random_range(0..others.len())];
            let pool = &by_class[c];
            let j = pool[rng.random_range(0..pool.len())];
            items.push(PairItem {
                video: i,
                pose: j,
                label,
                positive: false,
            });
        }
    }
    let positives = positive_ids.len();
    let negatives = items.len() - positives;
    Ok(PairBatch {
        items,
        positives,
        negatives,
        m: m_override.unwrap_or_else(|| default_m(negatives, labels.len())),
    })
}

/// [`build_pair_batch_from_labels`] over the training split of a manifest;
/// indices refer to `manifest.entries(Split::Train)` order.
pub fn build_pair_batch(
    manifest: &DatasetManifest,
    positive_ids: &[usize],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<PairBatch> {
    let labels: Vec<usize> = manifest.entries(Split::Train).map(|e| e.label).collect();
    build_pair_batch_from_labels(&labels, positive_ids, negatives_per_positive, None, seed)
}

/// `exp(d) / (exp(d) + M)` with `d = t_f · e_f`, evaluated as
/// `sigmoid(d − ln M)`.
pub fn pair_score(t_f: &[f64], e_f: &[f64], m: f64) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::OutOfRange(format!("pair constant M = {m} must be > 0")));
    }
    if t_f.len() != e_f.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", t_f.len(), e_f.len())));
    }
    let d: f64 = t_f.iter().zip(e_f).map(|(a, b)| a * b).sum();
    Ok(sigmoid(d - m.ln()))
}

/// Contrastive log-likelihood over a pair batch, normalized by the number of
/// positives. Higher is better.
///
/// `teacher` and `student` are `[items, d]`: row `k` holds the (already
/// normalized) pose and video embeddings of item `k`.
pub fn scd_loss<'t>(batch: &PairBatch, teacher: Var<'t>, student: Var<'t>) -> Result<Var<'t>> {
    if batch.is_empty() || batch.positives == 0 {
        return Err(Error::EmptyBatch);
    }
    if !(batch.m > 0.0) {
        return Err(Error::OutOfRange(format!("pair constant M = {} must be > 0", batch.m)));
    }
    let (ts, ss) = (teacher.shape(), student.shape());
    if ts.len() != 2 || ts != ss || ts[0] != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {ts:?}, student {ss:?}, {} items",
            batch.len()
        )));
    }
    let tape = teacher.tape();
    let n = batch.len();
    let pos = Tensor::from_shape_fn(ndarray::IxDyn(&[n]), |ix| f64::from(u8::from(batch.items[ix[0]].positive)));
    let x = teacher.dot_last(student).add_scalar(-batch.m.ln());
    let sp = x.softplus();
    // log s = x − softplus(x); log(1 − s) = −softplus(x)
    let per_item = x.mul(tape.constant(pos)).sub(sp);
    Ok(per_item.sum().scale(1.0 / batch.positives as f64))
}

/// Flattens `a: [B, t, m, n]`, average-pools consecutive groups down to
/// `att_dim`, and L2-normalizes. Parameter-free.
pub fn project_teacher_attention<'t>(a: Var<'t>, att_dim: usize) -> Result<Var<'t>> {
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::ShapeMismatch(format!("attention map {s:?}")));
    }
    let bs = s[0];
    let p: usize = s[1..].iter().product();
    if att_dim == 0 || !p.is_multiple_of(att_dim) {
        return Err(Error::ShapeMismatch(format!(
            "{p} attention positions do not pool to {att_dim}"
        )));
    }
    let pooled = a
        .reshape(&[bs, att_dim, p / att_dim])
        .mean_axis(2);
    ensure_nonzero_rows(pooled, "teacher attention")?;
    Ok(pooled.l2_normalize())
}

/// Per-position saliency of `a_s: [B, P, P]`: the mean weight each key
/// position receives over all queries. `[B, P]`.
pub fn student_saliency(a_s: Var<'_>) -> Var<'_> {
    a_s.mean_axis(1)
}

/// [`student_saliency`] projected by `E_A` and L2-normalized.
pub fn project_student_attention<'t>(a_s: Var<'t>, embed: &Projection<'t>) -> Result<Var<'t>> {
    let s = a_s.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::ShapeMismatch(format!("student attention {s:?}")));
    }
    if embed.w.shape()[1] != s[1] {
        return Err(Error::ShapeMismatch(format!(
            "attention embedding expects {} positions, got {}",
            embed.w.shape()[1],
            s[1]
        )));
    }
    let saliency = student_saliency(a_s);
    let projected = embed.apply(saliency);
    ensure_nonzero_rows(projected, "student attention embedding")?;
    Ok(projected.l2_normalize())
}

/// `‖A_T⁺ − E_A(A_s)‖²` averaged over the batch. The teacher side is
/// detached so the gradient only reaches the student.
pub fn attention_distill_loss<'t>(teacher_plus: Var<'t>, student: Var<'t>) -> Result<Var<'t>> {
    let (ts, ss) = (teacher_plus.shape(), student.shape());
    if ts != ss || ts.len() != 2 {
        return Err(Error::ShapeMismatch(format!("teacher {ts:?} vs student {ss:?}")));
    }
    Ok(teacher_plus.detach().sub(student).sq_norm_last().mean())
}

/// Loss components of one step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_c_s: f64,
    pub l_c_t: f64,
    pub l_scd: f64,
    pub l_d: f64,
    pub l_e: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c_s: f64,
    pub l_c_t: f64,
    pub l_scd: f64,
    pub l_d: f64,
    pub l_e: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// `L = L_C^S + L_C^T − α·L_SCD + β·L_D`. `L_e` is carried but not added.
pub fn total_loss(c: LossComponents, alpha: f64, beta: f64) -> Result<LossBundle> {
    for (name, v) in [
        ("L_C_S", c.l_c_s),
        ("L_C_T", c.l_c_t),
        ("L_SCD", c.l_scd),
        ("L_D", c.l_d),
        ("L_e", c.l_e),
        ("alpha", alpha),
        ("beta", beta),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    Ok(LossBundle {
        l_c_s: c.l_c_s,
        l_c_t: c.l_c_t,
        l_scd: c.l_scd,
        l_d: c.l_d,
        l_e: c.l_e,
        alpha,
        beta,
        total: c.l_c_s + c.l_c_t - alpha * c.l_scd + beta * c.l_d,
    })
}

/// Differentiable counterpart of [`total_loss`]. Terms that are absent or
/// carry a zero weight are left out of the graph entirely.
pub fn total_loss_var<'t>(
    l_c_s: Option<Var<'t>>,
    l_c_t: Option<Var<'t>>,
    l_scd: Option<Var<'t>>,
    l_d: Option<Var<'t>>,
    alpha: f64,
    beta: f64,
) -> Option<Var<'t>> {
    let terms = [
        l_c_s,
        l_c_t,
        l_scd.filter(|_| alpha != 0.0).map(|v| v.scale(-alpha)),
        l_d.filter(|_| beta != 0.0).map(|v| v.scale(beta)),
    ];
    terms.into_iter().flatten().reduce(|a, b| a.add(b))
}
