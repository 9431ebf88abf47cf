//! Feature extractors: an adaptive graph-convolution pose network and a small
//! 3D-convolutional video network, plus the dropout/softmax classifier head.

use ndarray::{Array2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSet};

/// Tape handles for one graph-convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct GraphConvVars<'t> {
    /// `[d_out, d_in]`
    pub weight: Var<'t>,
    /// `[d_out]`
    pub bias: Var<'t>,
    /// Learned `[J, J]` offset added to the normalized adjacency.
    pub offset: Var<'t>,
    /// `[d_out, d_out, 1, 1, 3]`
    pub temporal: Var<'t>,
    /// `[d_out]`
    pub temporal_bias: Var<'t>,
}

impl<'t> GraphConvVars<'t> {
    pub fn from_bound(b: &Bound<'t>, prefix: &str) -> Self {
        Self {
            weight: b.var(&format!("{prefix}.w")),
            bias: b.var(&format!("{prefix}.b")),
            offset: b.var(&format!("{prefix}.offset")),
            temporal: b.var(&format!("{prefix}.tw")),
            temporal_bias: b.var(&format!("{prefix}.tb")),
        }
    }
}

fn check_adjacency(adj: &Array2<f64>, joints: usize) -> Result<()> {
    if adj.dim() != (joints, joints) {
        return Err(Error::ShapeMismatch(format!(
            "adjacency {:?} for {joints} joints",
            adj.dim()
        )));
    }
    for i in 0..joints {
        for j in 0..joints {
            if adj[[i, j]] < 0.0 {
                return Err(Error::InvalidConfig("adjacency has negative entries".into()));
            }
            if (adj[[i, j]] - adj[[j, i]]).abs() > 1e-12 {
                return Err(Error::InvalidConfig("adjacency is not symmetric".into()));
            }
        }
    }
    Ok(())
}

/// One adaptive graph-convolution layer over `x: [B, d_in, J, t]`.
///
/// `Â = rownorm(adj) + offset`; joints are aggregated with `Â`, channels mixed
/// with `weight`, then a kernel-3 same-padded temporal convolution is applied,
/// followed by ReLU when `relu` is set.
pub fn graph_conv<'t>(
    x: Var<'t>,
    adj: &Array2<f64>,
    p: &GraphConvVars<'t>,
    relu: bool,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!("graph_conv input {shape:?}, want [B, d, J, t]")));
    }
    let (bs, d_in, joints, t) = (shape[0], shape[1], shape[2], shape[3]);
    check_adjacency(adj, joints)?;
    let w_shape = p.weight.shape();
    if w_shape.len() != 2 || w_shape[1] != d_in {
        return Err(Error::ShapeMismatch(format!("weight {w_shape:?} for {d_in} input channels")));
    }
    if p.offset.shape() != [joints, joints] {
        return Err(Error::ShapeMismatch(format!("offset {:?} for {joints} joints", p.offset.shape())));
    }
    let d_out = w_shape[0];
    let tape = x.tape();
    let norm = crate::syndata::row_normalize(adj);
    let a_hat = tape.constant(norm.into_dyn()).add(p.offset);
    let aggregated = a_hat
        .matmul(x.permute(&[2, 0, 1, 3]).reshape(&[joints, bs * d_in * t]))
        .reshape(&[joints, bs, d_in, t])
        .permute(&[1, 2, 0, 3]);
    let mixed = aggregated.channel_mix(p.weight, p.bias);
    let out = mixed
        .reshape(&[bs, d_out, 1, joints, t])
        .conv3d(p.temporal, p.temporal_bias)
        .reshape(&[bs, d_out, joints, t]);
    Ok(if relu { out.relu() } else { out })
}

/// Architecture of the skeleton network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseArch {
    pub joints: usize,
    pub widths: Vec<usize>,
    /// Temporal average-pooling factor after each layer.
    pub temporal_pool: usize,
}

impl Default for PoseArch {
    fn default() -> Self {
        Self {
            joints: 13,
            widths: vec![32, 64],
            temporal_pool: 2,
        }
    }
}

/// Pose features for a batch.
#[derive(Clone, Copy, Debug)]
pub struct PoseFeature<'t> {
    /// `[B, d_p, t']`: per-time latent, averaged over joints.
    pub h_star: Var<'t>,
    /// `[B, d_p]`: `h_star` averaged over time; the pre-logit teacher feature.
    pub pooled: Var<'t>,
}

impl PoseArch {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }

    pub fn output_frames(&self, pose_frames: usize) -> Result<usize> {
        let mut t = pose_frames;
        for _ in &self.widths {
            if !t.is_multiple_of(self.temporal_pool) {
                return Err(Error::ShapeMismatch(format!(
                    "{pose_frames} pose frames not divisible through {} pooling layers of {}",
                    self.widths.len(),
                    self.temporal_pool
                )));
            }
            t /= self.temporal_pool;
        }
        Ok(t)
    }

    pub fn init(&self, prefix: &str, init: &mut Init<'_, impl Rng>, params: &mut ParamSet) {
        let mut d_in = 3;
        for (i, &d_out) in self.widths.iter().enumerate() {
            let name = format!("{prefix}.gc{}", i + 1);
            params.insert(format!("{name}.w"), init.kaiming(&[d_out, d_in], d_in));
            params.insert(format!("{name}.b"), init.zeros(&[d_out]));
            params.insert(format!("{name}.offset"), init.zeros(&[self.joints, self.joints]));
            params.insert(format!("{name}.tw"), init.kaiming(&[d_out, d_out, 1, 1, 3], d_out * 3));
            params.insert(format!("{name}.tb"), init.zeros(&[d_out]));
            d_in = d_out;
        }
    }

    /// `poses: [B, 3, J, t_p]` to pose features.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        prefix: &str,
        poses: Var<'t>,
        adj: &Array2<f64>,
    ) -> Result<PoseFeature<'t>> {
        let shape = poses.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.joints {
            return Err(Error::ShapeMismatch(format!(
                "pose batch {shape:?}, want [B, 3, {}, t]",
                self.joints
            )));
        }
        self.output_frames(shape[3])?;
        let mut x = poses;
        for i in 0..self.widths.len() {
            let vars = GraphConvVars::from_bound(b, &format!("{prefix}.gc{}", i + 1));
            x = graph_conv(x, adj, &vars, true)?;
            x = temporal_avg_pool(x, self.temporal_pool);
        }
        let h_star = x.mean_axis(2);
        let pooled = h_star.mean_axis(2);
        Ok(PoseFeature { h_star, pooled })
    }
}

/// Average pooling with window = stride = `k` along the last axis of `[B, d, J, t]`.
fn temporal_avg_pool(x: Var<'_>, k: usize) -> Var<'_> {
    if k == 1 {
        return x;
    }
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2], s[3] / k, k]).mean_axis(4)
}

/// Architecture of the video network: 3×3×3 conv, ReLU, max-pool per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Pooling window `[t, h, w]` after each block.
    pub pools: Vec<[usize; 3]>,
}

impl Default for VideoArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            pools: vec![[1, 2, 2], [2, 2, 2], [2, 1, 1], [1, 1, 1]],
        }
    }
}

impl VideoArch {
    pub fn channels(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    /// `(c, t, m, n)` produced for a `frames × height × width` clip.
    pub fn output_dims(&self, frames: usize, height: usize, width: usize) -> Result<(usize, usize, usize, usize)> {
        if self.widths.len() != self.pools.len() || self.widths.is_empty() {
            return Err(Error::InvalidConfig("video widths and pools must pair up".into()));
        }
        let mut dims = [frames, height, width];
        for pool in &self.pools {
            for (d, &p) in dims.iter_mut().zip(pool) {
                if p == 0 || *d % p != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "clip {frames}×{height}×{width} does not pool evenly through {:?}",
                        self.pools
                    )));
                }
                *d /= p;
            }
        }
        Ok((self.channels(), dims[0], dims[1], dims[2]))
    }

    pub fn init(&self, prefix: &str, init: &mut Init<'_, impl Rng>, params: &mut ParamSet) {
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.widths.iter().enumerate() {
            params.insert(
                format!("{prefix}.conv{}.w", i + 1),
                init.kaiming(&[c_out, c_in, 3, 3, 3], c_in * 27),
            );
            params.insert(format!("{prefix}.conv{}.b", i + 1), init.zeros(&[c_out]));
            c_in = c_out;
        }
    }

    /// `clips: [B, ch, T, H, W]` to the feature map `[B, c, t, m, n]`.
    pub fn forward<'t>(&self, b: &Bound<'t>, prefix: &str, clips: Var<'t>) -> Result<Var<'t>> {
        let s = clips.shape();
        if s.len() != 5 || s[1] != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "clip batch {s:?}, want [B, {}, T, H, W]",
                self.in_channels
            )));
        }
        self.output_dims(s[2], s[3], s[4])?;
        let mut x = clips;
        for (i, pool) in self.pools.iter().enumerate() {
            let w = b.var(&format!("{prefix}.conv{}.w", i + 1));
            let bias = b.var(&format!("{prefix}.conv{}.b", i + 1));
            x = x.conv3d(w, bias).relu().max_pool3d(*pool);
        }
        Ok(x)
    }
}

/// Dropout followed by a linear map to class logits; softmax gives probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub dropout_rate: f64,
}

impl Default for ClassifierHead {
    fn default() -> Self {
        Self { dropout_rate: 0.3 }
    }
}

impl ClassifierHead {
    pub fn init(&self, prefix: &str, in_dim: usize, classes: usize, init: &mut Init<'_, impl Rng>, params: &mut ParamSet) {
        params.insert(format!("{prefix}.w"), init.normal(&[classes, in_dim], 0.01));
        params.insert(format!("{prefix}.b"), init.zeros(&[classes]));
    }

    /// `x: [B, d]` to logits `[B, C]`. Dropout is active only when an RNG is supplied.
    pub fn logits<'t>(&self, b: &Bound<'t>, prefix: &str, x: Var<'t>, dropout: Option<&mut impl Rng>) -> Var<'t> {
        let x = match dropout {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let shape = x.shape();
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.mul(x.tape().constant(Tensor::from_shape_vec(IxDyn(&shape), mask).unwrap()))
            }
            _ => x,
        };
        x.linear(b.var(&format!("{prefix}.w")), b.var(&format!("{prefix}.b")))
    }
}

/// Mean cross-entropy (natural log) of logits `[B, C]` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let shape = logits.shape();
    let mut onehot = Tensor::zeros(IxDyn(&shape));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    logits
        .log_softmax()
        .mul(logits.tape().constant(onehot))
        .sum()
        .scale(-1.0 / labels.len() as f64)
}
