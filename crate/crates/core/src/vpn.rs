//! Pose-driven attention over video feature maps and the self-attention
//! student that learns to imitate it.
//!
//! Shapes use a leading batch axis: feature maps are `[B, c, t, m, n]`,
//! attention maps `[B, t, m, n]`, spatial factors `z1: [B, m·n]`, temporal
//! factors `z2: [B, t]`, student attention `[B, P, P]` with `P = t·m·n`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::{ClassifierHead, PoseArch, PoseFeature, VideoArch};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSet};
use crate::syndata::GenConfig;

/// Spatial (`z1`, softmax over positions) and temporal (`z2`, sigmoid per
/// frame) attention factors.
#[derive(Clone, Copy, Debug)]
pub struct AttentionFactors<'t> {
    pub z1: Var<'t>,
    pub z2: Var<'t>,
}

/// Coupler weights: dense maps from the time-pooled pose feature.
#[derive(Clone, Copy, Debug)]
pub struct StcVars<'t> {
    /// `[m·n, d_p]`
    pub spatial_w: Var<'t>,
    pub spatial_b: Var<'t>,
    /// `[t, d_p]`
    pub temporal_w: Var<'t>,
    pub temporal_b: Var<'t>,
}

impl<'t> StcVars<'t> {
    pub fn from_bound(b: &Bound<'t>, prefix: &str) -> Self {
        Self {
            spatial_w: b.var(&format!("{prefix}.spatial.w")),
            spatial_b: b.var(&format!("{prefix}.spatial.b")),
            temporal_w: b.var(&format!("{prefix}.temporal.w")),
            temporal_b: b.var(&format!("{prefix}.temporal.b")),
        }
    }
}

/// Spatio-temporal coupler. Returns the factors and the coupled map
/// `A[τ, i, j] = z2[τ] · z1[i·n + j]`: `z1` inflated along time, `z2` along
/// space, multiplied elementwise.
pub fn stc_forward<'t>(
    h: &PoseFeature<'t>,
    target: (usize, usize, usize),
    p: &StcVars<'t>,
) -> Result<(AttentionFactors<'t>, Var<'t>)> {
    let (t, m, n) = target;
    let sw = p.spatial_w.shape();
    let tw = p.temporal_w.shape();
    if sw[0] != m * n || tw[0] != t {
        return Err(Error::ShapeMismatch(format!(
            "coupler produces {}×{} positions and {} frames, feature map is {t}×{m}×{n}",
            sw[0], 1, tw[0]
        )));
    }
    let bs = h.pooled.shape()[0];
    let z1 = h.pooled.linear(p.spatial_w, p.spatial_b).softmax();
    let z2 = h.pooled.linear(p.temporal_w, p.temporal_b).sigmoid();
    let a = z2
        .reshape(&[bs, t, 1])
        .mul(z1.reshape(&[bs, 1, m * n]))
        .reshape(&[bs, t, m, n]);
    Ok((AttentionFactors { z1, z2 }, a))
}

/// `f' = f ⊙ A + f`, with `A` broadcast over channels.
pub fn modulate<'t>(f: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    let fs = f.shape();
    let as_ = a.shape();
    if fs.len() != 5 || as_.len() != 4 || fs[0] != as_[0] || fs[2..] != as_[1..] {
        return Err(Error::ShapeMismatch(format!(
            "attention {as_:?} does not match feature map {fs:?}"
        )));
    }
    let a5 = a.reshape(&[as_[0], 1, as_[1], as_[2], as_[3]]);
    Ok(f.mul(a5).add(f))
}

/// Linear projections into the shared spaces.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> Projection<'t> {
    pub fn from_bound(b: &Bound<'t>, prefix: &str) -> Self {
        Self {
            w: b.var(&format!("{prefix}.w")),
            b: b.var(&format!("{prefix}.b")),
        }
    }

    pub fn apply(&self, x: Var<'t>) -> Var<'t> {
        x.linear(self.w, self.b)
    }
}

/// Fails when any row of `x: [B, d]` has (near) zero norm.
pub fn ensure_nonzero_rows(x: Var<'_>, what: &str) -> Result<()> {
    let v = x.value();
    for row in v.rows() {
        if row.dot(&row).sqrt() < 1e-12 {
            return Err(Error::ZeroNorm(what.to_string()));
        }
    }
    Ok(())
}

/// Spatial embedding loss, averaged over the batch:
/// `‖normalize(E_v(mean_t f)) − normalize(E_p(z1))‖²`, in `[0, 4]`.
pub fn spatial_embedding_loss<'t>(
    f: Var<'t>,
    z1: Var<'t>,
    video_proj: &Projection<'t>,
    pose_proj: &Projection<'t>,
) -> Result<Var<'t>> {
    let fs = f.shape();
    if fs.len() != 5 {
        return Err(Error::ShapeMismatch(format!("feature map {fs:?}")));
    }
    let (bs, c, m, n) = (fs[0], fs[1], fs[3], fs[4]);
    let zs = z1.shape();
    if zs != [bs, m * n] {
        return Err(Error::ShapeMismatch(format!("z1 {zs:?} for {m}×{n} positions")));
    }
    let pooled = f.mean_axis(2).reshape(&[bs, c * m * n]);
    let u_raw = video_proj.apply(pooled);
    let w_raw = pose_proj.apply(z1);
    ensure_nonzero_rows(u_raw, "video spatial embedding")?;
    ensure_nonzero_rows(w_raw, "pose spatial embedding")?;
    let diff = u_raw.l2_normalize().sub(w_raw.l2_normalize());
    Ok(diff.sq_norm_last().mean())
}

/// Self-attention (non-local) block weights.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttnVars<'t> {
    pub query: Projection<'t>,
    pub key: Projection<'t>,
    pub value: Projection<'t>,
    /// Restores `d_v` back to `c` channels before the residual.
    pub restore: Projection<'t>,
}

impl<'t> SelfAttnVars<'t> {
    pub fn from_bound(b: &Bound<'t>, prefix: &str) -> Self {
        Self {
            query: Projection::from_bound(b, &format!("{prefix}.q")),
            key: Projection::from_bound(b, &format!("{prefix}.k")),
            value: Projection::from_bound(b, &format!("{prefix}.v")),
            restore: Projection::from_bound(b, &format!("{prefix}.o")),
        }
    }
}

/// Non-local block over `f: [B, c, t, m, n]`.
///
/// Returns the row-softmax attention `A_s = softmax(QᵀK / √d_qk)` of shape
/// `[B, P, P]` (query rows, key columns) and `f + W_o (V A_sᵀ)`.
pub fn self_attention_forward<'t>(f: Var<'t>, p: &SelfAttnVars<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let fs = f.shape();
    if fs.len() != 5 {
        return Err(Error::ShapeMismatch(format!("feature map {fs:?}")));
    }
    let (bs, c) = (fs[0], fs[1]);
    let positions = fs[2] * fs[3] * fs[4];
    let d_qk = p.query.w.shape()[0];
    let d_v = p.value.w.shape()[0];
    if p.query.w.shape()[1] != c || p.restore.w.shape() != [c, d_v] {
        return Err(Error::ShapeMismatch(format!(
            "attention weights do not fit {c} channels"
        )));
    }
    let q = f.channel_mix(p.query.w, p.query.b).reshape(&[bs, d_qk, positions]);
    let k = f.channel_mix(p.key.w, p.key.b).reshape(&[bs, d_qk, positions]);
    let v = f.channel_mix(p.value.w, p.value.b).reshape(&[bs, d_v, positions]);
    let attn = q
        .permute(&[0, 2, 1])
        .bmm(k)
        .scale(1.0 / (d_qk as f64).sqrt())
        .softmax();
    let mut out_shape = fs.clone();
    out_shape[1] = d_v;
    let gathered = v.bmm(attn.permute(&[0, 2, 1])).reshape(&out_shape);
    let out = gathered.channel_mix(p.restore.w, p.restore.b).add(f);
    Ok((attn, out))
}

/// Dimensions of the shared embedding spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSpaces {
    pub se_dim: usize,
    pub feat_dim: usize,
    pub att_dim: usize,
}

impl Default for EmbeddingSpaces {
    fn default() -> Self {
        Self {
            se_dim: 32,
            feat_dim: 64,
            att_dim: 256,
        }
    }
}

/// Weights of the loss used to train a video-pose teacher on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpnLossWeights {
    pub entropy: f64,
    pub embedding: f64,
    /// Coefficient of `‖z2‖₁`; zero disables the term.
    pub attention_reg: f64,
}

impl Default for VpnLossWeights {
    fn default() -> Self {
        Self {
            entropy: 1.0,
            embedding: 0.1,
            attention_reg: 0.01,
        }
    }
}

/// Full architecture description shared by every network in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    pub clip_frames: usize,
    pub clip_height: usize,
    pub clip_width: usize,
    pub pose_frames: usize,
    pub video: VideoArch,
    pub pose: PoseArch,
    pub head: ClassifierHead,
    pub spaces: EmbeddingSpaces,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            clip_frames: 16,
            clip_height: 32,
            clip_width: 32,
            pose_frames: 20,
            video: VideoArch::default(),
            pose: PoseArch::default(),
            head: ClassifierHead::default(),
            spaces: EmbeddingSpaces::default(),
        }
    }
}

impl ModelConfig {
    /// `(c, t, m, n)` of the video feature map.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize, usize)> {
        self.video
            .output_dims(self.clip_frames, self.clip_height, self.clip_width)
    }

    pub fn attention_positions(&self) -> Result<usize> {
        let (_, t, m, n) = self.feature_dims()?;
        Ok(t * m * n)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, _, _, _) = self.feature_dims()?;
        self.pose.output_frames(self.pose_frames)?;
        if c < 8 {
            return Err(Error::InvalidConfig("video feature map needs at least 8 channels".into()));
        }
        let p = self.attention_positions()?;
        let d = self.spaces.att_dim;
        if d == 0 || p % d != 0 {
            return Err(Error::InvalidConfig(format!(
                "attention embedding size {d} must divide the {p} attention positions"
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.spaces.feat_dim != self.pose.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "feature embedding size {} must equal the pose feature size {}",
                self.spaces.feat_dim,
                self.pose.feature_dim()
            )));
        }
        if self.video.in_channels == 0 || self.spaces.se_dim == 0 {
            return Err(Error::InvalidConfig("zero-sized input or embedding".into()));
        }
        Ok(())
    }

    /// Copies the input geometry and class count of a dataset.
    pub fn adapt_to(&mut self, data: &GenConfig) {
        self.classes = data.class_count;
        self.clip_frames = data.frames;
        self.clip_height = data.height;
        self.clip_width = data.width;
        self.pose_frames = data.pose_frames;
        self.video.in_channels = data.channels;
        self.pose.joints = data.joints;
    }
}

/// Pose-only classifier: graph-convolution backbone and head.
pub struct PoseNetOutput<'t> {
    pub feature: PoseFeature<'t>,
    pub logits: Var<'t>,
}

pub fn init_pose_net(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    let mut init = Init::new(rng);
    cfg.pose.init("pose", &mut init, &mut params);
    cfg.head.init("head", cfg.pose.feature_dim(), cfg.classes, &mut init, &mut params);
    params.quantize_f32();
    params
}

pub fn pose_net_forward<'t>(
    cfg: &ModelConfig,
    b: &Bound<'t>,
    poses: Var<'t>,
    adj: &Array2<f64>,
    dropout: Option<&mut impl Rng>,
) -> Result<PoseNetOutput<'t>> {
    let feature = cfg.pose.forward(b, "pose", poses, adj)?;
    let logits = cfg.head.logits(b, "head", feature.pooled, dropout);
    Ok(PoseNetOutput { feature, logits })
}

/// Video-pose teacher: video backbone, pose backbone, coupler, modulation,
/// head, and optionally the spatial embedding.
pub struct VpnOutput<'t> {
    pub factors: AttentionFactors<'t>,
    pub attention: Var<'t>,
    pub modulated: Var<'t>,
    pub logits: Var<'t>,
    /// Present only when the spatial embedding is enabled.
    pub embedding_loss: Option<Var<'t>>,
}

/// Spatial-embedding projections are created only when `with_se` is set.
pub fn init_vpn(cfg: &ModelConfig, with_se: bool, rng: &mut impl Rng) -> Result<ParamSet> {
    let (c, t, m, n) = cfg.feature_dims()?;
    let d_p = cfg.pose.feature_dim();
    let mut params = ParamSet::new();
    let mut init = Init::new(rng);
    cfg.video.init("video", &mut init, &mut params);
    cfg.pose.init("pose", &mut init, &mut params);
    params.insert("stc.spatial.w", init.normal(&[m * n, d_p], 0.01));
    params.insert("stc.spatial.b", init.zeros(&[m * n]));
    params.insert("stc.temporal.w", init.normal(&[t, d_p], 0.01));
    params.insert("stc.temporal.b", init.zeros(&[t]));
    if with_se {
        let se = cfg.spaces.se_dim;
        params.insert("se.video.w", init.normal(&[se, c * m * n], (1.0 / (c * m * n) as f64).sqrt()));
        params.insert("se.video.b", init.zeros(&[se]));
        params.insert("se.pose.w", init.normal(&[se, m * n], 1.0));
        params.insert("se.pose.b", init.zeros(&[se]));
    }
    cfg.head.init("head", c, cfg.classes, &mut init, &mut params);
    params.quantize_f32();
    Ok(params)
}

pub fn vpn_forward<'t>(
    cfg: &ModelConfig,
    b: &Bound<'t>,
    clips: Var<'t>,
    poses: Var<'t>,
    adj: &Array2<f64>,
    with_se: bool,
    dropout: Option<&mut impl Rng>,
) -> Result<VpnOutput<'t>> {
    let f = cfg.video.forward(b, "video", clips)?;
    let fs = f.shape();
    let h = cfg.pose.forward(b, "pose", poses, adj)?;
    let (factors, attention) = stc_forward(&h, (fs[2], fs[3], fs[4]), &StcVars::from_bound(b, "stc"))?;
    let modulated = modulate(f, attention)?;
    let pooled = modulated.reshape(&[fs[0], fs[1], fs[2] * fs[3] * fs[4]]).mean_axis(2);
    let logits = cfg.head.logits(b, "head", pooled, dropout);
    let embedding_loss = if with_se {
        Some(spatial_embedding_loss(
            f,
            factors.z1,
            &Projection::from_bound(b, "se.video"),
            &Projection::from_bound(b, "se.pose"),
        )?)
    } else {
        None
    };
    Ok(VpnOutput {
        factors,
        attention,
        modulated,
        logits,
        embedding_loss,
    })
}

/// RGB student: video backbone, self-attention block, head, and the
/// feature (`E_F`) and attention (`E_A`) projections used for distillation.
pub struct StudentOutput<'t> {
    /// Backbone feature map before self-attention.
    pub features: Var<'t>,
    pub attention: Var<'t>,
    pub refined: Var<'t>,
    pub logits: Var<'t>,
}

pub fn init_student(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    let (c, _, _, _) = cfg.feature_dims()?;
    let positions = cfg.attention_positions()?;
    let (d_qk, d_v) = (c / 8, c / 2);
    let mut params = ParamSet::new();
    let mut init = Init::new(rng);
    cfg.video.init("video", &mut init, &mut params);
    for (name, d) in [("attn.q", d_qk), ("attn.k", d_qk), ("attn.v", d_v)] {
        params.insert(format!("{name}.w"), init.normal(&[d, c], (1.0 / c as f64).sqrt()));
        params.insert(format!("{name}.b"), init.zeros(&[d]));
    }
    params.insert("attn.o.w", init.normal(&[c, d_v], 0.01));
    params.insert("attn.o.b", init.zeros(&[c]));
    cfg.head.init("head", c, cfg.classes, &mut init, &mut params);
    let feat = cfg.spaces.feat_dim;
    params.insert("embed_f.w", init.normal(&[feat, c], (1.0 / c as f64).sqrt()));
    params.insert("embed_f.b", init.zeros(&[feat]));
    let att = cfg.spaces.att_dim;
    params.insert("embed_a.w", init.normal(&[att, positions], (1.0 / positions as f64).sqrt()));
    params.insert("embed_a.b", init.zeros(&[att]));
    params.quantize_f32();
    Ok(params)
}

pub fn student_forward<'t>(
    cfg: &ModelConfig,
    b: &Bound<'t>,
    clips: Var<'t>,
    dropout: Option<&mut impl Rng>,
) -> Result<StudentOutput<'t>> {
    let features = cfg.video.forward(b, "video", clips)?;
    let (attention, refined) = self_attention_forward(features, &SelfAttnVars::from_bound(b, "attn"))?;
    let s = refined.shape();
    let pooled = refined.reshape(&[s[0], s[1], s[2] * s[3] * s[4]]).mean_axis(2);
    let logits = cfg.head.logits(b, "head", pooled, dropout);
    Ok(StudentOutput {
        features,
        attention,
        refined,
        logits,
    })
}

/// Global average of a `[B, c, t, m, n]` map: `[B, c]`.
pub fn global_pool(f: Var<'_>) -> Var<'_> {
    let s = f.shape();
    f.reshape(&[s[0], s[1], s[2] * s[3] * s[4]]).mean_axis(2)
}
