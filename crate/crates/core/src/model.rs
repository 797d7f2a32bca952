//! The temporal heterogeneous graph network.
//!
//! Per clip: both modalities are projected to width `d`, refined by their own
//! stack of graph layers `relu(A_bar X W)`, and the final video node states
//! are attended into the audio nodes along inter-modal edges. Attention
//! pooling over the fused audio nodes feeds the classifier; pooling over the
//! pre-fusion audio and video nodes gives the per-clip embeddings used by
//! the contrastive objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{project, FeatureSequence, Projection};
use crate::graph::{Adjacency, TemporalHeteroGraph};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub d: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_dim: 128,
            video_dim: 1024,
            d: 128,
            hidden: 512,
            layers: 4,
            num_classes: 33,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("audio_dim", self.audio_dim),
            ("video_dim", self.video_dim),
            ("d", self.d),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }
}

/// Number of scalar parameters.
pub fn param_count(params: &ParamStore) -> usize {
    params.iter().map(|(_, t)| t.len()).sum()
}

/// Glorot-uniform matrix, bounds `±sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

pub mod names {
    pub const PROJ_AUDIO_W: &str = "proj.audio.weight";
    pub const PROJ_AUDIO_B: &str = "proj.audio.bias";
    pub const PROJ_VIDEO_W: &str = "proj.video.weight";
    pub const PROJ_VIDEO_B: &str = "proj.video.bias";
    pub const GAT_QUERY: &str = "gat.query";
    pub const GAT_KEY: &str = "gat.key";
    pub const GAT_VALUE: &str = "gat.value";
    pub const GAT_ATTN_QUERY: &str = "gat.attn_query";
    pub const GAT_ATTN_KEY: &str = "gat.attn_key";
    pub const POOL_AUDIO_PROJ: &str = "pool_audio.proj";
    pub const POOL_AUDIO_SCORE: &str = "pool_audio.score";
    pub const POOL_VIDEO_PROJ: &str = "pool_video.proj";
    pub const POOL_VIDEO_SCORE: &str = "pool_video.score";
    pub const CLASSIFIER_W: &str = "classifier.weight";
    pub const CLASSIFIER_B: &str = "classifier.bias";

    pub fn gnn_audio(layer: usize) -> String {
        format!("gnn_a.{layer}.weight")
    }

    pub fn gnn_video(layer: usize) -> String {
        format!("gnn_v.{layer}.weight")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThgnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ThgnModel {
    /// Seeded Glorot initialisation; biases start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            audio_dim,
            video_dim,
            d,
            hidden: h,
            layers,
            num_classes: c,
        } = config;
        let mut p = ParamStore::new();
        p.insert(names::PROJ_AUDIO_W, glorot(&mut rng, audio_dim, d));
        p.insert(names::PROJ_AUDIO_B, Tensor::zeros(&[d]));
        p.insert(names::PROJ_VIDEO_W, glorot(&mut rng, video_dim, d));
        p.insert(names::PROJ_VIDEO_B, Tensor::zeros(&[d]));
        for l in 0..layers {
            let fan_in = if l == 0 { d } else { h };
            p.insert(names::gnn_audio(l), glorot(&mut rng, fan_in, h));
        }
        for l in 0..layers {
            let fan_in = if l == 0 { d } else { h };
            p.insert(names::gnn_video(l), glorot(&mut rng, fan_in, h));
        }
        p.insert(names::GAT_QUERY, glorot(&mut rng, h, h));
        p.insert(names::GAT_KEY, glorot(&mut rng, h, h));
        p.insert(names::GAT_VALUE, glorot(&mut rng, h, h));
        p.insert(names::GAT_ATTN_QUERY, glorot(&mut rng, h, 1));
        p.insert(names::GAT_ATTN_KEY, glorot(&mut rng, h, 1));
        p.insert(names::POOL_AUDIO_PROJ, glorot(&mut rng, h, h));
        p.insert(names::POOL_AUDIO_SCORE, glorot(&mut rng, h, 1));
        p.insert(names::POOL_VIDEO_PROJ, glorot(&mut rng, h, h));
        p.insert(names::POOL_VIDEO_SCORE, glorot(&mut rng, h, 1));
        p.insert(names::CLASSIFIER_W, glorot(&mut rng, h, c));
        p.insert(names::CLASSIFIER_B, Tensor::zeros(&[c]));
        Ok(ThgnModel { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    /// Records every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let mut all = Vec::with_capacity(self.params.len());
        let mut var = |name: &str| -> Result<Var> {
            let v = tape.param(self.params.require(name)?.clone());
            all.push((name.to_string(), v));
            Ok(v)
        };
        let proj_audio = Projection {
            weight: var(names::PROJ_AUDIO_W)?,
            bias: var(names::PROJ_AUDIO_B)?,
        };
        let proj_video = Projection {
            weight: var(names::PROJ_VIDEO_W)?,
            bias: var(names::PROJ_VIDEO_B)?,
        };
        let gnn_audio = (0..self.config.layers)
            .map(|l| var(&names::gnn_audio(l)))
            .collect::<Result<Vec<_>>>()?;
        let gnn_video = (0..self.config.layers)
            .map(|l| var(&names::gnn_video(l)))
            .collect::<Result<Vec<_>>>()?;
        let gat = GatParams {
            query: var(names::GAT_QUERY)?,
            key: var(names::GAT_KEY)?,
            value: var(names::GAT_VALUE)?,
            attn_query: var(names::GAT_ATTN_QUERY)?,
            attn_key: var(names::GAT_ATTN_KEY)?,
        };
        let pool_audio = PoolParams {
            proj: var(names::POOL_AUDIO_PROJ)?,
            score: var(names::POOL_AUDIO_SCORE)?,
        };
        let pool_video = PoolParams {
            proj: var(names::POOL_VIDEO_PROJ)?,
            score: var(names::POOL_VIDEO_SCORE)?,
        };
        let classifier = (var(names::CLASSIFIER_W)?, var(names::CLASSIFIER_B)?);
        Ok(BoundModel {
            proj_audio,
            proj_video,
            gnn_audio,
            gnn_video,
            gat,
            pool_audio,
            pool_video,
            classifier,
            all,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    /// Query half of the additive attention vector (`h x 1`).
    pub attn_query: Var,
    /// Key half of the additive attention vector (`h x 1`).
    pub attn_key: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolParams {
    pub proj: Var,
    pub score: Var,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub proj_audio: Projection,
    pub proj_video: Projection,
    pub gnn_audio: Vec<Var>,
    pub gnn_video: Vec<Var>,
    pub gat: GatParams,
    pub pool_audio: PoolParams,
    pub pool_video: PoolParams,
    pub classifier: (Var, Var),
    /// `(name, var)` in parameter-store order.
    pub all: Vec<(String, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// One graph layer: `act(A_bar X Psi)`.
pub fn gnn_layer(tape: &mut Tape, x: Var, a_bar: Var, psi: Var, act: Activation) -> Result<Var> {
    let (k_in, k_out) = (tape.value(psi).rows(), tape.value(psi).cols());
    // contract over the narrower side first
    let mixed = if k_in <= k_out {
        let ax = tape.matmul(a_bar, x)?;
        tape.matmul(ax, psi)?
    } else {
        let xp = tape.matmul(x, psi)?;
        tape.matmul(a_bar, xp)?
    };
    Ok(act.apply(tape, mixed))
}

/// Attends video node states into audio nodes along inter-modal edges.
///
/// For audio node `i` with video neighbors `S_i`:
/// `e_ij = leaky_relu(a_q . q_i + a_k . k_j) + ln(A_bar[i][j])`,
/// `alpha_i = softmax_{S_i}(e_i)`, `out_i = x_i + sum_j alpha_ij v_j`,
/// where `q = X_a W_q`, `k = X_v W_k`, `v = X_v W_v`. Audio nodes without
/// neighbors pass through unchanged.
pub fn gat_av(tape: &mut Tape, xa: Var, xv: Var, inter: &Adjacency, params: &GatParams) -> Result<Var> {
    Ok(gat_av_with_attention(tape, xa, xv, inter, params)?.0)
}

/// [`gat_av`] that also returns the attention matrix (`P_a x P_v`).
pub fn gat_av_with_attention(
    tape: &mut Tape,
    xa: Var,
    xv: Var,
    inter: &Adjacency,
    params: &GatParams,
) -> Result<(Var, Var)> {
    let (pa, pv) = (tape.value(xa).rows(), tape.value(xv).rows());
    if inter.rows() != pa || inter.cols() != pv {
        return Err(Error::shape(
            "gat_av",
            &[pa, pv],
            &[inter.rows(), inter.cols()],
        ));
    }
    let q = tape.matmul(xa, params.query)?;
    let k = tape.matmul(xv, params.key)?;
    let v = tape.matmul(xv, params.value)?;
    let sq = tape.matmul(q, params.attn_query)?;
    let sk = tape.matmul(k, params.attn_key)?;
    let sk_row = tape.transpose(sk)?;
    let ones_v = tape.constant(Tensor::ones(&[1, pv]));
    let ones_a = tape.constant(Tensor::ones(&[pa, 1]));
    let q_part = tape.matmul(sq, ones_v)?;
    let k_part = tape.matmul(ones_a, sk_row)?;
    let pre = tape.add(q_part, k_part)?;
    let act = tape.leaky_relu(pre);
    let bias = tape.constant(Tensor::matrix(pa, pv, inter.log_normalized.clone())?);
    let logits = tape.add(act, bias)?;
    let alpha = tape.masked_softmax_rows(logits, &inter.mask)?;
    let msg = tape.matmul(alpha, v)?;
    Ok((tape.add(xa, msg)?, alpha))
}

/// Additive attention pooling of `N x h` node states to `1 x h`:
/// `s_i = w . tanh(x_i W_p)`, `alpha = softmax(s)`, result `sum_i alpha_i x_i`.
pub fn attention_pool(tape: &mut Tape, x: Var, params: &PoolParams) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::Domain {
            op: "attention_pool",
            detail: "no nodes to pool".into(),
        });
    }
    let hidden = tape.matmul(x, params.proj)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, params.score)?;
    let scores = tape.transpose(scores)?;
    let alpha = tape.softmax_rows(scores)?;
    tape.matmul(alpha, x)
}

/// Borrowed inputs for one clip.
#[derive(Debug, Clone, Copy)]
pub struct ClipInput<'a> {
    pub audio: &'a FeatureSequence,
    pub video: &'a FeatureSequence,
    pub graph: &'a TemporalHeteroGraph,
}

/// Per-clip `1 x h` outputs.
#[derive(Debug, Clone, Copy)]
pub struct ClipVars {
    pub fused_embed: Var,
    pub audio_embed: Var,
    pub video_embed: Var,
}

/// Batch outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `B x C`.
    pub logits: Var,
    /// `B x h`, pre-fusion pooled audio.
    pub audio_embed: Var,
    /// `B x h`, pooled video.
    pub video_embed: Var,
}

/// Forward values for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub audio_embed: Tensor,
    pub video_embed: Tensor,
}

pub fn clip_forward(tape: &mut Tape, model: &BoundModel, clip: ClipInput<'_>) -> Result<ClipVars> {
    let g = clip.graph;
    if g.audio_nodes != clip.audio.num_segments() || g.video_nodes != clip.video.num_segments() {
        return Err(Error::shape(
            "clip_forward",
            &[clip.audio.num_segments(), clip.video.num_segments()],
            &[g.audio_nodes, g.video_nodes],
        ));
    }
    let a_bar = tape.constant(g.audio.normalized.clone());
    let v_bar = tape.constant(g.video.normalized.clone());

    let mut xa = project(tape, clip.audio, model.proj_audio)?;
    for &psi in &model.gnn_audio {
        xa = gnn_layer(tape, xa, a_bar, psi, Activation::Relu)?;
    }
    let mut xv = project(tape, clip.video, model.proj_video)?;
    for &psi in &model.gnn_video {
        xv = gnn_layer(tape, xv, v_bar, psi, Activation::Relu)?;
    }
    let fused = gat_av(tape, xa, xv, &g.inter, &model.gat)?;
    Ok(ClipVars {
        fused_embed: attention_pool(tape, fused, &model.pool_audio)?,
        audio_embed: attention_pool(tape, xa, &model.pool_audio)?,
        video_embed: attention_pool(tape, xv, &model.pool_video)?,
    })
}

/// Runs every clip independently and stacks the results.
pub fn forward(tape: &mut Tape, model: &BoundModel, batch: &[ClipInput<'_>]) -> Result<ForwardVars> {
    if batch.is_empty() {
        return Err(Error::Domain {
            op: "model_forward",
            detail: "empty batch".into(),
        });
    }
    let mut fused = Vec::with_capacity(batch.len());
    let mut audio = Vec::with_capacity(batch.len());
    let mut video = Vec::with_capacity(batch.len());
    for clip in batch {
        let out = clip_forward(tape, model, *clip)?;
        fused.push(out.fused_embed);
        audio.push(out.audio_embed);
        video.push(out.video_embed);
    }
    let pooled = tape.concat_rows(&fused)?;
    let (w, b) = model.classifier;
    let logits = tape.matmul(pooled, w)?;
    let logits = tape.add(logits, b)?;
    Ok(ForwardVars {
        logits,
        audio_embed: tape.concat_rows(&audio)?,
        video_embed: tape.concat_rows(&video)?,
    })
}

impl ThgnModel {
    /// Forward pass without gradients.
    pub fn predict(&self, batch: &[ClipInput<'_>], tape: &mut Tape) -> Result<ForwardOutput> {
        let bound = self.bind(tape)?;
        let out = forward(tape, &bound, batch)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            audio_embed: tape.value(out.audio_embed).clone(),
            video_embed: tape.value(out.video_embed).clone(),
        })
    }
}
