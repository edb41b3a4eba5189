//! Visual adaptor: compress per-frame patch features to one vector per
//! frame, project to the generator's model dimension, and resample to the
//! music latent frame rate.
//!
//! Pipeline: 2x2 stride-2 conv downsample -> aggregation (gated softmax /
//! gated sigmoid / single-query attention pooling / average / CLS) ->
//! output linear -> channelwise linear resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{glorot, Binding, Params};
use crate::tensor::Tensor;

/// Per-frame patchified visual features, `[frames, patches, channels]`
/// with `patches = grid_h * grid_w` (row-major over the grid).
#[derive(Debug, Clone)]
pub struct PatchFeatureSequence {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Tensor,
}

impl PatchFeatureSequence {
    pub fn new(grid_h: usize, grid_w: usize, data: Tensor) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[1] != grid_h * grid_w {
            return Err(Error::Dimension(format!(
                "patch features {:?} do not match a {}x{} grid",
                shape, grid_h, grid_w
            )));
        }
        Ok(PatchFeatureSequence { grid_h, grid_w, data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-frame global (CLS) features, `[frames, channels]`.
#[derive(Debug, Clone)]
pub struct ClsSequence {
    pub data: Tensor,
}

/// Compressed condition fed to the generator, `[latent frames, model dim]`.
#[derive(Debug, Clone)]
pub struct ConditionSequence {
    pub data: Tensor,
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationStrategy {
    SoftmaxGated,
    SigmoidGated,
    AttentionPool,
    AveragePool,
    ClsPool,
}

impl AggregationStrategy {
    pub fn needs_cls(self) -> bool {
        matches!(self, AggregationStrategy::AttentionPool | AggregationStrategy::ClsPool)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" | "softmax-gated" => Ok(Self::SoftmaxGated),
            "sigmoid" | "sigmoid-gated" => Ok(Self::SigmoidGated),
            "attention" | "attention-pool" => Ok(Self::AttentionPool),
            "average" | "average-pool" => Ok(Self::AveragePool),
            "cls" | "cls-pool" => Ok(Self::ClsPool),
            other => Err(Error::Config(format!("unknown aggregation strategy `{other}`"))),
        }
    }
}

const GATE_GROUPS: usize = 4;
const ATTN_HEADS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptorConfig {
    /// Channel dimension of incoming patch features.
    pub channels: usize,
    /// Output dimension (equals the generator hidden size).
    pub model_dim: usize,
    pub strategy: AggregationStrategy,
}

pub struct Adaptor {
    pub cfg: AdaptorConfig,
}

impl Adaptor {
    pub fn new(cfg: AdaptorConfig) -> Result<Self> {
        if cfg.strategy == AggregationStrategy::AttentionPool && cfg.channels % ATTN_HEADS != 0 {
            return Err(Error::Config(format!(
                "attention pooling needs channels divisible by {ATTN_HEADS}, got {}",
                cfg.channels
            )));
        }
        Ok(Adaptor { cfg })
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Params {
        let c = self.cfg.channels;
        let mut p = Params::new();
        p.insert("down.w", glorot(&[2, 2, c, c], 4 * c, 4 * c, rng));
        p.insert("down.b", Tensor::zeros(&[c]));
        match self.cfg.strategy {
            AggregationStrategy::SoftmaxGated | AggregationStrategy::SigmoidGated => {
                p.insert(
                    "gate.w",
                    glorot(&[3, 3, c, GATE_GROUPS], 9 * c, 9 * GATE_GROUPS, rng),
                );
                p.insert("gate.b", Tensor::zeros(&[GATE_GROUPS]));
            }
            AggregationStrategy::AttentionPool => {
                p.insert("attn.wq", glorot(&[c, c], c, c, rng));
                p.insert("attn.wk", glorot(&[c, c], c, c, rng));
                p.insert("attn.wv", glorot(&[c, c], c, c, rng));
            }
            AggregationStrategy::AveragePool | AggregationStrategy::ClsPool => {}
        }
        p.insert("out.w", glorot(&[c, self.cfg.model_dim], c, self.cfg.model_dim, rng));
        p.insert("out.b", Tensor::zeros(&[self.cfg.model_dim]));
        p
    }

    /// 2x2 stride-2 learnable downsampling of a `[N, L, C]` node laid out
    /// on an `h x w` grid. Returns the downsampled node and the new grid.
    pub fn downsample(
        &self,
        g: &mut Graph,
        scope: &Scope,
        x: NodeId,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<(NodeId, usize, usize)> {
        if grid_h % 2 != 0 || grid_w % 2 != 0 {
            return Err(Error::Config(format!(
                "patch grid {grid_h}x{grid_w} must be even for 2x2 downsampling"
            )));
        }
        let shape = g.value(x).shape().to_vec();
        let (n, c) = (shape[0], shape[2]);
        let nhwc = g.reshape(x, &[n, grid_h, grid_w, c]);
        let conv = g.conv2d(nhwc, scope.id("down.w"), 2, 0);
        let biased = g.add(conv, scope.id("down.b"));
        let (h2, w2) = (grid_h / 2, grid_w / 2);
        let flat = g.reshape(biased, &[n, h2 * w2, c]);
        Ok((flat, h2, w2))
    }

    /// Gated aggregation over a downsampled `[N, L, C]` node on an
    /// `h2 x w2` grid. The kernel-3 gate emits 4 weight groups; group
    /// outputs are averaged. Sigmoid weights are normalized by the scalar
    /// per-group sum over patches before the group average.
    pub fn aggregate_gated(
        &self,
        g: &mut Graph,
        scope: &Scope,
        patches: NodeId,
        h2: usize,
        w2: usize,
        softmax: bool,
    ) -> NodeId {
        let shape = g.value(patches).shape().to_vec();
        let (n, l, c) = (shape[0], shape[1], shape[2]);
        assert_eq!(l, h2 * w2, "grid {h2}x{w2} does not match {l} patches");
        let nhwc = g.reshape(patches, &[n, h2, w2, c]);
        let logits = g.conv2d(nhwc, scope.id("gate.w"), 1, 1);
        let logits = g.add(logits, scope.id("gate.b"));
        let logits = g.reshape(logits, &[n, l, GATE_GROUPS]);
        let weights = if softmax {
            g.softmax(logits, 1)
        } else {
            let w = g.sigmoid(logits);
            let sums = g.sum_axis(w, 1, true);
            g.div(w, sums)
        };
        // [N,G,L] x [N,L,C] -> [N,G,C], then average the groups
        let wt = g.permute(weights, &[0, 2, 1]);
        let grouped = g.matmul(wt, patches);
        g.mean_axis(grouped, 1, false)
    }

    /// Single-query multi-head cross-attention pooling: query from the CLS
    /// feature, keys/values from the patches.
    pub fn attention_pool(
        &self,
        g: &mut Graph,
        scope: &Scope,
        patches: NodeId,
        cls: NodeId,
    ) -> Result<NodeId> {
        let shape = g.value(patches).shape().to_vec();
        let (n, l, c) = (shape[0], shape[1], shape[2]);
        if c % ATTN_HEADS != 0 {
            return Err(Error::Config(format!(
                "channels {c} not divisible by {ATTN_HEADS} heads"
            )));
        }
        if g.value(cls).shape() != [n, c] {
            return Err(Error::Dimension(format!(
                "cls shape {:?} does not match patches [{n}, _, {c}]",
                g.value(cls).shape()
            )));
        }
        let dh = c / ATTN_HEADS;
        let q = g.matmul(cls, scope.id("attn.wq"));
        let q = g.reshape(q, &[n, ATTN_HEADS, 1, dh]);
        let flat = g.reshape(patches, &[n * l, c]);
        let k = g.matmul(flat, scope.id("attn.wk"));
        let k = g.reshape(k, &[n, l, ATTN_HEADS, dh]);
        let k = g.permute(k, &[0, 2, 3, 1]); // [N,H,dh,L]
        let v = g.matmul(flat, scope.id("attn.wv"));
        let v = g.reshape(v, &[n, l, ATTN_HEADS, dh]);
        let v = g.permute(v, &[0, 2, 1, 3]); // [N,H,L,dh]
        let scores = g.matmul(q, k); // [N,H,1,L]
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
        let w = g.softmax(scores, 3);
        let pooled = g.matmul(w, v); // [N,H,1,dh]
        Ok(g.reshape(pooled, &[n, c]))
    }

    /// End-to-end adaptor on graph nodes: downsample, aggregate, project,
    /// resample. `video` is `[N, grid_h*grid_w, C]`, `cls` is `[N, C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &Scope,
        video: NodeId,
        grid_h: usize,
        grid_w: usize,
        cls: Option<NodeId>,
        target_len: usize,
    ) -> Result<NodeId> {
        if self.cfg.strategy.needs_cls() && cls.is_none() {
            return Err(Error::Config(format!(
                "{:?} requires a CLS sequence",
                self.cfg.strategy
            )));
        }
        let c = *g.value(video).shape().last().unwrap();
        if c != self.cfg.channels {
            return Err(Error::Dimension(format!(
                "video has {c} channels, adaptor expects {}",
                self.cfg.channels
            )));
        }
        let pooled = match self.cfg.strategy {
            AggregationStrategy::ClsPool => cls.unwrap(),
            _ => {
                let (down, h2, w2) = self.downsample(g, scope, video, grid_h, grid_w)?;
                match self.cfg.strategy {
                    AggregationStrategy::SoftmaxGated => {
                        self.aggregate_gated(g, scope, down, h2, w2, true)
                    }
                    AggregationStrategy::SigmoidGated => {
                        self.aggregate_gated(g, scope, down, h2, w2, false)
                    }
                    AggregationStrategy::AttentionPool => {
                        self.attention_pool(g, scope, down, cls.unwrap())?
                    }
                    AggregationStrategy::AveragePool => g.mean_axis(down, 1, false),
                    AggregationStrategy::ClsPool => unreachable!(),
                }
            }
        };
        let projected = g.linear(pooled, scope.id("out.w"), Some(scope.id("out.b")));
        resample_linear(g, projected, target_len)
    }

    /// Struct-level forward: inserts the sequences as graph inputs.
    pub fn forward_seq(
        &self,
        g: &mut Graph,
        scope: &Scope,
        video: &PatchFeatureSequence,
        cls: Option<&ClsSequence>,
        target_len: usize,
    ) -> Result<NodeId> {
        let v = g.input(video.data.clone());
        let c = cls.map(|c| g.input(c.data.clone()));
        self.forward(g, scope, v, video.grid_h, video.grid_w, c, target_len)
    }

    /// Non-graph convenience: run the adaptor and return the condition.
    pub fn run(
        &self,
        params: &Params,
        video: &PatchFeatureSequence,
        cls: Option<&ClsSequence>,
        target_len: usize,
        fps: f64,
    ) -> Result<ConditionSequence> {
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let scope = Scope::root(&binding);
        let out = self.forward_seq(&mut g, &scope, video, cls, target_len)?;
        Ok(ConditionSequence { data: g.value(out).clone(), fps })
    }
}

/// Parameter namespace: resolves short names against a binding, optionally
/// under a dotted prefix so components can share one parameter set.
pub struct Scope<'a> {
    binding: &'a Binding,
    prefix: &'a str,
}

impl<'a> Scope<'a> {
    pub fn root(binding: &'a Binding) -> Self {
        Scope { binding, prefix: "" }
    }

    pub fn prefixed(binding: &'a Binding, prefix: &'a str) -> Self {
        Scope { binding, prefix }
    }

    pub fn id(&self, name: &str) -> NodeId {
        if self.prefix.is_empty() {
            self.binding.id(name)
        } else {
            self.binding.id(&format!("{}.{}", self.prefix, name))
        }
    }
}

/// Channelwise linear resampling of `[N, C]` to `[target_len, C]` on the
/// uniform grid. Endpoints map exactly; `target_len == N` is the identity.
pub fn resample_linear(g: &mut Graph, seq: NodeId, target_len: usize) -> Result<NodeId> {
    let shape = g.value(seq).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("resample expects [N, C], got {shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Input(format!("resample needs at least 2 frames, got {n}")));
    }
    if target_len == 0 {
        return Err(Error::Input("resample target length must be >= 1".into()));
    }
    let m = g.input(interp_matrix(n, target_len));
    Ok(g.matmul(m, seq))
}

/// `[target, n]` interpolation weights on the uniform grid.
pub fn interp_matrix(n: usize, target: usize) -> Tensor {
    let mut w = vec![0.0; target * n];
    for i in 0..target {
        let p = if target == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (target - 1) as f64
        };
        let i0 = (p.floor() as usize).min(n - 1);
        let frac = p - i0 as f64;
        if frac == 0.0 || i0 + 1 >= n {
            w[i * n + i0] = 1.0;
        } else {
            w[i * n + i0] = 1.0 - frac;
            w[i * n + i0 + 1] = frac;
        }
    }
    Tensor::new(vec![target, n], w)
}
