//! Rectified flow-matching music generator.
//!
//! A small pre-norm transformer estimates the velocity field along linear
//! noise-to-data interpolants. The sampled point, the visual condition and
//! a sinusoidal time embedding are projected to the model dimension and
//! summed element-wise, which keeps conditioning aligned frame-by-frame.
//! A learned null embedding replaces the condition for unconditional
//! prediction and classifier-free guidance. In-context generation keeps a
//! clean prompt prefix via partial denoising.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::Scope;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{glorot, Params};
use crate::tensor::Tensor;

/// Generator-side music latent, `[frames, channels]` at a fixed frame rate.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub data: Tensor,
    pub fps: f64,
}

impl LatentSequence {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DitConfig {
    pub latent_channels: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            latent_channels: 8,
            model_dim: 64,
            layers: 2,
            heads: 4,
            time_embed_dim: 32,
            rope_base: 10_000.0,
            rms_eps: 1e-6,
        }
    }
}

/// Condition routing for one velocity evaluation.
#[derive(Clone, Copy)]
pub enum CondInput {
    /// Visual condition `[N, model_dim]` for every frame.
    Cond(NodeId),
    /// Null embedding repeated along time (unconditional).
    Null,
    /// Null for the first `context` frames, condition for the rest;
    /// the prompt region carries no visual condition.
    Partial { cond: NodeId, context: usize },
}

pub struct VelocityModel {
    pub cfg: DitConfig,
}

impl VelocityModel {
    pub fn new(cfg: DitConfig) -> Result<Self> {
        if cfg.model_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                cfg.model_dim, cfg.heads
            )));
        }
        if (cfg.model_dim / cfg.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embedding",
                cfg.model_dim / cfg.heads
            )));
        }
        if cfg.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time embedding dim must be even".into()));
        }
        Ok(VelocityModel { cfg })
    }

    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Params {
        let (cz, d, td) = (self.cfg.latent_channels, self.cfg.model_dim, self.cfg.time_embed_dim);
        let mut p = Params::new();
        p.insert("in.w", glorot(&[cz, d], cz, d, rng));
        p.insert("in.b", Tensor::zeros(&[d]));
        p.insert("cond.w", glorot(&[d, d], d, d, rng));
        p.insert("cond.b", Tensor::zeros(&[d]));
        p.insert("null", glorot(&[1, d], 1, d, rng));
        p.insert("time.w1", glorot(&[td, d], td, d, rng));
        p.insert("time.b1", Tensor::zeros(&[d]));
        p.insert("time.w2", glorot(&[d, d], d, d, rng));
        p.insert("time.b2", Tensor::zeros(&[d]));
        for l in 0..self.cfg.layers {
            let pre = |s: &str| format!("blocks.{l}.{s}");
            p.insert(&pre("attn_norm"), Tensor::ones(&[d]));
            p.insert(&pre("attn.wq"), glorot(&[d, d], d, d, rng));
            p.insert(&pre("attn.wk"), glorot(&[d, d], d, d, rng));
            p.insert(&pre("attn.wv"), glorot(&[d, d], d, d, rng));
            p.insert(&pre("attn.wo"), glorot(&[d, d], d, d, rng));
            p.insert(&pre("ffn_norm"), Tensor::ones(&[d]));
            p.insert(&pre("ffn.w1"), glorot(&[d, 4 * d], d, 4 * d, rng));
            p.insert(&pre("ffn.w2"), glorot(&[4 * d, d], 4 * d, d, rng));
        }
        p.insert("final_norm", Tensor::ones(&[d]));
        p.insert("out.w", glorot(&[d, cz], d, cz, rng));
        p.insert("out.b", Tensor::zeros(&[cz]));
        p
    }

    /// Estimate the velocity field at `z_t` (a `[N, C_z]` node) and time `t`.
    pub fn velocity(
        &self,
        g: &mut Graph,
        scope: &Scope,
        z_t: NodeId,
        t: f64,
        cond: CondInput,
    ) -> Result<NodeId> {
        let shape = g.value(z_t).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.latent_channels {
            return Err(Error::Dimension(format!(
                "latent must be [N, {}], got {shape:?}",
                self.cfg.latent_channels
            )));
        }
        let n = shape[0];
        let d = self.cfg.model_dim;
        // validate condition lengths up front
        match cond {
            CondInput::Cond(c) | CondInput::Partial { cond: c, .. } => {
                let cs = g.value(c).shape();
                if cs != [n, d] {
                    return Err(Error::Dimension(format!(
                        "condition {cs:?} does not match latent frames [{n}, {d}]"
                    )));
                }
            }
            CondInput::Null => {}
        }

        let tok = g.linear(z_t, scope.id("in.w"), Some(scope.id("in.b")));

        let null_rows = |g: &mut Graph, count: usize| {
            let ids = vec![0usize; count];
            g.embed(scope.id("null"), &ids)
        };
        let cond_term = match cond {
            CondInput::Cond(c) => g.linear(c, scope.id("cond.w"), Some(scope.id("cond.b"))),
            CondInput::Null => null_rows(g, n),
            CondInput::Partial { cond: c, context } => {
                let p = context.min(n);
                if p == 0 {
                    g.linear(c, scope.id("cond.w"), Some(scope.id("cond.b")))
                } else if p == n {
                    null_rows(g, n)
                } else {
                    let tail = g.slice(c, 0, p, n);
                    let proj = g.linear(tail, scope.id("cond.w"), Some(scope.id("cond.b")));
                    let head = null_rows(g, p);
                    g.concat(0, &[head, proj])
                }
            }
        };

        let feats = g.input(time_features(t, self.cfg.time_embed_dim));
        let th = g.linear(feats, scope.id("time.w1"), Some(scope.id("time.b1")));
        let th = g.silu(th);
        let tvec = g.linear(th, scope.id("time.w2"), Some(scope.id("time.b2"))); // [1, D]
        let time_term = g.embed(tvec, &vec![0usize; n]);

        let mut x = g.add(tok, cond_term);
        x = g.add(x, time_term);

        let positions: Vec<usize> = (0..n).collect();
        let heads = self.cfg.heads;
        let dh = d / heads;
        for l in 0..self.cfg.layers {
            let pre = |s: &str| format!("blocks.{l}.{s}");
            let h = g.rms_norm(x, scope.id(&pre("attn_norm")), self.cfg.rms_eps);
            let q = g.matmul(h, scope.id(&pre("attn.wq")));
            let k = g.matmul(h, scope.id(&pre("attn.wk")));
            let v = g.matmul(h, scope.id(&pre("attn.wv")));
            let q = g.reshape(q, &[n, heads, dh]);
            let k = g.reshape(k, &[n, heads, dh]);
            let q = g.rope(q, &positions, self.cfg.rope_base);
            let k = g.rope(k, &positions, self.cfg.rope_base);
            let q = g.permute(q, &[1, 0, 2]); // [H,N,dh]
            let kt = g.permute(k, &[1, 2, 0]); // [H,dh,N]
            let scores = g.matmul(q, kt); // [H,N,N]
            let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
            let w = g.softmax(scores, 2);
            let v3 = g.reshape(v, &[n, heads, dh]);
            let v3 = g.permute(v3, &[1, 0, 2]); // [H,N,dh]
            let av = g.matmul(w, v3); // [H,N,dh]
            let av = g.permute(av, &[1, 0, 2]);
            let av = g.reshape(av, &[n, d]);
            let attn_out = g.matmul(av, scope.id(&pre("attn.wo")));
            x = g.add(x, attn_out);

            let h2 = g.rms_norm(x, scope.id(&pre("ffn_norm")), self.cfg.rms_eps);
            let f1 = g.matmul(h2, scope.id(&pre("ffn.w1")));
            let f1 = g.silu(f1);
            let f2 = g.matmul(f1, scope.id(&pre("ffn.w2")));
            x = g.add(x, f2);
        }
        let hf = g.rms_norm(x, scope.id("final_norm"), self.cfg.rms_eps);
        Ok(g.linear(hf, scope.id("out.w"), Some(scope.id("out.b"))))
    }

    /// Plain-tensor velocity evaluation (sampling path, no gradients kept).
    pub fn velocity_value(
        &self,
        params: &Params,
        z_t: &Tensor,
        t: f64,
        cond: Option<&Tensor>,
        context: usize,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let scope = Scope::root(&binding);
        let z = g.input(z_t.clone());
        let c = match cond {
            Some(ct) => {
                let node = g.input(ct.clone());
                if context > 0 {
                    CondInput::Partial { cond: node, context }
                } else {
                    CondInput::Cond(node)
                }
            }
            None => CondInput::Null,
        };
        let v = self.velocity(&mut g, &scope, z, t, c)?;
        Ok(g.value(v).clone())
    }
}

/// Sinusoidal features of a scalar time in `[0, 1]`, shaped `[1, dim]`.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    let pos = t * 1000.0;
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        data[2 * i] = (pos * freq).sin();
        data[2 * i + 1] = (pos * freq).cos();
    }
    Tensor::new(vec![1, dim], data)
}

/// Linear trajectory interpolation `z_t = (1 - t) z0 + t z1`.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    if z0.shape() != z1.shape() {
        return Err(Error::Dimension(format!(
            "interpolation endpoints {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("interpolation time {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(z1.clone());
    }
    // a + t(b - a): exact at the endpoints above and when z0 == z1
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(&a, &b)| a + t * (b - a))
        .collect();
    Ok(Tensor::new(z0.shape().to_vec(), data))
}

/// Squared-error velocity regression restricted to non-context frames.
/// With the context covering everything the loss is a constant zero
/// (no gradient flows anywhere).
pub fn rfm_residual_loss(
    g: &mut Graph,
    v: NodeId,
    target: NodeId,
    context_frames: usize,
) -> NodeId {
    let n = g.value(v).shape()[0];
    if context_frames >= n {
        return g.scalar(0.0);
    }
    let diff = g.sub(v, target);
    let tail = if context_frames > 0 {
        g.slice(diff, 0, context_frames, n)
    } else {
        diff
    };
    let sq = g.mul(tail, tail);
    g.mean_all(sq)
}

/// Randomized per-sample training choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub drop_cond: bool,
    pub context_frames: usize,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainRandomness {
    /// Probability of replacing the condition with the null embedding.
    pub cond_drop_prob: f64,
    /// Probability of applying partial denoising.
    pub icl_prob: f64,
    /// Prompt crop bounds in seconds.
    pub icl_min_s: f64,
    pub icl_max_s: f64,
    /// Prompt never exceeds this fraction of the clip.
    pub icl_max_frac: f64,
}

impl Default for TrainRandomness {
    fn default() -> Self {
        TrainRandomness {
            cond_drop_prob: 0.2,
            icl_prob: 0.8,
            icl_min_s: 1.0,
            icl_max_s: 4.0,
            icl_max_frac: 0.33,
        }
    }
}

/// Draw the per-sample training plan: condition drop, context length, and
/// the interpolation time. The draw order is fixed for reproducibility.
pub fn draw_step_plan<R: Rng>(
    rng: &mut R,
    frames: usize,
    fps: f64,
    cfg: &TrainRandomness,
) -> StepPlan {
    let drop_cond = rng.random_bool(cfg.cond_drop_prob);
    let icl = rng.random_bool(cfg.icl_prob);
    let context_frames = if icl {
        let secs = rng.random_range(cfg.icl_min_s..cfg.icl_max_s);
        let by_time = (secs * fps).round() as usize;
        let by_frac = (cfg.icl_max_frac * frames as f64).floor() as usize;
        by_time.min(by_frac)
    } else {
        0
    };
    let t = rng.random_range(0.0..1.0);
    StepPlan { drop_cond, context_frames, t }
}

/// Full RFM loss for one sample on an existing graph: interpolates the
/// trajectory, keeps context frames clean, routes the condition (dropped,
/// partial, or full) and regresses the velocity on non-context frames.
#[allow(clippy::too_many_arguments)]
pub fn rfm_loss_graph(
    g: &mut Graph,
    model: &VelocityModel,
    scope: &Scope,
    z1: &Tensor,
    z0: &Tensor,
    cond: Option<NodeId>,
    plan: &StepPlan,
) -> Result<NodeId> {
    let n = z1.shape()[0];
    let p = plan.context_frames.min(n);
    let mut z_t = interpolate(z0, z1, plan.t)?;
    // context stays clean
    for t in 0..p {
        for c in 0..z1.shape()[1] {
            z_t.set(&[t, c], z1.at(&[t, c]));
        }
    }
    let target = {
        let data = z1
            .data()
            .iter()
            .zip(z0.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::new(z1.shape().to_vec(), data)
    };
    let z_node = g.input(z_t);
    let target_node = g.input(target);
    let cond_input = match (plan.drop_cond, cond) {
        (true, _) | (false, None) => CondInput::Null,
        (false, Some(c)) => {
            if p > 0 {
                CondInput::Partial { cond: c, context: p }
            } else {
                CondInput::Cond(c)
            }
        }
    };
    let v = model.velocity(g, scope, z_node, plan.t, cond_input)?;
    Ok(rfm_residual_loss(g, v, target_node, p))
}

/// Classifier-free guidance: `gamma * v(cond) + (1 - gamma) * v(null)`.
pub fn cfg_velocity(
    g: &mut Graph,
    model: &VelocityModel,
    scope: &Scope,
    z_t: NodeId,
    t: f64,
    cond: CondInput,
    gamma: f64,
) -> Result<NodeId> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("guidance scale {gamma} must be >= 0")));
    }
    let vc = model.velocity(g, scope, z_t, t, cond)?;
    let vn = model.velocity(g, scope, z_t, t, CondInput::Null)?;
    let a = g.mul_scalar(vc, gamma);
    let b = g.mul_scalar(vn, 1.0 - gamma);
    Ok(g.add(a, b))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 25, guidance: 4.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least 1 step".into()));
        }
        if self.guidance < 0.0 {
            return Err(Error::Config(format!(
                "guidance scale {} must be >= 0",
                self.guidance
            )));
        }
        Ok(())
    }
}

/// Clean prompt prefix for in-context generation.
#[derive(Debug, Clone)]
pub struct IclContext {
    pub prompt: Tensor,
}

/// Fixed-step Euler integration of an arbitrary field from t=0 to t=1.
pub fn euler_integrate(
    f: impl Fn(&Tensor, f64) -> Tensor,
    z0: &Tensor,
    steps: usize,
) -> Tensor {
    assert!(steps >= 1);
    let h = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let v = f(&z, t);
        assert_eq!(v.shape(), z.shape(), "field changed shape");
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += h * vi;
        }
    }
    z
}

/// Euler sampling with CFG and optional in-context prompting. The prompt
/// rows are clamped after initialization and after every step, so the
/// output's first `P` frames equal the prompt bit-for-bit; the condition is
/// dropped over the prompt region.
pub fn euler_sample(
    model: &VelocityModel,
    params: &Params,
    cond: Option<&Tensor>,
    config: &SamplerConfig,
    z0: &Tensor,
    icl: Option<&IclContext>,
    fps: f64,
) -> Result<LatentSequence> {
    config.validate()?;
    let n = z0.shape()[0];
    let context = match icl {
        Some(ctx) => {
            let p = ctx.prompt.shape()[0];
            if p >= n {
                return Err(Error::Input(format!(
                    "prompt of {p} frames must be shorter than the {n}-frame clip"
                )));
            }
            if ctx.prompt.shape()[1] != z0.shape()[1] {
                return Err(Error::Dimension(format!(
                    "prompt channels {:?} do not match latent {:?}",
                    ctx.prompt.shape(),
                    z0.shape()
                )));
            }
            p
        }
        None => 0,
    };
    let clamp = |z: &mut Tensor| {
        if let Some(ctx) = icl {
            let c = z.shape()[1];
            for t in 0..context {
                for ch in 0..c {
                    z.set(&[t, ch], ctx.prompt.at(&[t, ch]));
                }
            }
        }
    };
    let mut z = z0.clone();
    clamp(&mut z);
    let h = 1.0 / config.steps as f64;
    for k in 0..config.steps {
        let t = k as f64 * h;
        let mut g = Graph::new();
        let binding = params.bind(&mut g);
        let scope = Scope::root(&binding);
        let z_node = g.input(z.clone());
        let cond_input = match cond {
            Some(ct) => {
                let node = g.input(ct.clone());
                if context > 0 {
                    CondInput::Partial { cond: node, context }
                } else {
                    CondInput::Cond(node)
                }
            }
            None => CondInput::Null,
        };
        let v = cfg_velocity(&mut g, model, &scope, z_node, t, cond_input, config.guidance)?;
        let vv = g.value(v);
        for (zi, vi) in z.data_mut().iter_mut().zip(vv.data()) {
            *zi += h * vi;
        }
        clamp(&mut z);
    }
    Ok(LatentSequence { data: z, fps })
}
