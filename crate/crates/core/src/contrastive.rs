//! Position-aware contrastive pre-training of the visual adaptor and the
//! audio head.
//!
//! The similarity is the mean frame-wise cosine (SIM). The semantic loss is
//! a symmetric InfoNCE over a batch of aligned pairs; the temporal loss
//! augments the video-anchored denominator with synchrony-breaking
//! negatives: beat-aware temporal shifts and crossfaded random segment
//! replacements, falling back to silence when neither is constructible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{resample_linear, Scope};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{glorot, Params};
use crate::tensor::Tensor;

/// Encoder-side music feature, `[channels, freq bins, time]`.
#[derive(Debug, Clone)]
pub struct AudioFeature {
    pub data: Tensor,
}

impl AudioFeature {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.shape()[1] == 0 || data.shape()[2] == 0 {
            return Err(Error::Dimension(format!(
                "audio feature must be [C, F, N] with F, N >= 1, got {:?}",
                data.shape()
            )));
        }
        Ok(AudioFeature { data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Deterministic stand-in for a pretrained audio encoder: linear 2x
/// temporal upsampling followed by a fixed 4-filter bank
/// `[x, relu(x), relu(-x), tanh(x)]` per latent channel.
pub fn encode_audio(latent: &Tensor) -> AudioFeature {
    assert_eq!(latent.rank(), 2, "latent must be [N, C], got {:?}", latent.shape());
    let (n, c) = (latent.shape()[0], latent.shape()[1]);
    let n2 = 2 * n;
    let mut up = vec![0.0; n2 * c];
    for t in 0..n2 {
        // position on the original grid; endpoints clamp
        let p = t as f64 * (n - 1) as f64 / (n2 - 1) as f64;
        let i0 = (p.floor() as usize).min(n - 1);
        let frac = p - i0 as f64;
        for ch in 0..c {
            let a = latent.at(&[i0, ch]);
            let b = latent.at(&[(i0 + 1).min(n - 1), ch]);
            up[t * c + ch] = a + frac * (b - a);
        }
    }
    let mut data = vec![0.0; c * 4 * n2];
    for ch in 0..c {
        for t in 0..n2 {
            let x = up[t * c + ch];
            let filters = [x, x.max(0.0), (-x).max(0.0), x.tanh()];
            for (f, &v) in filters.iter().enumerate() {
                data[(ch * 4 + f) * n2 + t] = v;
            }
        }
    }
    AudioFeature { data: Tensor::new(vec![c, 4, n2], data) }
}

/// Audio-feature representation of silence of the given latent geometry;
/// the learnable head is applied at loss-build time like any other feature.
pub fn silence_feature(latent_frames: usize, latent_channels: usize) -> AudioFeature {
    encode_audio(&Tensor::zeros(&[latent_frames, latent_channels]))
}

/// Learnable head mapping audio features to the shared embedding space:
/// frequency average, temporal resample, linear projection.
pub struct AudioHead {
    pub in_channels: usize,
    pub out_dim: usize,
}

impl AudioHead {
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Params {
        let mut p = Params::new();
        p.insert(
            "lin.w",
            glorot(&[self.in_channels, self.out_dim], self.in_channels, self.out_dim, rng),
        );
        p.insert("lin.b", Tensor::zeros(&[self.out_dim]));
        p
    }

    /// `feature` is a `[C', F, N']` node; output is `[target_len, C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &Scope,
        feature: NodeId,
        target_len: usize,
    ) -> Result<NodeId> {
        let shape = g.value(feature).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "audio head expects [C, F, N], got {shape:?}"
            )));
        }
        if shape[0] != self.in_channels {
            return Err(Error::Dimension(format!(
                "audio head expects {} channels, got {}",
                self.in_channels, shape[0]
            )));
        }
        let avg = g.mean_axis(feature, 1, false); // [C', N']
        let tc = g.permute(avg, &[1, 0]); // [N', C']
        let res = resample_linear(g, tc, target_len)?;
        Ok(g.linear(res, scope.id("lin.w"), Some(scope.id("lin.b"))))
    }
}

/// Mean frame-wise cosine similarity of two `[N, C]` nodes -> scalar node.
pub fn sim(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let cos = g.cosine_rows(a, b);
    g.mean_all(cos)
}

/// `[M, M]` matrix node with `S[i][j] = SIM(music_i, video_j)`.
pub fn sim_matrix(g: &mut Graph, music: &[NodeId], video: &[NodeId]) -> NodeId {
    assert_eq!(music.len(), video.len());
    let mut rows = Vec::with_capacity(music.len());
    for &m in music {
        let entries: Vec<NodeId> = video.iter().map(|&v| sim(g, m, v)).collect();
        let row = g.stack_scalars(&entries);
        rows.push(g.reshape(row, &[1, video.len()]));
    }
    g.concat(0, &rows)
}

/// Diagonal of a square `[M, M]` node as `[M]`.
fn diag(g: &mut Graph, m: NodeId) -> NodeId {
    let k = g.value(m).shape()[0];
    let parts: Vec<NodeId> = (0..k)
        .map(|i| {
            let row = g.slice(m, 0, i, i + 1);
            let cell = g.slice(row, 1, i, i + 1);
            g.reshape(cell, &[1])
        })
        .collect();
    g.concat(0, &parts)
}

/// Row-stabilized log-sum-exp of an `[M, M]` node -> `[M]`. The per-row max
/// is subtracted as a constant; the result is exact because the expression
/// is shift-invariant.
fn lse_rows(g: &mut Graph, logits: NodeId) -> NodeId {
    let v = g.value(logits).clone();
    let (m, n) = (v.shape()[0], v.shape()[1]);
    let maxes: Vec<f64> = (0..m)
        .map(|i| v.data()[i * n..(i + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let cmax = g.input(Tensor::new(vec![m, 1], maxes.clone()));
    let shifted = g.sub(logits, cmax);
    let e = g.exp(shifted);
    let sums = g.sum_axis(e, 1, false);
    let lse = g.log(sums);
    let flat = g.input(Tensor::new(vec![m], maxes));
    g.add(lse, flat)
}

/// Column-stabilized log-sum-exp over one or more `[M, M]` matrices sharing
/// the denominator -> `[M]` (per column).
fn lse_cols(g: &mut Graph, mats: &[NodeId]) -> NodeId {
    let (m, n) = {
        let s = g.value(mats[0]).shape();
        (s[0], s[1])
    };
    let mut maxes = vec![f64::NEG_INFINITY; n];
    for &mat in mats {
        let v = g.value(mat);
        for i in 0..m {
            for j in 0..n {
                maxes[j] = maxes[j].max(v.data()[i * n + j]);
            }
        }
    }
    let cmax = g.input(Tensor::new(vec![1, n], maxes.clone()));
    let mut total: Option<NodeId> = None;
    for &mat in mats {
        let shifted = g.sub(mat, cmax);
        let e = g.exp(shifted);
        let s = g.sum_axis(e, 0, false);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let lse = g.log(total.unwrap());
    let flat = g.input(Tensor::new(vec![n], maxes));
    g.add(lse, flat)
}

fn scaled_logits(g: &mut Graph, s: NodeId, log_tau: NodeId) -> NodeId {
    let neg = g.neg(log_tau);
    let inv_tau = g.exp(neg);
    g.mul(s, inv_tau)
}

/// Semantic contrastive objective over an `[M, M]` SIM matrix node:
/// mean over pairs of the symmetric InfoNCE with temperature `exp(log_tau)`.
pub fn loss_semantic_from_matrix(g: &mut Graph, s: NodeId, log_tau: NodeId) -> Result<NodeId> {
    let shape = g.value(s).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Input(format!("SIM matrix must be square and non-empty, got {shape:?}")));
    }
    let logits = scaled_logits(g, s, log_tau);
    let d = diag(g, logits);
    let row_lse = lse_rows(g, logits);
    let col_lse = lse_cols(g, &[logits]);
    // per pair: 0.5*(row_lse - diag) + 0.5*(col_lse - diag)
    let rl = g.sub(row_lse, d);
    let cl = g.sub(col_lse, d);
    let total = g.add(rl, cl);
    let halved = g.mul_scalar(total, 0.5);
    Ok(g.mean_all(halved))
}

/// Temporal contrastive objective. The music-anchored term matches the
/// semantic loss; the video-anchored denominator additionally sums the
/// shifted and replaced negative matrices. With `symmetric`, the
/// music-anchored denominator is also augmented by each pair's own
/// shifted/replaced negatives (a variant left open by the printed form).
pub fn loss_temporal_from_matrices(
    g: &mut Graph,
    s: NodeId,
    s_shift: NodeId,
    s_repl: NodeId,
    log_tau: NodeId,
    symmetric: bool,
) -> Result<NodeId> {
    let shape = g.value(s).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::Input(format!("SIM matrix must be square and non-empty, got {shape:?}")));
    }
    for (name, mat) in [("shift", s_shift), ("replacement", s_repl)] {
        if g.value(mat).shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "{name} SIM matrix {:?} does not match base {:?}",
                g.value(mat).shape(),
                shape
            )));
        }
    }
    let logits = scaled_logits(g, s, log_tau);
    let logits_shift = scaled_logits(g, s_shift, log_tau);
    let logits_repl = scaled_logits(g, s_repl, log_tau);
    let d = diag(g, logits);
    let row_lse = if symmetric {
        // augment each anchor's denominator with its own 2 negatives:
        // lse over [row of base | diag(shift) | diag(repl)]
        let m = shape[0];
        let ds = diag(g, logits_shift);
        let dr = diag(g, logits_repl);
        let ds2 = g.reshape(ds, &[m, 1]);
        let dr2 = g.reshape(dr, &[m, 1]);
        let wide = g.concat(1, &[logits, ds2, dr2]);
        lse_rows(g, wide)
    } else {
        lse_rows(g, logits)
    };
    let col_lse = lse_cols(g, &[logits, logits_shift, logits_repl]);
    let rl = g.sub(row_lse, d);
    let cl = g.sub(col_lse, d);
    let total = g.add(rl, cl);
    let halved = g.mul_scalar(total, 0.5);
    Ok(g.mean_all(halved))
}

/// Positive / negative pair counts entering each objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub positives: usize,
    pub negatives: usize,
}

pub fn pair_counts_semantic(batch: usize) -> PairCounts {
    PairCounts { positives: batch, negatives: batch * batch - batch }
}

pub fn pair_counts_temporal(batch: usize) -> PairCounts {
    PairCounts { positives: batch, negatives: 3 * batch * batch - batch }
}

// ----- negative construction -------------------------------------------------

/// Beat-aware shift sampling: shifts are `k*n + m` latent frames in either
/// direction, with the residue `m` kept away from whole- and half-beat
/// offsets and the magnitude below half the clip.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShiftRule {
    /// Minimal beat cycle in latent frames.
    pub minimal_cycle: usize,
    /// Total clip length in latent frames.
    pub total_len: usize,
}

impl ShiftRule {
    /// Residues `m` with `m/n` in [0.1, 0.4] or [0.6, 0.9].
    pub fn allowed_residues(&self) -> Vec<usize> {
        let n = self.minimal_cycle as f64;
        let lo1 = (0.1 * n).ceil() as usize;
        let hi1 = (0.4 * n).floor() as usize;
        let lo2 = (0.6 * n).ceil() as usize;
        let hi2 = (0.9 * n).floor() as usize;
        let mut out: Vec<usize> = (lo1..=hi1).collect();
        out.extend(lo2..=hi2);
        out.retain(|&m| m > 0 && m < self.minimal_cycle);
        out.dedup();
        out
    }

    pub fn is_valid(&self, s: i64) -> bool {
        if s == 0 || 2 * s.unsigned_abs() as usize >= self.total_len {
            return false;
        }
        let m = (s.unsigned_abs() as usize) % self.minimal_cycle;
        self.allowed_residues().contains(&m)
    }

    /// Uniformly sample sign, cycle count and residue subject to the rule.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<i64> {
        let residues = self.allowed_residues();
        let half = self.total_len.div_ceil(2);
        let feasible: Vec<usize> = residues
            .iter()
            .copied()
            .filter(|&m| m < half)
            .collect();
        if feasible.is_empty() {
            return Err(Error::Infeasible(format!(
                "no valid shift for cycle {} within length {}",
                self.minimal_cycle, self.total_len
            )));
        }
        // rejection-sample k and m; the acceptance region is non-empty
        for _ in 0..1024 {
            let m = feasible[rng.random_range(0..feasible.len())];
            let k_max = (half - 1).saturating_sub(m) / self.minimal_cycle;
            let k = rng.random_range(0..=k_max);
            let mag = (k * self.minimal_cycle + m) as i64;
            let s = if rng.random_bool(0.5) { mag } else { -mag };
            if self.is_valid(s) {
                return Ok(s);
            }
        }
        Err(Error::Infeasible("shift sampling failed to converge".into()))
    }
}

/// Circular temporal shift of `[N, C]` by `s` frames (positive delays).
pub fn apply_shift(x: &Tensor, s: i64) -> Tensor {
    assert_eq!(x.rank(), 2, "apply_shift expects [N, C], got {:?}", x.shape());
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * c];
    for t in 0..n {
        let src = (t as i64 - s).rem_euclid(n as i64) as usize;
        out[t * c..(t + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
    }
    Tensor::new(vec![n, c], out)
}

/// Segment replacement geometry, reported for property checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    /// First frame of the replaced core segment.
    pub start: usize,
    /// Core segment length.
    pub len: usize,
    /// Crossfade width on each side.
    pub fade: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplacementRule {
    pub min_frac: f64,
    pub max_frac: f64,
    pub end_margin: f64,
    pub fade_frac: f64,
}

impl Default for ReplacementRule {
    fn default() -> Self {
        ReplacementRule { min_frac: 0.2, max_frac: 0.4, end_margin: 0.05, fade_frac: 0.05 }
    }
}

/// Replace a random interior segment of `music` with the same positions of
/// `donor`, equal-power crossfaded at both boundaries. Frames outside
/// segment + crossfades are bit-identical to the original.
pub fn random_replacement<R: Rng>(
    music: &Tensor,
    donor: &Tensor,
    rule: &ReplacementRule,
    rng: &mut R,
) -> Result<(Tensor, Replacement)> {
    assert_eq!(music.rank(), 2, "music must be [N, C]");
    let (n, c) = (music.shape()[0], music.shape()[1]);
    if donor.shape() != music.shape() {
        return Err(Error::Dimension(format!(
            "donor {:?} does not match music {:?}",
            donor.shape(),
            music.shape()
        )));
    }
    let len_lo = (rule.min_frac * n as f64).ceil() as usize;
    let len_hi = (rule.max_frac * n as f64).floor() as usize;
    let margin = (rule.end_margin * n as f64).ceil() as usize;
    if len_lo == 0 || len_lo > len_hi {
        return Err(Error::Infeasible(format!("no valid segment length for {n} frames")));
    }
    let len = rng.random_range(len_lo..=len_hi);
    let fade = ((rule.fade_frac * len as f64).round() as usize).max(1);
    let lo = margin + fade;
    let hi_excl = n.saturating_sub(margin + len + fade);
    if lo > hi_excl {
        return Err(Error::Infeasible(format!(
            "segment of {len} frames with {fade}-frame fades does not fit in {n} frames"
        )));
    }
    let start = rng.random_range(lo..=hi_excl);
    let mut out = music.clone();
    // core: pure donor
    for t in start..start + len {
        for ch in 0..c {
            out.set(&[t, ch], donor.at(&[t, ch]));
        }
    }
    // equal-power fades: donor gain sqrt(alpha), original sqrt(1-alpha)
    for k in 0..fade {
        let alpha_in = (k + 1) as f64 / (fade + 1) as f64;
        let t_in = start - fade + k;
        let (go, gd) = ((1.0 - alpha_in).sqrt(), alpha_in.sqrt());
        for ch in 0..c {
            out.set(&[t_in, ch], go * music.at(&[t_in, ch]) + gd * donor.at(&[t_in, ch]));
        }
        let alpha_out = (fade - k) as f64 / (fade + 1) as f64;
        let t_out = start + len + k;
        let (go2, gd2) = ((1.0 - alpha_out).sqrt(), alpha_out.sqrt());
        for ch in 0..c {
            out.set(&[t_out, ch], go2 * music.at(&[t_out, ch]) + gd2 * donor.at(&[t_out, ch]));
        }
    }
    Ok((out, Replacement { start, len, fade }))
}

/// Negatives for one batch: a shifted and a replaced latent per clip, with
/// silence standing in wherever construction is infeasible.
pub struct NegativeSet {
    pub shifted: Vec<Tensor>,
    pub replaced: Vec<Tensor>,
    pub silence_fallbacks: usize,
}

/// Build the two temporal negatives for every clip in a batch of latents.
/// `cycles[i]` is the minimal beat cycle of clip `i` in latent frames.
/// Donors for replacement come from another clip in the batch.
pub fn build_negatives<R: Rng>(
    latents: &[Tensor],
    cycles: &[usize],
    rule: &ReplacementRule,
    rng: &mut R,
) -> NegativeSet {
    let m = latents.len();
    assert_eq!(m, cycles.len());
    let mut shifted = Vec::with_capacity(m);
    let mut replaced = Vec::with_capacity(m);
    let mut fallbacks = 0;
    for i in 0..m {
        let n = latents[i].shape()[0];
        let c = latents[i].shape()[1];
        let shift_rule = ShiftRule { minimal_cycle: cycles[i], total_len: n };
        match shift_rule.sample(rng) {
            Ok(s) => shifted.push(apply_shift(&latents[i], s)),
            Err(_) => {
                fallbacks += 1;
                shifted.push(Tensor::zeros(&[n, c]));
            }
        }
        let donor = if m > 1 {
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            Some(&latents[j])
        } else {
            None
        };
        let repl = donor.and_then(|d| random_replacement(&latents[i], d, rule, rng).ok());
        match repl {
            Some((r, _)) => replaced.push(r),
            None => {
                fallbacks += 1;
                replaced.push(Tensor::zeros(&[n, c]));
            }
        }
    }
    NegativeSet { shifted, replaced, silence_fallbacks: fallbacks }
}
