//! Beat-synchronization metrics: exclusive bipartite beat matching under a
//! strict tolerance, Beats Coverage Score, Beats Hit Score, and the
//! percent-scale embedding similarity.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Strictly increasing, non-negative beat times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSet {
    times: Vec<f64>,
}

impl BeatSet {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.first().is_some_and(|&t| t < 0.0) {
            return Err(Error::Input("beat times must be non-negative".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("beat times must be strictly increasing".into()));
        }
        Ok(BeatSet { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub const DEFAULT_BEAT_TOLERANCE_S: f64 = 0.1;

/// Maximum-cardinality exclusive matching between two sorted beat sets,
/// edges where `|gen - ref| < tol` (strict). Sortedness makes the interval
/// graph solvable by LCS-style dynamic programming; ties break toward the
/// earlier reference beat.
pub fn match_beats(gen: &BeatSet, reference: &BeatSet, tol: f64) -> Vec<(usize, usize)> {
    assert!(tol > 0.0, "tolerance must be positive");
    let (g, r) = (gen.times(), reference.times());
    let (n, m) = (g.len(), r.len());
    let mut f = vec![vec![0u32; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let mut best = f[i - 1][j].max(f[i][j - 1]);
            if (g[i - 1] - r[j - 1]).abs() < tol {
                best = best.max(f[i - 1][j - 1] + 1);
            }
            f[i][j] = best;
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        if f[i][j] == f[i][j - 1] {
            // dropping the later reference first biases matches toward
            // earlier reference beats
            j -= 1;
        } else if f[i][j] == f[i - 1][j] {
            i -= 1;
        } else {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

/// Beats Coverage Score: 100 * |gen| / |ref|. May exceed 100.
pub fn bcs(gen: &BeatSet, reference: &BeatSet) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::MetricUndefined(
            "coverage needs at least one reference beat".into(),
        ));
    }
    Ok(100.0 * gen.len() as f64 / reference.len() as f64)
}

/// Beats Hit Score: 100 * |matching| / |ref| at the given tolerance.
pub fn bhs(gen: &BeatSet, reference: &BeatSet, tol: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::MetricUndefined(
            "hit score needs at least one reference beat".into(),
        ));
    }
    let matched = match_beats(gen, reference, tol).len();
    Ok(100.0 * matched as f64 / reference.len() as f64)
}

/// Percent-scale mean frame-wise cosine between two `[N, C]` embeddings.
pub fn sim_percent(music_emb: &Tensor, video_emb: &Tensor) -> Result<f64> {
    if music_emb.shape() != video_emb.shape() || music_emb.rank() != 2 {
        return Err(Error::Dimension(format!(
            "embeddings {:?} vs {:?} must be equal [N, C]",
            music_emb.shape(),
            video_emb.shape()
        )));
    }
    let mut g = Graph::new();
    let a = g.input(music_emb.clone());
    let b = g.input(video_emb.clone());
    let s = crate::contrastive::sim(&mut g, a, b);
    Ok(100.0 * g.value(s).item())
}
