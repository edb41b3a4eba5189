//! Onset-strength extraction and dynamic-programming beat tracking with a
//! time-varying tempo estimate.
//!
//! The PCM front end is STFT -> 40-band log-mel -> half-wave-rectified
//! first difference summed over bands -> local mean removal. Tempo comes
//! from windowed autocorrelation weighted by a log-time prior centered at
//! 120 BPM; beats maximize onset strength minus a squared log-deviation
//! penalty on inter-beat intervals (backtraced DP). Envelopes can also be
//! read directly off a music latent's beat channel at the latent rate.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-negative onset strength at a fixed hop. `t0_s` is the time of the
/// first value (the PCM front end compensates its analysis latency there).
#[derive(Debug, Clone)]
pub struct OnsetEnvelope {
    pub values: Vec<f64>,
    pub hop_s: f64,
    pub t0_s: f64,
}

impl OnsetEnvelope {
    pub fn time_of(&self, frame: usize) -> f64 {
        self.t0_s + frame as f64 * self.hop_s
    }

    pub fn duration_s(&self) -> f64 {
        self.values.len() as f64 * self.hop_s
    }
}

/// Time-varying tempo estimate (one value per analysis window).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TempoCurve {
    pub times_s: Vec<f64>,
    pub bpm: Vec<f64>,
}

impl TempoCurve {
    /// Linear interpolation, clamped at the ends.
    pub fn bpm_at(&self, t: f64) -> f64 {
        let n = self.times_s.len();
        assert!(n > 0, "empty tempo curve");
        if t <= self.times_s[0] {
            return self.bpm[0];
        }
        if t >= self.times_s[n - 1] {
            return self.bpm[n - 1];
        }
        let i = self.times_s.partition_point(|&x| x <= t) - 1;
        let (t0, t1) = (self.times_s[i], self.times_s[i + 1]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        self.bpm[i] + w * (self.bpm[i + 1] - self.bpm[i])
    }

    pub fn min_bpm(&self) -> f64 {
        self.bpm.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Beat times plus the minimal beat cycle at the latent frame rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeatGrid {
    pub beat_times: Vec<f64>,
    pub minimal_cycle_frames: usize,
    pub min_bpm: f64,
}

impl BeatGrid {
    pub fn from_beats(beat_times: Vec<f64>, min_bpm: f64, latent_fps: f64) -> Self {
        let n = ((60.0 * latent_fps / min_bpm).round() as usize).max(1);
        BeatGrid { beat_times, minimal_cycle_frames: n, min_bpm }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BeatTrackConfig {
    pub bpm_min: f64,
    pub bpm_max: f64,
    /// Sliding tempo window in seconds.
    pub window_s: f64,
    /// Tempo window stride in envelope hops.
    pub stride_frames: usize,
    /// Transition-cost weight of the DP objective.
    pub lambda: f64,
    /// Log-time prior center (BPM) and width (octaves).
    pub prior_center_bpm: f64,
    pub prior_octaves: f64,
    /// Latent frame rate used for the minimal-cycle count.
    pub latent_fps: f64,
}

impl Default for BeatTrackConfig {
    fn default() -> Self {
        BeatTrackConfig {
            bpm_min: 30.0,
            bpm_max: 240.0,
            window_s: 8.0,
            stride_frames: 512,
            lambda: 100.0,
            prior_center_bpm: 120.0,
            prior_octaves: 1.4,
            latent_fps: 10.0,
        }
    }
}

const SUPPORTED_RATES: [u32; 4] = [16_000, 24_000, 44_100, 48_000];
const MEL_BANDS: usize = 40;
const LOG_FLOOR: f64 = 1e-10;

/// STFT geometry: window 1024 / hop 256 at 24 kHz, scaled proportionally.
fn stft_geometry(sr: u32) -> (usize, usize) {
    let scale = sr as f64 / 24_000.0;
    (
        (1024.0 * scale).round() as usize,
        (256.0 * scale).round() as usize,
    )
}

/// Onset strength envelope of mono PCM in [-1, 1].
pub fn onset_envelope(pcm: &[f64], sr: u32) -> Result<OnsetEnvelope> {
    if !SUPPORTED_RATES.contains(&sr) {
        return Err(Error::Input(format!(
            "unsupported sample rate {sr}; expected one of {SUPPORTED_RATES:?}"
        )));
    }
    let (win, hop) = stft_geometry(sr);
    if pcm.len() < win + hop {
        return Err(Error::Input(format!(
            "need at least {} samples ({} given)",
            win + hop,
            pcm.len()
        )));
    }
    let frames = (pcm.len() - win) / hop + 1;
    let bins = win / 2 + 1;
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos())
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(win);
    let filters = mel_filterbank(sr, win);

    let mut logmel = vec![0.0; frames * MEL_BANDS];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for f in 0..frames {
        for i in 0..win {
            buf[i] = Complex::new(pcm[f * hop + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
        for (b, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
            logmel[f * MEL_BANDS + b] = (e + LOG_FLOOR).ln();
        }
    }

    // half-wave-rectified first difference summed over bands
    let mut d = vec![0.0; frames];
    for f in 1..frames {
        let mut s = 0.0;
        for b in 0..MEL_BANDS {
            s += (logmel[f * MEL_BANDS + b] - logmel[(f - 1) * MEL_BANDS + b]).max(0.0);
        }
        d[f] = s;
    }

    let hop_s = hop as f64 / sr as f64;
    let values = local_mean_normalize(&d, (0.2 / hop_s).round() as usize);
    // a spike lands on the first frame whose window reaches the onset, so
    // frame f maps to the trailing window edge minus half a hop
    let t0_s = (win as f64 - hop as f64 / 2.0) / sr as f64;
    Ok(OnsetEnvelope { values, hop_s, t0_s })
}

/// Subtract a centered moving average and rectify.
fn local_mean_normalize(d: &[f64], half_width: usize) -> Vec<f64> {
    let w = half_width.max(1);
    let n = d.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(w);
        let hi = (i + w + 1).min(n);
        let mean: f64 = d[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        out[i] = (d[i] - mean).max(0.0);
    }
    out
}

/// Triangular mel filters as sparse (bin, weight) lists.
fn mel_filterbank(sr: u32, win: usize) -> Vec<Vec<(usize, f64)>> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let bins = win / 2 + 1;
    let (lo, hi) = (mel(20.0), mel(sr as f64 / 2.0));
    let points: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| inv_mel(lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let bin_freq = |k: usize| k as f64 * sr as f64 / win as f64;
    let mut filters = Vec::with_capacity(MEL_BANDS);
    for b in 0..MEL_BANDS {
        let (f0, f1, f2) = (points[b], points[b + 1], points[b + 2]);
        let mut taps = Vec::new();
        for k in 0..bins {
            let f = bin_freq(k);
            let w = if f >= f0 && f <= f1 && f1 > f0 {
                (f - f0) / (f1 - f0)
            } else if f > f1 && f <= f2 && f2 > f1 {
                (f2 - f) / (f2 - f1)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        filters.push(taps);
    }
    filters
}

/// Envelope straight off a latent's beat-impulse channel (channel 0).
pub fn onset_from_latent(latent: &Tensor, fps: f64) -> OnsetEnvelope {
    assert_eq!(latent.rank(), 2, "latent must be [N, C]");
    let (n, c) = (latent.shape()[0], latent.shape()[1]);
    let _ = c;
    let values: Vec<f64> = (0..n).map(|t| latent.at(&[t, 0]).max(0.0)).collect();
    OnsetEnvelope { values, hop_s: 1.0 / fps, t0_s: 0.0 }
}

/// Log-time prior weight at a candidate beat period.
fn tempo_prior(period_s: f64, cfg: &BeatTrackConfig) -> f64 {
    let center = 60.0 / cfg.prior_center_bpm;
    let x = (period_s / center).log2() / cfg.prior_octaves;
    (-0.5 * x * x).exp()
}

/// Windowed autocorrelation tempo estimate. Windows shorter inputs collapse
/// to a single global estimate; a flat window deterministically returns the
/// prior mode.
pub fn estimate_tempo(env: &OnsetEnvelope, cfg: &BeatTrackConfig) -> TempoCurve {
    let n = env.values.len();
    let w = ((cfg.window_s / env.hop_s).round() as usize).min(n).max(2);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * cfg.stride_frames)
        .take_while(|&s| s + w <= n)
        .collect();
    if starts.is_empty() {
        starts.push(0);
    }
    // make sure the tail is covered
    let last = n - w;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }

    let lag_lo = ((60.0 / cfg.bpm_max / env.hop_s).round() as usize).max(1);
    let lag_hi = ((60.0 / cfg.bpm_min / env.hop_s).round() as usize).min(w.saturating_sub(1));
    let mut times = Vec::with_capacity(starts.len());
    let mut bpms = Vec::with_capacity(starts.len());
    for &s in &starts {
        let seg = &env.values[s..s + w];
        let mean = seg.iter().sum::<f64>() / w as f64;
        let centered: Vec<f64> = seg.iter().map(|v| v - mean).collect();
        let mut best_lag = 0.0;
        let mut best_score = f64::NEG_INFINITY;
        let mut scores = vec![0.0; lag_hi + 1];
        for lag in lag_lo..=lag_hi {
            let mut ac = 0.0;
            for t in 0..w - lag {
                ac += centered[t] * centered[t + lag];
            }
            let prior = tempo_prior(lag as f64 * env.hop_s, cfg);
            // the +tiny term resolves flat inputs toward the prior mode
            let score = prior * (ac.max(0.0) + 1e-12);
            scores[lag] = score;
            if score > best_score {
                best_score = score;
                best_lag = lag as f64;
            }
        }
        if lag_lo <= lag_hi {
            // parabolic refinement around the discrete peak
            let l = best_lag as usize;
            if l > lag_lo && l < lag_hi {
                let (a, b, c) = (scores[l - 1], scores[l], scores[l + 1]);
                let denom = a - 2.0 * b + c;
                if denom.abs() > 1e-30 {
                    let delta = 0.5 * (a - c) / denom;
                    if delta.abs() < 1.0 {
                        best_lag += delta;
                    }
                }
            }
            let bpm = (60.0 / (best_lag * env.hop_s)).clamp(cfg.bpm_min, cfg.bpm_max);
            times.push(env.t0_s + (s as f64 + w as f64 / 2.0) * env.hop_s);
            bpms.push(bpm);
        } else {
            times.push(env.t0_s + (s as f64 + w as f64 / 2.0) * env.hop_s);
            bpms.push(cfg.prior_center_bpm);
        }
    }
    TempoCurve { times_s: times, bpm: bpms }
}

/// Dynamic-programming beat tracker. Maximizes the sum of normalized onset
/// strengths at the beats minus `lambda * ln^2(gap / local period)`;
/// normalization by the envelope's standard deviation makes beat times
/// invariant to amplitude scaling. Silence yields an empty grid.
pub fn track_beats(env: &OnsetEnvelope, tempo: &TempoCurve, cfg: &BeatTrackConfig) -> BeatGrid {
    let n = env.values.len();
    let min_bpm = tempo.min_bpm().clamp(cfg.bpm_min, cfg.bpm_max);
    let peak = env.values.iter().cloned().fold(0.0, f64::max);
    if n == 0 || peak <= 1e-9 {
        return BeatGrid::from_beats(Vec::new(), min_bpm, cfg.latent_fps);
    }
    let mean = env.values.iter().sum::<f64>() / n as f64;
    let var = env.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-12);
    let norm: Vec<f64> = env.values.iter().map(|v| v / std).collect();

    // gap bounds in seconds: [tau/2, 2 tau] clipped to the configured BPM
    // range with 25% slack so inter-beat intervals stay inside it
    let gap_min_s = 60.0 / cfg.bpm_max * 0.75;
    let gap_max_s = 60.0 / cfg.bpm_min * 1.25;

    let mut score = vec![0.0; n];
    let mut backlink: Vec<Option<usize>> = vec![None; n];
    let mut max_hi = 1usize;
    for f in 0..n {
        let tau = 60.0 / tempo.bpm_at(env.time_of(f));
        let lo = (((tau / 2.0).max(gap_min_s) / env.hop_s).round() as usize).max(1);
        let hi = (((tau * 2.0).min(gap_max_s) / env.hop_s).round() as usize).max(lo);
        max_hi = max_hi.max(hi);
        let mut best = 0.0;
        let mut best_prev = None;
        for d in lo..=hi.min(f) {
            let gap_s = d as f64 * env.hop_s;
            let penalty = cfg.lambda * (gap_s / tau).ln().powi(2);
            let cand = score[f - d] - penalty;
            if cand > best {
                best = cand;
                best_prev = Some(f - d);
            }
        }
        score[f] = norm[f] + best;
        backlink[f] = best_prev;
    }

    // end on the best-scoring frame within the last allowed gap
    let tail_start = n.saturating_sub(max_hi);
    let mut end = tail_start;
    for f in tail_start..n {
        if score[f] > score[end] {
            end = f;
        }
    }
    let mut frames = vec![end];
    let mut cur = end;
    while let Some(prev) = backlink[cur] {
        frames.push(prev);
        cur = prev;
    }
    frames.reverse();
    let beat_times: Vec<f64> = frames.iter().map(|&f| env.time_of(f)).collect();
    BeatGrid::from_beats(beat_times, min_bpm, cfg.latent_fps)
}

/// Envelope -> tempo curve -> beat grid in one call.
pub fn track(env: &OnsetEnvelope, cfg: &BeatTrackConfig) -> (TempoCurve, BeatGrid) {
    let tempo = estimate_tempo(env, cfg);
    let beats = track_beats(env, &tempo, cfg);
    (tempo, beats)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: u32 = 24_000;

    /// 10 ms raised-cosine clicks starting at the given times.
    fn click_track(beat_times: &[f64], duration_s: f64, sr: u32) -> Vec<f64> {
        let n = (duration_s * sr as f64).round() as usize;
        let mut pcm = vec![0.0; n];
        let click_len = (0.01 * sr as f64).round() as usize;
        for &t in beat_times {
            let start = (t * sr as f64).round() as usize;
            for i in 0..click_len {
                if start + i < n {
                    let phase = i as f64 / click_len as f64;
                    pcm[start + i] +=
                        0.9 * 0.5 * (1.0 - (std::f64::consts::TAU * phase).cos());
                }
            }
        }
        pcm
    }

    fn beats_at_bpm(bpm: f64, duration_s: f64) -> Vec<f64> {
        let period = 60.0 / bpm;
        let mut out = Vec::new();
        let mut t = 0.1;
        while t < duration_s - 0.05 {
            out.push(t);
            t += period;
        }
        out
    }

    #[test]
    fn silence_gives_zero_envelope_and_empty_grid() {
        let pcm = vec![0.0; SR as usize * 3];
        let env = onset_envelope(&pcm, SR).unwrap();
        assert!(env.values.iter().all(|&v| v == 0.0));
        let cfg = BeatTrackConfig::default();
        let (_, grid) = track(&env, &cfg);
        assert!(grid.beat_times.is_empty());
        assert!(grid.minimal_cycle_frames >= 1);
    }

    #[test]
    fn envelope_is_nonnegative_on_arbitrary_input() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pcm: Vec<f64> = (0..SR as usize * 2).map(|_| rng.random_range(-0.8..0.8)).collect();
        let env = onset_envelope(&pcm, SR).unwrap();
        assert!(env.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_click_peaks_within_one_hop() {
        let pcm = click_track(&[1.0], 2.0, SR);
        let env = onset_envelope(&pcm, SR).unwrap();
        let peak = env
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let t = env.time_of(peak);
        assert!(
            (t - 1.0).abs() <= env.hop_s + 1e-9,
            "peak at {t:.4}s, expected 1.0 +/- {:.4}",
            env.hop_s
        );
    }

    #[test]
    fn rejects_unsupported_rate_and_empty_input() {
        assert!(matches!(onset_envelope(&[0.0; 48000], 22_050), Err(Error::Input(_))));
        assert!(matches!(onset_envelope(&[], SR), Err(Error::Input(_))));
    }

    #[test]
    fn click_tempo_is_recovered_in_every_window() {
        for bpm in [60.0, 120.0] {
            let pcm = click_track(&beats_at_bpm(bpm, 10.0), 10.0, SR);
            let env = onset_envelope(&pcm, SR).unwrap();
            let curve = estimate_tempo(&env, &BeatTrackConfig::default());
            for &b in &curve.bpm {
                assert!((b - bpm).abs() <= 2.0, "estimated {b}, wanted {bpm}");
            }
        }
    }

    #[test]
    fn out_of_range_tempo_clamps_to_subharmonic() {
        // 250 BPM clicks: the 240-cap excludes the true lag, so the
        // autocorrelation's subharmonic at 125 BPM wins
        let pcm = click_track(&beats_at_bpm(250.0, 10.0), 10.0, SR);
        let env = onset_envelope(&pcm, SR).unwrap();
        let curve = estimate_tempo(&env, &BeatTrackConfig::default());
        for &b in &curve.bpm {
            assert!((b - 125.0).abs() <= 2.0, "estimated {b}, wanted 125");
        }
    }

    #[test]
    fn flat_envelope_returns_prior_mode() {
        let env = OnsetEnvelope {
            values: vec![0.7; 1000],
            hop_s: 256.0 / SR as f64,
            t0_s: 0.0,
        };
        let curve = estimate_tempo(&env, &BeatTrackConfig::default());
        // prior mode = 120 BPM up to lag quantization
        for &b in &curve.bpm {
            assert!((b - 120.0).abs() <= 2.0, "estimated {b}");
        }
    }

    #[test]
    fn click_track_beats_land_on_clicks() {
        let truth = beats_at_bpm(120.0, 10.0);
        let pcm = click_track(&truth, 10.0, SR);
        let env = onset_envelope(&pcm, SR).unwrap();
        let cfg = BeatTrackConfig::default();
        let (_, grid) = track(&env, &cfg);
        assert!(
            (grid.beat_times.len() as i64 - truth.len() as i64).abs() <= 2,
            "expected ~{} beats, got {}",
            truth.len(),
            grid.beat_times.len()
        );
        let hits = grid
            .beat_times
            .iter()
            .filter(|&&b| truth.iter().any(|&t| (b - t).abs() <= 0.02))
            .count();
        assert!(
            hits as f64 >= 0.9 * grid.beat_times.len() as f64,
            "only {hits}/{} within 20 ms",
            grid.beat_times.len()
        );
    }

    #[test]
    fn beat_times_increase_and_gaps_stay_in_range() {
        let pcm = click_track(&beats_at_bpm(90.0, 12.0), 12.0, SR);
        let env = onset_envelope(&pcm, SR).unwrap();
        let cfg = BeatTrackConfig::default();
        let (_, grid) = track(&env, &cfg);
        for w in grid.beat_times.windows(2) {
            let gap = w[1] - w[0];
            assert!(gap > 0.0);
            assert!(
                gap >= 60.0 / 240.0 * 0.75 - 1e-9 && gap <= 60.0 / 30.0 * 1.25 + 1e-9,
                "gap {gap}"
            );
        }
    }

    #[test]
    fn amplitude_scaling_leaves_beats_unchanged() {
        let pcm = click_track(&beats_at_bpm(120.0, 8.0), 8.0, SR);
        let env = onset_envelope(&pcm, SR).unwrap();
        let doubled = OnsetEnvelope {
            values: env.values.iter().map(|v| v * 2.0).collect(),
            hop_s: env.hop_s,
            t0_s: env.t0_s,
        };
        let cfg = BeatTrackConfig::default();
        let (t1, g1) = track(&env, &cfg);
        let g2 = track_beats(&doubled, &t1, &cfg);
        assert_eq!(g1.beat_times, g2.beat_times);
    }

    #[test]
    fn tempo_estimates_stay_inside_configured_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pcm: Vec<f64> = (0..SR as usize * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
        let env = onset_envelope(&pcm, SR).unwrap();
        let cfg = BeatTrackConfig::default();
        let curve = estimate_tempo(&env, &cfg);
        for &b in &curve.bpm {
            assert!((cfg.bpm_min..=cfg.bpm_max).contains(&b));
        }
    }

    #[test]
    fn latent_envelope_reads_channel_zero() {
        let mut latent = Tensor::zeros(&[10, 3]);
        latent.set(&[2, 0], 1.5);
        latent.set(&[5, 0], -0.5); // rectified away
        latent.set(&[7, 1], 9.0); // other channels ignored
        let env = onset_from_latent(&latent, 10.0);
        assert_eq!(env.values[2], 1.5);
        assert_eq!(env.values[5], 0.0);
        assert_eq!(env.values[7], 0.0);
        assert!((env.time_of(2) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn minimal_cycle_follows_min_bpm_at_latent_rate() {
        let grid = BeatGrid::from_beats(vec![0.5, 1.0], 120.0, 10.0);
        assert_eq!(grid.minimal_cycle_frames, 5);
        let slow = BeatGrid::from_beats(vec![], 30.0, 10.0);
        assert_eq!(slow.minimal_cycle_frames, 20);
    }

    #[test]
    fn short_input_collapses_to_single_global_estimate() {
        // 3 s < 8 s window: one estimate (plus tail dedup)
        let pcm = click_track(&beats_at_bpm(120.0, 3.0), 3.0, SR);
        let env = onset_envelope(&pcm, SR).unwrap();
        let curve = estimate_tempo(&env, &BeatTrackConfig::default());
        assert_eq!(curve.bpm.len(), 1);
        assert!((curve.bpm[0] - 120.0).abs() <= 2.0);
    }
}
