//! Synthetic paired video-feature / music-latent clips with shared,
//! controllable beat and event structure, plus click-track rendering.
//!
//! The music latent carries a beat impulse train on channel 0 and
//! event-keyed tone bursts on channels 1-4; channel 7 is a deliberate
//! decoy that fires at unrelated times, so timing (not channel identity)
//! is the only reliable alignment cue. The video side mirrors the beats
//! with a global flash channel and the events with localized patch bursts
//! at the same frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{ClsSequence, PatchFeatureSequence};
use crate::beat::BeatGrid;
use crate::contrastive::ShiftRule;
use crate::error::{Error, Result};
use crate::flowgen::LatentSequence;
use crate::tensor::Tensor;

pub const MIN_CLIP_S: f64 = 4.0;
pub const MAX_CLIP_S: f64 = 30.0;

const EVENT_KINDS: usize = 4;
const EVENT_DECAY_FRAMES: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    pub latent_fps: f64,
    pub latent_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_channels: usize,
    /// Beat period bounds in latent frames (inclusive).
    pub beat_period_frames: (usize, usize),
    /// Expected visual events per second.
    pub event_rate: f64,
    pub noise_sigma: f64,
    /// Fraction of patches carrying the visual beat flash (chosen per clip).
    pub beat_patch_fraction: f64,
    /// Flash amplitude on those patches.
    pub beat_flash_amp: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            latent_fps: 10.0,
            latent_channels: 8,
            grid_h: 4,
            grid_w: 4,
            patch_channels: 16,
            beat_period_frames: (4, 10),
            event_rate: 0.8,
            noise_sigma: 0.1,
            beat_patch_fraction: 0.25,
            beat_flash_amp: 0.8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beat_period_frames.0 < 2 || self.beat_period_frames.0 > self.beat_period_frames.1 {
            return Err(Error::Config(format!(
                "beat period range {:?} must start at >= 2 frames",
                self.beat_period_frames
            )));
        }
        if self.grid_h % 2 != 0 || self.grid_w % 2 != 0 {
            return Err(Error::Config(format!(
                "patch grid {}x{} must be even",
                self.grid_h, self.grid_w
            )));
        }
        if self.latent_channels < 8 {
            return Err(Error::Config("need at least 8 latent channels".into()));
        }
        if self.patch_channels < EVENT_KINDS * 3 + 1 {
            return Err(Error::Config(format!(
                "need at least {} patch channels",
                EVENT_KINDS * 3 + 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticEvent {
    pub frame: usize,
    pub patch: usize,
    pub kind: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub video: PatchFeatureSequence,
    pub cls: ClsSequence,
    pub music: LatentSequence,
    pub beats: BeatGrid,
    pub events: Vec<SyntheticEvent>,
}

impl SyntheticClip {
    pub fn frames(&self) -> usize {
        self.music.frames()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.music.fps
    }
}

/// Generate one paired clip. Deterministic given the RNG state; a zero
/// noise level additionally asserts that every rule-conformant shift
/// strictly lowers the music/video beat correlation.
pub fn gen_pair<R: Rng>(config: &WorldConfig, duration_s: f64, rng: &mut R) -> Result<SyntheticClip> {
    config.validate()?;
    if !(MIN_CLIP_S..=MAX_CLIP_S).contains(&duration_s) {
        return Err(Error::Input(format!(
            "duration {duration_s} s outside [{MIN_CLIP_S}, {MAX_CLIP_S}]"
        )));
    }
    let n = (duration_s * config.latent_fps).round() as usize;
    let cz = config.latent_channels;
    let (h, w, c) = (config.grid_h, config.grid_w, config.patch_channels);
    let l = h * w;

    let period = rng.random_range(config.beat_period_frames.0..=config.beat_period_frames.1);
    let phase = rng.random_range(0..period);
    let beat_frames: Vec<usize> = (0..)
        .map(|k| phase + k * period)
        .take_while(|&f| f < n)
        .collect();

    // events ride on beats so both modalities key to the same frames
    let per_beat_prob =
        (config.event_rate * period as f64 / config.latent_fps).clamp(0.0, 1.0);
    let mut events = Vec::new();
    for &f in &beat_frames {
        if rng.random_bool(per_beat_prob) {
            events.push(SyntheticEvent {
                frame: f,
                patch: rng.random_range(0..l),
                kind: rng.random_range(0..EVENT_KINDS),
            });
        }
    }

    // music latent
    let mut music = Tensor::zeros(&[n, cz]);
    for &f in &beat_frames {
        music.set(&[f, 0], 1.0);
    }
    for ev in &events {
        for j in 0..EVENT_DECAY_FRAMES {
            let t = ev.frame + j;
            if t < n {
                let amp = (-(j as f64) * 0.8).exp();
                let ch = 1 + ev.kind;
                music.set(&[t, ch], music.at(&[t, ch]) + amp);
            }
        }
    }
    let (ph1, ph2) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    for t in 0..n {
        let ts = t as f64 / config.latent_fps;
        let melody = 0.4 * (std::f64::consts::TAU * 0.31 * ts + ph1).sin()
            + 0.2 * (std::f64::consts::TAU * 0.11 * ts + ph2).sin();
        music.set(&[t, 5], melody);
        let beat_phase = (t + period - phase % period) as f64 / period as f64;
        music.set(&[t, 6], 0.3 * (std::f64::consts::TAU * beat_phase).sin());
    }
    // decoy channel: bursts at times unrelated to the true events
    let decoys = events.len();
    for _ in 0..decoys {
        let f = rng.random_range(0..n);
        for j in 0..EVENT_DECAY_FRAMES {
            if f + j < n {
                let amp = (-(j as f64) * 0.8).exp();
                music.set(&[f + j, 7], music.at(&[f + j, 7]) + amp);
            }
        }
    }

    // video patches: smooth background + beat flash + event bursts
    let mut video = Tensor::zeros(&[n, l, c]);
    for p in 0..l {
        for ch in 0..c {
            let mut v = 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            for t in 0..n {
                v = 0.95 * v + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                video.set(&[t, p, ch], 0.3 * v);
            }
        }
    }
    // the flash lives on a per-clip random subset of patches and is
    // antisymmetric across it (half +amp, half -amp): a plain average
    // cancels it, so exposing the beat takes learned spatial selection
    let flash_ch = c - 1;
    let flash_count = ((config.beat_patch_fraction * l as f64).ceil() as usize).clamp(2, l);
    let mut flash_patches: Vec<usize> = (0..l).collect();
    for i in 0..flash_count {
        let j = rng.random_range(i..l);
        flash_patches.swap(i, j);
    }
    flash_patches.truncate(flash_count);
    for &f in &beat_frames {
        for (k, &p) in flash_patches.iter().enumerate() {
            let amp = if k < flash_count / 2 {
                -config.beat_flash_amp
            } else {
                config.beat_flash_amp
            };
            video.set(&[f, p, flash_ch], video.at(&[f, p, flash_ch]) + amp);
        }
    }
    for ev in &events {
        for j in 0..3 {
            let t = ev.frame + j;
            if t < n {
                let amp = 2.0 * (-(j as f64)).exp();
                for dc in 0..3 {
                    let ch = ev.kind * 3 + dc;
                    video.set(&[t, ev.patch, ch], video.at(&[t, ev.patch, ch]) + amp);
                }
            }
        }
    }

    // noise on both modalities
    if config.noise_sigma > 0.0 {
        for v in music.data_mut() {
            *v += config.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        for v in video.data_mut() {
            *v += config.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }

    // cls: per-frame patch mean plus mild noise
    let mut cls = Tensor::zeros(&[n, c]);
    for t in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for p in 0..l {
                s += video.at(&[t, p, ch]);
            }
            cls.set(&[t, ch], s / l as f64);
        }
    }
    if config.noise_sigma > 0.0 {
        for v in cls.data_mut() {
            *v += 0.5 * config.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }

    let min_bpm = 60.0 * config.latent_fps / period as f64;
    let beat_times: Vec<f64> = beat_frames.iter().map(|&f| f as f64 / config.latent_fps).collect();
    let clip = SyntheticClip {
        video: PatchFeatureSequence::new(h, w, video)?,
        cls: ClsSequence { data: cls },
        music: LatentSequence { data: music, fps: config.latent_fps },
        beats: BeatGrid::from_beats(beat_times, min_bpm, config.latent_fps),
        events,
    };

    if config.noise_sigma == 0.0 {
        assert_shift_correlation_drops(&clip, rng);
    }
    Ok(clip)
}

/// Normalized correlation between the music beat channel and the video
/// flash channel (averaged over patches).
pub fn beat_correlation(clip: &SyntheticClip) -> f64 {
    correlation_with_shift(clip, 0)
}

fn correlation_with_shift(clip: &SyntheticClip, shift: i64) -> f64 {
    let n = clip.frames();
    let l = clip.video.data.shape()[1];
    let flash_ch = clip.video.channels() - 1;
    let mut dot = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for t in 0..n {
        let src = (t as i64 - shift).rem_euclid(n as i64) as usize;
        let a = clip.music.data.at(&[src, 0]);
        // magnitude, since the flash is antisymmetric across patches
        let mut b = 0.0;
        for p in 0..l {
            b += clip.video.data.at(&[t, p, flash_ch]).abs();
        }
        b /= l as f64;
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    dot / (na.sqrt() * nb.sqrt() + 1e-12)
}

fn assert_shift_correlation_drops<R: Rng>(clip: &SyntheticClip, rng: &mut R) {
    let rule = ShiftRule {
        minimal_cycle: clip.beats.minimal_cycle_frames,
        total_len: clip.frames(),
    };
    let base = beat_correlation(clip);
    for _ in 0..8 {
        if let Ok(s) = rule.sample(rng) {
            let shifted = correlation_with_shift(clip, s);
            assert!(
                shifted < base,
                "shift {s} did not lower beat correlation ({shifted} vs {base})"
            );
        }
    }
}

/// One windowed draw from a source clip.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub source: usize,
    pub clip: SyntheticClip,
}

/// Duration-weighted source selection (probability proportional to length).
pub fn sample_source<R: Rng>(durations: &[f64], rng: &mut R) -> usize {
    assert!(!durations.is_empty());
    let total: f64 = durations.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, &d) in durations.iter().enumerate() {
        if x < d {
            return i;
        }
        x -= d;
    }
    durations.len() - 1
}

/// Contiguous sub-clip `[start, start + len)` in latent frames. Beats and
/// events are re-based; the tempo (and minimal cycle) is unchanged.
pub fn slice_clip(clip: &SyntheticClip, start: usize, len: usize) -> SyntheticClip {
    let n = clip.frames();
    assert!(start + len <= n, "window {start}+{len} exceeds {n} frames");
    let fps = clip.music.fps;
    let slice2 = |t: &Tensor| {
        let c = t.shape()[1];
        let mut out = Tensor::zeros(&[len, c]);
        for i in 0..len {
            for ch in 0..c {
                out.set(&[i, ch], t.at(&[start + i, ch]));
            }
        }
        out
    };
    let l = clip.video.data.shape()[1];
    let c = clip.video.channels();
    let mut video = Tensor::zeros(&[len, l, c]);
    for i in 0..len {
        for p in 0..l {
            for ch in 0..c {
                video.set(&[i, p, ch], clip.video.data.at(&[start + i, p, ch]));
            }
        }
    }
    let t0 = start as f64 / fps;
    let t1 = (start + len) as f64 / fps;
    let beat_times: Vec<f64> = clip
        .beats
        .beat_times
        .iter()
        .filter(|&&t| t >= t0 && t < t1)
        .map(|&t| t - t0)
        .collect();
    let events = clip
        .events
        .iter()
        .filter(|e| e.frame >= start && e.frame < start + len)
        .map(|e| SyntheticEvent { frame: e.frame - start, ..*e })
        .collect();
    SyntheticClip {
        video: PatchFeatureSequence::new(clip.video.grid_h, clip.video.grid_w, video).unwrap(),
        cls: ClsSequence { data: slice2(&clip.cls.data) },
        music: LatentSequence { data: slice2(&clip.music.data), fps },
        beats: BeatGrid {
            beat_times,
            minimal_cycle_frames: clip.beats.minimal_cycle_frames,
            min_bpm: clip.beats.min_bpm,
        },
        events,
    }
}

/// Random 4-30 s window of one duration-weighted source.
pub fn sample_segment<R: Rng>(pool: &[SyntheticClip], rng: &mut R) -> Result<BatchItem> {
    if pool.is_empty() {
        return Err(Error::Input("empty clip pool".into()));
    }
    let durations: Vec<f64> = pool.iter().map(SyntheticClip::duration_s).collect();
    let source = sample_source(&durations, rng);
    let fps = pool[source].music.fps;
    let max_len_s = durations[source].min(MAX_CLIP_S);
    let len_s = if max_len_s > MIN_CLIP_S {
        rng.random_range(MIN_CLIP_S..max_len_s)
    } else {
        max_len_s
    };
    let len = (len_s * fps).round() as usize;
    let start = rng.random_range(0..=pool[source].frames() - len);
    Ok(BatchItem { source, clip: slice_clip(&pool[source], start, len) })
}

/// A batch of equal-length windows from `m` distinct duration-weighted
/// sources. Equal lengths keep cross-pair similarities well-defined.
pub fn sample_batch<R: Rng>(pool: &[SyntheticClip], m: usize, rng: &mut R) -> Result<Vec<BatchItem>> {
    if pool.len() < m {
        return Err(Error::Input(format!(
            "batch of {m} distinct sources from a pool of {}",
            pool.len()
        )));
    }
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let durations: Vec<f64> = remaining.iter().map(|&i| pool[i].duration_s()).collect();
        let pick = sample_source(&durations, rng);
        chosen.push(remaining.remove(pick));
    }
    let fps = pool[chosen[0]].music.fps;
    let shortest = chosen
        .iter()
        .map(|&i| pool[i].duration_s())
        .fold(f64::INFINITY, f64::min)
        .min(MAX_CLIP_S);
    let len_s = if shortest > MIN_CLIP_S {
        rng.random_range(MIN_CLIP_S..shortest)
    } else {
        shortest
    };
    let len = (len_s * fps).round() as usize;
    chosen
        .into_iter()
        .map(|source| {
            let start = rng.random_range(0..=pool[source].frames() - len);
            Ok(BatchItem { source, clip: slice_clip(&pool[source], start, len) })
        })
        .collect()
}

/// 10 ms raised-cosine clicks at the grid's beat times, peak 0.9.
pub fn render_click(beats: &BeatGrid, sr: u32) -> Result<Vec<f64>> {
    if beats.beat_times.is_empty() {
        return Err(Error::Input("no beats to render".into()));
    }
    let last = beats.beat_times.last().unwrap();
    let n = ((last + 0.5) * sr as f64).round() as usize;
    let mut pcm = vec![0.0; n];
    let click_len = (0.01 * sr as f64).round() as usize;
    for &t in &beats.beat_times {
        let start = (t * sr as f64).round() as usize;
        for i in 0..click_len {
            if start + i < n {
                let phase = i as f64 / click_len as f64;
                pcm[start + i] += 0.9 * 0.5 * (1.0 - (std::f64::consts::TAU * phase).cos());
            }
        }
    }
    for v in pcm.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(pcm)
}
