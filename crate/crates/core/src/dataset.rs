//! Dataset directory layout: a JSON manifest plus tensor files per clip
//! (`<id>.video.mvt`, `<id>.cls.mvt`, `<id>.music.mvt`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptor::{ClsSequence, PatchFeatureSequence};
use crate::beat::BeatGrid;
use crate::error::{Error, Result};
use crate::flowgen::LatentSequence;
use crate::synthdata::{SyntheticClip, SyntheticEvent, WorldConfig};
use crate::tensor_io::{read_tensor, write_tensor, DType};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub frames: usize,
    pub beat_times: Vec<f64>,
    pub minimal_cycle_frames: usize,
    pub min_bpm: f64,
    pub events: Vec<SyntheticEvent>,
}

impl ClipRecord {
    pub fn video_file(&self) -> String {
        format!("{}.video.mvt", self.id)
    }

    pub fn cls_file(&self) -> String {
        format!("{}.cls.mvt", self.id)
    }

    pub fn music_file(&self) -> String {
        format!("{}.music.mvt", self.id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldConfig,
    pub seed: u64,
    pub clips: Vec<ClipRecord>,
}

pub fn write_dataset(
    dir: &Path,
    world: &WorldConfig,
    seed: u64,
    clips: &[(String, u64, SyntheticClip)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(clips.len());
    for (id, clip_seed, clip) in clips {
        let rec = ClipRecord {
            id: id.clone(),
            seed: *clip_seed,
            duration_s: clip.duration_s(),
            frames: clip.frames(),
            beat_times: clip.beats.beat_times.clone(),
            minimal_cycle_frames: clip.beats.minimal_cycle_frames,
            min_bpm: clip.beats.min_bpm,
            events: clip.events.clone(),
        };
        write_tensor(&dir.join(rec.video_file()), &clip.video.data, DType::F32)?;
        write_tensor(&dir.join(rec.cls_file()), &clip.cls.data, DType::F32)?;
        write_tensor(&dir.join(rec.music_file()), &clip.music.data, DType::F32)?;
        records.push(rec);
    }
    let manifest = DatasetManifest { world: world.clone(), seed, clips: records };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let data =
        fs::read(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&data)?)
}

pub fn load_clip(dir: &Path, world: &WorldConfig, rec: &ClipRecord) -> Result<SyntheticClip> {
    let video = read_tensor(&dir.join(rec.video_file()))?;
    let cls = read_tensor(&dir.join(rec.cls_file()))?;
    let music = read_tensor(&dir.join(rec.music_file()))?;
    Ok(SyntheticClip {
        video: PatchFeatureSequence::new(world.grid_h, world.grid_w, video)?,
        cls: ClsSequence { data: cls },
        music: LatentSequence { data: music, fps: world.latent_fps },
        beats: BeatGrid {
            beat_times: rec.beat_times.clone(),
            minimal_cycle_frames: rec.minimal_cycle_frames,
            min_bpm: rec.min_bpm,
        },
        events: rec.events.clone(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SyntheticClip>)> {
    let manifest = load_manifest(dir)?;
    let clips = manifest
        .clips
        .iter()
        .map(|rec| load_clip(dir, &manifest.world, rec))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_pair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let world = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clips: Vec<(String, u64, SyntheticClip)> = (0..3)
            .map(|i| {
                (
                    format!("clip_{i:04}"),
                    i as u64,
                    gen_pair(&world, 6.0 + i as f64, &mut rng).unwrap(),
                )
            })
            .collect();
        write_dataset(dir.path(), &world, 5, &clips).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.clips.len(), 3);
        assert_eq!(loaded.len(), 3);
        for ((_, _, orig), back) in clips.iter().zip(&loaded) {
            assert_eq!(orig.frames(), back.frames());
            assert_eq!(orig.beats.beat_times, back.beats.beat_times);
            assert_eq!(orig.events, back.events);
            // f32 storage: equal after one round of f32 quantization
            for (a, b) in orig.music.data.data().iter().zip(back.music.data.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn missing_dir_is_input_error() {
        assert!(matches!(
            load_manifest(Path::new("/no/such/dataset")),
            Err(Error::Input(_))
        ));
    }
}
