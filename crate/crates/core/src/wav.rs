//! Minimal RIFF/WAVE reader and writer, 16-bit PCM mono only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Write mono samples in [-1, 1] as 16-bit PCM.
pub fn write_wav_mono16(path: &Path, pcm: &[f64], sr: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (pcm.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&sr.to_le_bytes())?;
    w.write_all(&(sr * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits per sample
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &v in pcm {
        let s = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&s.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a 16-bit PCM mono WAV; returns samples in [-1, 1] and the rate.
pub fn read_wav_mono16(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?,
    );
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[0..4] != b"RIFF" || &head[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{}: not a RIFF/WAVE file", path.display())));
    }
    let mut sr = 0u32;
    let mut bits = 0u16;
    let mut channels = 0u16;
    loop {
        let mut chunk = [0u8; 8];
        if r.read_exact(&mut chunk).is_err() {
            return Err(Error::Format(format!("{}: missing data chunk", path.display())));
        }
        let size = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
        match &chunk[0..4] {
            b"fmt " => {
                let mut fmt = vec![0u8; size];
                r.read_exact(&mut fmt)?;
                let audio_format = u16::from_le_bytes(fmt[0..2].try_into().unwrap());
                channels = u16::from_le_bytes(fmt[2..4].try_into().unwrap());
                sr = u32::from_le_bytes(fmt[4..8].try_into().unwrap());
                bits = u16::from_le_bytes(fmt[14..16].try_into().unwrap());
                if audio_format != 1 {
                    return Err(Error::Format("only PCM wav supported".into()));
                }
            }
            b"data" => {
                if channels != 1 || bits != 16 {
                    return Err(Error::Format(format!(
                        "need 16-bit mono, got {bits}-bit {channels}-channel"
                    )));
                }
                let mut data = vec![0u8; size];
                r.read_exact(&mut data)?;
                let pcm = data
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32767.0)
                    .collect();
                return Ok((pcm, sr));
            }
            _ => {
                // skip unknown chunk
                let mut skip = vec![0u8; size];
                r.read_exact(&mut skip)?;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_samples_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let pcm: Vec<f64> = (0..1000)
            .map(|i| (i as f64 * 0.05).sin() * 0.8)
            .collect();
        write_wav_mono16(&path, &pcm, 24_000).unwrap();
        let (back, sr) = read_wav_mono16(&path).unwrap();
        assert_eq!(sr, 24_000);
        assert_eq!(back.len(), pcm.len());
        for (a, b) in back.iter().zip(&pcm) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav_mono16(&path).is_err());
    }
}
