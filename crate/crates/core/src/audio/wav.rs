//! Minimal RIFF/WAVE reader and writer for 16-bit PCM mono files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded mono audio, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn wav_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a PCM 16-bit mono WAV file; samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_wav(&bytes).map_err(|detail| wav_err(path, detail))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<AudioClip, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("malformed header: not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // codec, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(format!(
                "malformed header: chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            ));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("malformed header: fmt chunk too small".into());
                }
                fmt = Some((u16_at(body, 0), u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (codec, channels, rate, bits) = fmt.ok_or("malformed header: missing fmt chunk")?;
    if codec != 1 {
        return Err(format!("unsupported encoding: format tag {codec} (want PCM)"));
    }
    if channels != 1 {
        return Err(format!("unsupported channel count: {channels} (want mono)"));
    }
    if bits != 16 {
        return Err(format!("unsupported sample width: {bits} bits (want 16)"));
    }
    if rate == 0 {
        return Err("malformed header: zero sample rate".into());
    }
    let data = data.ok_or("malformed header: missing data chunk")?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err("empty data chunk".into());
    }
    Ok(AudioClip {
        samples,
        sample_rate: rate,
    })
}

/// Write samples (clamped to [-1, 1]) as PCM 16-bit mono.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut pcm = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        pcm.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + pcm.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(pcm.len() as u32).to_le_bytes());
    out.extend_from_slice(&pcm);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn raw_wav(channels: u16, bits: u16, codec: u16, pcm: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + pcm.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&codec.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(pcm.len() as u32).to_le_bytes());
        out.extend_from_slice(pcm);
        out
    }

    #[test]
    fn silence_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        write_wav(&path, &vec![0.0; 16000], 16000).unwrap();
        let clip = read_wav(&path).unwrap();
        assert_eq!(clip.sample_rate, 16000);
        assert_eq!(clip.samples.len(), 16000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_scaling() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("square.wav");
        let pcm: Vec<u8> = std::iter::repeat(32767i16.to_le_bytes())
            .take(100)
            .flatten()
            .collect();
        std::fs::write(&path, raw_wav(1, 16, 1, &pcm)).unwrap();
        let clip = read_wav(&path).unwrap();
        let expect = 32767.0 / 32768.0;
        assert!(clip.samples.iter().all(|&s| (s - expect).abs() < 1e-12));
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        std::fs::write(&path, raw_wav(2, 16, 1, &[0u8; 8])).unwrap();
        let err = read_wav(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported channel count"), "{err}");
    }

    #[test]
    fn non_pcm_and_garbage_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("float.wav");
        std::fs::write(&path, raw_wav(1, 16, 3, &[0u8; 8])).unwrap();
        assert!(read_wav(&path)
            .unwrap_err()
            .to_string()
            .contains("unsupported encoding"));

        let path2 = dir.path().join("garbage.wav");
        std::fs::write(&path2, b"not a wav at all").unwrap();
        assert!(read_wav(&path2)
            .unwrap_err()
            .to_string()
            .contains("malformed header"));
    }
}
