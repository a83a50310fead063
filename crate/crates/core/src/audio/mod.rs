//! Log mel-filterbank feature extraction: STFT, mel filter bank, log energy,
//! and per-utterance mean/variance normalization.

mod cache;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache};
pub use wav::{read_wav, write_wav, AudioClip};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const N_MELS: usize = 40;
pub const DEFAULT_WINDOW_S: f64 = 0.025;
pub const DEFAULT_HOP_S: f64 = 0.010;
pub const LOG_FLOOR: f64 = 1e-10;

/// Triangular mel filters evaluated at FFT bin frequencies.
#[derive(Debug, Clone)]
pub struct FilterBank {
    /// n_mels x n_bins weights, row-major.
    pub matrix: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Peak (center) frequency of each filter in Hz.
    pub mel_centers_hz: Vec<f64>,
}

/// Per-utterance T x dim feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub frame_shift_s: f64,
    pub n_frames: usize,
    pub dim: usize,
    /// Row-major, n_frames x dim.
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Power spectrogram, T x (n_fft/2 + 1).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
    pub sample_rate: u32,
    pub n_fft: usize,
}

pub fn frame_count(n_samples: usize, win: usize, hop: usize) -> Option<usize> {
    if n_samples < win {
        return None;
    }
    Some(1 + (n_samples - win) / hop)
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Hann-windowed power spectrogram. `n_fft` is the next power of two at or
/// above the window length; frames are hopped by `hop_s`.
pub fn stft(clip: &AudioClip, window_s: f64, hop_s: f64) -> Result<Spectrogram> {
    let sr = clip.sample_rate as f64;
    let win = (window_s * sr).round() as usize;
    let hop = (hop_s * sr).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::InvalidValue {
            op: "stft",
            detail: format!("degenerate window/hop: {window_s}s/{hop_s}s at {sr} Hz"),
        });
    }
    let n_frames = frame_count(clip.samples.len(), win, hop).ok_or(Error::InvalidValue {
        op: "stft",
        detail: format!(
            "clip of {} samples is shorter than one {win}-sample window",
            clip.samples.len()
        ),
    })?;
    let n_fft = next_pow2(win);
    let n_bins = n_fft / 2 + 1;
    // periodic Hann window
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut data = Vec::with_capacity(n_frames * n_bins);
    let mut buf = vec![Complex64::default(); n_fft];
    for f in 0..n_frames {
        let start = f * hop;
        for i in 0..n_fft {
            let s = if i < win {
                clip.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex64::new(s, 0.0);
        }
        fft.process(&mut buf);
        data.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Spectrogram {
        n_frames,
        n_bins,
        data,
        sample_rate: clip.sample_rate,
        n_fft,
    })
}

/// HTK mel scale: 2595 * log10(1 + f/700).
pub fn mel_scale(f_hz: f64) -> Result<f64> {
    if f_hz < 0.0 {
        return Err(Error::InvalidValue {
            op: "mel_scale",
            detail: format!("negative frequency {f_hz}"),
        });
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peaks at mel-equispaced centers; `n_mels + 2` edge
/// points between `f_min` and `f_max`, each triangle peaking at 1.
pub fn build_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<FilterBank> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 || f_min < 0.0 || f_min >= f_max || f_max > nyquist {
        return Err(Error::InvalidValue {
            op: "build_filterbank",
            detail: format!("invalid frequency range [{f_min}, {f_max}] at sr {sample_rate}"),
        });
    }
    let mel_lo = mel_scale(f_min)?;
    let mel_hi = mel_scale(f_max)?;
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut matrix = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            matrix[m * n_bins + k] = w;
        }
    }
    Ok(FilterBank {
        matrix,
        n_mels,
        n_bins,
        mel_centers_hz: edges_hz[1..=n_mels].to_vec(),
    })
}

/// ln(max(fbank * power, floor)) per frame.
pub fn log_mel(
    spec: &Spectrogram,
    fbank: &FilterBank,
    utterance_id: &str,
    frame_shift_s: f64,
) -> Result<FeatureMatrix> {
    if spec.n_bins != fbank.n_bins {
        return Err(Error::Shape {
            op: "log_mel",
            detail: format!(
                "spectrogram has {} bins, filter bank expects {}",
                spec.n_bins, fbank.n_bins
            ),
        });
    }
    let mut data = Vec::with_capacity(spec.n_frames * fbank.n_mels);
    for t in 0..spec.n_frames {
        let frame = &spec.data[t * spec.n_bins..(t + 1) * spec.n_bins];
        for m in 0..fbank.n_mels {
            let row = &fbank.matrix[m * fbank.n_bins..(m + 1) * fbank.n_bins];
            let e: f64 = row.iter().zip(frame).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(FeatureMatrix {
        utterance_id: utterance_id.to_string(),
        frame_shift_s,
        n_frames: spec.n_frames,
        dim: fbank.n_mels,
        data,
    })
}

/// Per-utterance, per-dimension zero mean and unit variance
/// (variance floor 1e-8).
pub fn cmvn(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (t, d) = (features.n_frames, features.dim);
    if t < 2 {
        return Err(Error::InvalidValue {
            op: "cmvn",
            detail: format!("need at least 2 frames, got {t}"),
        });
    }
    let mut out = features.clone();
    for c in 0..d {
        let mut mean = 0.0;
        for r in 0..t {
            mean += features.data[r * d + c];
        }
        mean /= t as f64;
        let mut var = 0.0;
        for r in 0..t {
            let x = features.data[r * d + c] - mean;
            var += x * x;
        }
        var /= t as f64;
        let inv_std = 1.0 / var.max(1e-8).sqrt();
        for r in 0..t {
            out.data[r * d + c] = (features.data[r * d + c] - mean) * inv_std;
        }
    }
    Ok(out)
}

/// Full front end for one clip: STFT at the 25 ms / 10 ms defaults, 40 mel
/// filters over [20 Hz, Nyquist], optional CMVN.
pub fn extract_features(
    clip: &AudioClip,
    utterance_id: &str,
    apply_cmvn: bool,
) -> Result<FeatureMatrix> {
    let spec = stft(clip, DEFAULT_WINDOW_S, DEFAULT_HOP_S)?;
    let fbank = build_filterbank(
        N_MELS,
        spec.n_fft,
        clip.sample_rate,
        20.0,
        clip.sample_rate as f64 / 2.0,
    )?;
    let feats = log_mel(&spec, &fbank, utterance_id, DEFAULT_HOP_S)?;
    if apply_cmvn {
        cmvn(&feats)
    } else {
        Ok(feats)
    }
}
