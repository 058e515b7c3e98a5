//! MFCC baseline features from 16-bit PCM mono WAV audio.
//!
//! Pre-emphasis, Hamming window, power spectrum, triangular mel filterbank,
//! floored log, orthonormal DCT-II; optional first and second order deltas
//! over a +/-2 frame window with edge replication.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, FeatureArchive, Provenance, Utterance};

/// Floor applied to filterbank energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;
const DELTA_WINDOW: usize = 2;

#[derive(Debug, Error)]
pub enum MfccError {
    #[error("{samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported WAV format in {path}: {reason}")]
    UnsupportedFormat { path: String, reason: String },
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRate { path: String, found: u32, expected: u32 },
    #[error("WAV error in {path}: {source}")]
    Wav { path: String, source: hound::Error },
    #[error("no .wav files in {0}")]
    NoAudio(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mel_filters: usize,
    pub n_cepstra: usize,
    pub pre_emphasis: f64,
    pub include_deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mel_filters: 40,
            n_cepstra: 13,
            pre_emphasis: 0.97,
            include_deltas: true,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(self.sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn frame_period_us(&self) -> u32 {
        (self.hop_ms * 1000.0).round() as u32
    }

    pub fn output_dim(&self) -> usize {
        if self.include_deltas {
            3 * self.n_cepstra
        } else {
            self.n_cepstra
        }
    }

    pub fn validate(&self) -> Result<(), MfccError> {
        let bad = |m: String| Err(MfccError::InvalidConfig(m));
        if self.sample_rate_hz == 0 || self.window_samples() == 0 || self.hop_samples() == 0 {
            return bad("sample rate, window and hop must be positive".into());
        }
        if self.hop_ms > self.window_ms {
            return bad(format!("hop {} ms exceeds window {} ms", self.hop_ms, self.window_ms));
        }
        if self.n_cepstra == 0 || self.n_cepstra > self.n_mel_filters {
            return bad(format!("n_cepstra must be in 1..={}", self.n_mel_filters));
        }
        if self.n_fft < self.window_samples() {
            return bad(format!("n_fft {} is shorter than the window ({} samples)", self.n_fft, self.window_samples()));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return bad("pre_emphasis must be in [0, 1)".into());
        }
        Ok(())
    }

    /// `floor((n - window) / hop) + 1`.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        let w = self.window_samples();
        if n_samples < w {
            0
        } else {
            (n_samples - w) / self.hop_samples() + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel filters, equally spaced on the mel
/// scale between 0 and Nyquist.
pub fn mel_centers(config: &MfccConfig) -> Vec<f64> {
    let top = hz_to_mel(f64::from(config.sample_rate_hz) / 2.0);
    let m = config.n_mel_filters;
    (1..=m).map(|i| mel_to_hz(top * i as f64 / (m + 1) as f64)).collect()
}

/// Triangular filter weights, `n_mel_filters x (n_fft / 2 + 1)`.
pub fn mel_filterbank(config: &MfccConfig) -> Array2<f64> {
    let m = config.n_mel_filters;
    let n_bins = config.n_fft / 2 + 1;
    let top = hz_to_mel(f64::from(config.sample_rate_hz) / 2.0);
    let edges: Vec<f64> = (0..m + 2).map(|i| mel_to_hz(top * i as f64 / (m + 1) as f64)).collect();
    let bin_hz = f64::from(config.sample_rate_hz) / config.n_fft as f64;
    Array2::from_shape_fn((m, n_bins), |(i, k)| {
        let f = k as f64 * bin_hz;
        let (lo, c, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        if f > lo && f <= c {
            (f - lo) / (c - lo)
        } else if f > c && f < hi {
            (hi - f) / (hi - c)
        } else {
            0.0
        }
    })
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Mel filterbank energies per frame (before the log).
pub fn filterbank_energies(samples: &[f64], config: &MfccConfig) -> Result<Array2<f64>, MfccError> {
    config.validate()?;
    let w = config.window_samples();
    if samples.len() < w {
        return Err(MfccError::TooShort { samples: samples.len(), window: w });
    }
    let hop = config.hop_samples();
    let n_frames = config.num_frames(samples.len());
    let mut emph = Vec::with_capacity(samples.len());
    emph.push(samples[0]);
    for i in 1..samples.len() {
        emph.push(samples[i] - config.pre_emphasis * samples[i - 1]);
    }
    let window = hamming(w);
    let fb = mel_filterbank(config);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(config.n_fft);
    let n_bins = config.n_fft / 2 + 1;
    let rows: Vec<Vec<f64>> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); config.n_fft];
            for (i, b) in buf.iter_mut().take(w).enumerate() {
                b.re = emph[t * hop + i] * window[i];
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
            fb.rows().into_iter().map(|f| f.iter().zip(&power).map(|(a, b)| a * b).sum()).collect()
        })
        .collect();
    let m = config.n_mel_filters;
    Ok(Array2::from_shape_fn((n_frames, m), |(t, j)| rows[t][j]))
}

/// Orthonormal DCT-II of `x`, first `n_out` coefficients.
pub fn dct2(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale * x.iter().enumerate().map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos()).sum::<f64>()
        })
        .collect()
}

/// Regression deltas over +/-2 frames; edge frames are replicated.
pub fn deltas(x: &Array2<f64>) -> Array2<f64> {
    let (t_len, d) = x.dim();
    let norm: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    Array2::from_shape_fn((t_len, d), |(t, j)| {
        let mut acc = 0.0;
        for n in 1..=DELTA_WINDOW {
            let ahead = (t + n).min(t_len - 1);
            let behind = t.saturating_sub(n);
            acc += n as f64 * (x[[ahead, j]] - x[[behind, j]]);
        }
        acc / norm
    })
}

/// MFCCs of one signal, `T x output_dim`.
pub fn compute_mfcc(samples: &[f64], config: &MfccConfig) -> Result<Array2<f64>, MfccError> {
    let energies = filterbank_energies(samples, config)?;
    let n = energies.nrows();
    let c = config.n_cepstra;
    let mut ceps = Array2::<f64>::zeros((n, c));
    for (t, row) in energies.rows().into_iter().enumerate() {
        let logs: Vec<f64> = row.iter().map(|&e| e.max(LOG_FLOOR).ln()).collect();
        for (k, v) in dct2(&logs, c).into_iter().enumerate() {
            ceps[[t, k]] = v;
        }
    }
    if !config.include_deltas {
        return Ok(ceps);
    }
    let d1 = deltas(&ceps);
    let d2 = deltas(&d1);
    let mut out = Array2::<f64>::zeros((n, 3 * c));
    for t in 0..n {
        for k in 0..c {
            out[[t, k]] = ceps[[t, k]];
            out[[t, c + k]] = d1[[t, k]];
            out[[t, 2 * c + k]] = d2[[t, k]];
        }
    }
    Ok(out)
}

/// Samples of a 16-bit PCM mono WAV file, scaled to [-1, 1), and its rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32), MfccError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|source| MfccError::Wav { path: name.clone(), source })?;
    let spec = reader.spec();
    let unsupported = |reason: String| MfccError::UnsupportedFormat { path: name.clone(), reason };
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!("{}-bit {:?}, expected 16-bit PCM", spec.bits_per_sample, spec.sample_format)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| MfccError::Wav { path: name.clone(), source })?;
    Ok((samples, spec.sample_rate))
}

/// MFCC archive of every `.wav` file in `dir`, one utterance per file named
/// by its file stem, in sorted order.
pub fn extract_wav_dir(dir: impl AsRef<Path>, config: &MfccConfig) -> Result<FeatureArchive, MfccError> {
    config.validate()?;
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(MfccError::NoAudio(dir.display().to_string()));
    }
    let utts = paths
        .par_iter()
        .map(|p| {
            let (samples, rate) = read_wav(p)?;
            if rate != config.sample_rate_hz {
                return Err(MfccError::SampleRate {
                    path: p.display().to_string(),
                    found: rate,
                    expected: config.sample_rate_hz,
                });
            }
            let feats = compute_mfcc(&samples, config)?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Utterance::new(id, feats.mapv(|v| v as f32)))
        })
        .collect::<Result<Vec<_>, MfccError>>()?;
    Ok(FeatureArchive::from_utterances(config.output_dim(), config.frame_period_us(), utts)?.with_provenance(Provenance::Raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        let cfg = MfccConfig::default();
        let out = compute_mfcc(&vec![0.01; 16_000], &cfg).unwrap();
        assert_eq!(out.dim(), (98, 39));
        assert!(matches!(compute_mfcc(&[0.0; 100], &cfg), Err(MfccError::TooShort { .. })));
    }

    #[test]
    fn silence_is_floor_dct() {
        let cfg = MfccConfig { include_deltas: false, ..Default::default() };
        let out = compute_mfcc(&vec![0.0; 4000], &cfg).unwrap();
        let expected = dct2(&vec![LOG_FLOOR.ln(); cfg.n_mel_filters], cfg.n_cepstra);
        for row in out.rows() {
            for (a, b) in row.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(MfccConfig { hop_ms: 30.0, ..Default::default() }.validate().is_err());
        assert!(MfccConfig { n_cepstra: 41, ..Default::default() }.validate().is_err());
        assert!(MfccConfig { n_fft: 256, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn deltas_of_linear_ramp() {
        let x = Array2::from_shape_fn((9, 1), |(t, _)| t as f64);
        let d = deltas(&x);
        assert!((d[[4, 0]] - 1.0).abs() < 1e-12);
        assert!(d[[0, 0]] < 1.0);
    }
}
