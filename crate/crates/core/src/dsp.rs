//! Log-mel front end: 64 ms Hann window, 32 ms hop, 40 mel bins at 16 kHz.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::{Error, Result, N_MELS, SAMPLE_RATE_HZ};

/// Analysis window length in samples (64 ms).
pub const WIN_LENGTH: usize = 1024;
/// Frame advance in samples (32 ms).
pub const HOP_LENGTH: usize = 512;
/// One-sided spectrum size for a 1024-point transform.
pub const N_FFT_BINS: usize = WIN_LENGTH / 2 + 1;
/// Floor added before taking the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Symmetric Hann window, `w[k] = 0.5 - 0.5 cos(2πk/(n-1))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("hann window needs n >= 2, got {n}")));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / denom).cos())
        .collect())
}

/// Number of full frames that fit in `n_samples`.
pub fn frame_count(n_samples: usize, win: usize, hop: usize) -> usize {
    if n_samples < win {
        0
    } else {
        (n_samples - win) / hop + 1
    }
}

/// Row-major `n_frames × n_bins` power spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }
}

/// Log-mel features, row-major `n_frames × n_mels` (time-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub frames: Vec<f32>,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn hop_ms(&self) -> f64 {
        HOP_LENGTH as f64 * 1000.0 / SAMPLE_RATE_HZ as f64
    }

    pub fn win_ms(&self) -> f64 {
        WIN_LENGTH as f64 * 1000.0 / SAMPLE_RATE_HZ as f64
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, row-major `n_mels × n_bins`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Peak frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Area-normalized triangular filters with centers equally spaced on the
/// `2595·log10(1 + f/700)` mel scale.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft_bins: usize,
    f_min: f64,
    f_max: f64,
    sample_rate_hz: u32,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if n_mels == 0 || n_fft_bins < 2 {
        return Err(Error::invalid(
            "filterbank needs n_mels >= 1 and n_fft_bins >= 2",
        ));
    }
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::invalid(format!(
            "invalid frequency range [{f_min}, {f_max}] for nyquist {nyquist}"
        )));
    }
    let n_fft = 2 * (n_fft_bins - 1);
    let fft_freqs: Vec<f64> = (0..n_fft_bins)
        .map(|k| k as f64 * sample_rate_hz as f64 / n_fft as f64)
        .collect();

    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = vec![0.0; n_mels * n_fft_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        let norm = 2.0 / (hi - lo);
        let row = &mut weights[m * n_fft_bins..(m + 1) * n_fft_bins];
        for (w, &f) in row.iter_mut().zip(&fft_freqs) {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            *w = rising.min(falling).max(0.0) * norm;
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins: n_fft_bins,
        weights,
        centers_hz: points[1..=n_mels].to_vec(),
    })
}

/// Reusable extractor holding the FFT plan, window and filterbank.
#[derive(Clone)]
pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("window", &self.window.len())
            .field("n_mels", &self.filterbank.n_mels)
            .finish()
    }
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(WIN_LENGTH);
        let window = hann_window(WIN_LENGTH).expect("window length is a constant >= 2");
        let filterbank = mel_filterbank(
            N_MELS,
            N_FFT_BINS,
            0.0,
            SAMPLE_RATE_HZ as f64 / 2.0,
            SAMPLE_RATE_HZ,
        )
        .expect("constant filterbank parameters are valid");
        Self {
            fft,
            window,
            filterbank,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Windowed 1024-point power spectrum of every full frame.
    pub fn power(&self, samples: &[f32]) -> Result<PowerSpectrogram> {
        if samples.len() < WIN_LENGTH {
            return Err(Error::invalid(format!(
                "waveform of {} samples is shorter than one {WIN_LENGTH}-sample window",
                samples.len()
            )));
        }
        let n_frames = frame_count(samples.len(), WIN_LENGTH, HOP_LENGTH);
        let mut data = Vec::with_capacity(n_frames * N_FFT_BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); WIN_LENGTH];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &samples[t * HOP_LENGTH..t * HOP_LENGTH + WIN_LENGTH];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(buf[..N_FFT_BINS].iter().map(|c| c.norm_sqr()));
        }
        Ok(PowerSpectrogram {
            n_frames,
            n_bins: N_FFT_BINS,
            data,
        })
    }

    /// `ln(filterbank · power + ε)` per frame.
    pub fn log_mel_from_power(&self, power: &PowerSpectrogram) -> Result<MelSpectrogram> {
        if power.n_bins != self.filterbank.n_bins {
            return Err(Error::shape(format!(
                "power spectrum has {} bins, filterbank expects {}",
                power.n_bins, self.filterbank.n_bins
            )));
        }
        let n_mels = self.filterbank.n_mels;
        let mut frames = Vec::with_capacity(power.n_frames * n_mels);
        for t in 0..power.n_frames {
            let p = power.frame(t);
            for m in 0..n_mels {
                let energy: f64 = self
                    .filterbank
                    .filter(m)
                    .iter()
                    .zip(p)
                    .map(|(w, x)| w * x)
                    .sum();
                frames.push((energy + LOG_FLOOR).ln() as f32);
            }
        }
        Ok(MelSpectrogram {
            n_frames: power.n_frames,
            n_mels,
            frames,
        })
    }

    pub fn extract(&self, samples: &[f32]) -> Result<MelSpectrogram> {
        self.log_mel_from_power(&self.power(samples)?)
    }
}

/// Power spectrogram of a waveform with the fixed 1024/512 framing.
pub fn stft_power(wave: &Waveform) -> Result<PowerSpectrogram> {
    LogMelExtractor::new().power(&wave.samples)
}

pub fn extract_log_mel(wave: &Waveform) -> Result<MelSpectrogram> {
    if wave.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedSampleRate(wave.sample_rate_hz));
    }
    LogMelExtractor::new().extract(&wave.samples)
}

/// Writes the feature cache layout: `u32 n_frames`, `u32 n_mels`, then
/// row-major little-endian `f32` values.
pub fn write_feature_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + mel.frames.len() * 4);
    bytes.extend_from_slice(&(mel.n_frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.n_mels as u32).to_le_bytes());
    for v in &mel.frames {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<MelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::invalid(format!(
            "{}: feature cache header truncated",
            path.display()
        )));
    }
    let n_frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() != n_frames * n_mels * 4 {
        return Err(Error::invalid(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            n_frames * n_mels * 4,
            payload.len()
        )));
    }
    let frames = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MelSpectrogram {
        n_frames,
        n_mels,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n²) reference transform of one frame.
    fn naive_dft_power(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * j) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }

    fn sine(freq: f64, n: usize, amp: f64) -> Vec<f32> {
        (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE_HZ as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn hann_small_cases() {
        let w3 = hann_window(3).unwrap();
        assert!(w3[0].abs() < 1e-15 && (w3[1] - 1.0).abs() < 1e-15 && w3[2].abs() < 1e-15);
        let w5 = hann_window(5).unwrap();
        assert!((w5[2] - 1.0).abs() < 1e-15);
        assert!(hann_window(1).is_err());
    }

    #[test]
    fn hann_1024_sum() {
        // closed form summed directly, compared with the (n-1)/2 identity
        let direct: f64 = (0..1024)
            .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / 1023.0).cos())
            .sum();
        let w: f64 = hann_window(1024).unwrap().iter().sum();
        assert!((w - direct).abs() < 1e-9);
        assert!((w - 511.5).abs() < 1e-9);
    }

    #[test]
    fn silence_gives_zero_power() {
        let p = stft_power(&wave(vec![0.0; 4096])).unwrap();
        assert!(p.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fft_matches_naive_dft() {
        let samples = sine(1000.0, 1024, 0.5);
        let p = stft_power(&wave(samples.clone())).unwrap();
        let window = hann_window(1024).unwrap();
        let frame: Vec<f64> = samples
            .iter()
            .zip(&window)
            .map(|(&s, w)| s as f64 * w)
            .collect();
        let naive = naive_dft_power(&frame);
        let scale = naive.iter().cloned().fold(0.0, f64::max);
        for (a, b) in p.frame(0).iter().zip(&naive) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
        let argmax = naive
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 64);
        let fast_argmax = p
            .frame(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(fast_argmax, 64);
    }

    #[test]
    fn parseval_holds_per_frame() {
        let samples: Vec<f32> = (0..3000)
            .map(|i| ((i * 7919 % 1000) as f32 / 1000.0) - 0.5)
            .collect();
        let p = stft_power(&wave(samples.clone())).unwrap();
        let window = hann_window(1024).unwrap();
        for t in 0..p.n_frames {
            let energy: f64 = samples[t * 512..t * 512 + 1024]
                .iter()
                .zip(&window)
                .map(|(&s, w)| (s as f64 * w).powi(2))
                .sum();
            let f = p.frame(t);
            let full = f[0] + f[512] + 2.0 * f[1..512].iter().sum::<f64>();
            let rel = (full / 1024.0 - energy).abs() / energy;
            assert!(rel < 1e-6, "frame {t}: relative error {rel}");
        }
    }

    #[test]
    fn shift_equivariance_over_whole_hops() {
        let signal = sine(440.0, 4096, 0.3);
        let mut padded = vec![0.0f32; 3 * HOP_LENGTH];
        padded.extend_from_slice(&signal);
        let a = stft_power(&wave(signal)).unwrap();
        let b = stft_power(&wave(padded)).unwrap();
        assert_eq!(b.n_frames, a.n_frames + 3);
        for t in 0..a.n_frames {
            assert_eq!(a.frame(t), b.frame(t + 3));
        }
    }

    #[test]
    fn short_wave_is_rejected() {
        assert!(stft_power(&wave(vec![0.0; 1023])).is_err());
    }

    #[test]
    fn filterbank_shape_and_support() {
        let fb = mel_filterbank(40, 513, 0.0, 8000.0, 16000).unwrap();
        assert_eq!(fb.weights.len(), 40 * 513);
        for m in 0..40 {
            let row = fb.filter(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let nz: Vec<usize> = (0..513).filter(|&k| row[k] > 0.0).collect();
            // compact, contiguous support
            assert!(!nz.is_empty());
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
        assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn first_filter_peak_matches_hand_inversion() {
        // mel(8000) = 2595 log10(1 + 8000/700); first interior point is 1/41 of it.
        let mel_top = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let first_hz = 700.0 * (10f64.powf(mel_top / 41.0 / 2595.0) - 1.0);
        let fb = mel_filterbank(40, 513, 0.0, 8000.0, 16000).unwrap();
        assert!((fb.centers_hz[0] - first_hz).abs() < 1e-9);
        assert!((first_hz - 44.37).abs() < 0.01);
        let row = fb.filter(0);
        let peak = (0..513)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        assert_eq!(peak, (first_hz / 15.625).round() as usize);
    }

    #[test]
    fn filterbank_rejects_bad_range() {
        assert!(mel_filterbank(40, 513, 0.0, 9000.0, 16000).is_err());
        assert!(mel_filterbank(40, 513, 500.0, 100.0, 16000).is_err());
        assert!(mel_filterbank(0, 513, 0.0, 8000.0, 16000).is_err());
    }

    #[test]
    fn log_mel_frame_count_and_floor() {
        let mel = extract_log_mel(&wave(vec![0.0; 16000])).unwrap();
        assert_eq!(mel.n_frames, (16000 - 1024) / 512 + 1);
        assert_eq!(mel.n_frames, 30);
        assert_eq!(mel.n_mels, 40);
        let floor = (1e-10f64).ln() as f32;
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn log_mel_respects_floor_for_signal() {
        let mel = extract_log_mel(&wave(sine(300.0, 5000, 0.2))).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(mel.frames.iter().all(|&v| v >= floor));
        assert_eq!(mel.n_frames, frame_count(5000, 1024, 512));
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.feat");
        let mel = extract_log_mel(&wave(sine(200.0, 3000, 0.1))).unwrap();
        write_feature_cache(&path, &mel).unwrap();
        assert_eq!(read_feature_cache(&path).unwrap(), mel);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], &(mel.n_frames as u32).to_le_bytes());
        assert_eq!(&bytes[4..8], &40u32.to_le_bytes());
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_feature_cache(&path).is_err());
    }
}
