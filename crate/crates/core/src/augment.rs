//! Signal-level (noise, volume, VTLP) and feature-level (time mask, frequency
//! mask, SpecAugment) augmentations. Every function is a pure function of its
//! input, parameters and seed.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Segment, Waveform};
use crate::dsp::{LogMelExtractor, PowerSpectrogram, HOP_LENGTH, WIN_LENGTH};
use crate::rng::{derive, seeded};
use crate::{Error, Result, N_MELS, SEGMENT_FRAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Noise,
    Volume,
    Vtlp,
    #[serde(rename = "tm")]
    TimeMask,
    #[serde(rename = "fm")]
    FreqMask,
    #[serde(rename = "specaug")]
    SpecAugment,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::Noise,
        AugmentKind::Volume,
        AugmentKind::Vtlp,
        AugmentKind::TimeMask,
        AugmentKind::FreqMask,
        AugmentKind::SpecAugment,
    ];

    /// Whether the augmentation needs the source waveform.
    pub fn is_signal_level(self) -> bool {
        matches!(
            self,
            AugmentKind::Noise | AugmentKind::Volume | AugmentKind::Vtlp
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Noise => "noise",
            AugmentKind::Volume => "volume",
            AugmentKind::Vtlp => "vtlp",
            AugmentKind::TimeMask => "tm",
            AugmentKind::FreqMask => "fm",
            AugmentKind::SpecAugment => "specaug",
        }
    }
}

impl std::fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown augmentation \"{s}\"")))
    }
}

/// Parameter ranges used when an augmentation draws its own strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub snr_db: (f64, f64),
    pub gain: (f64, f64),
    pub vtlp_alpha: (f64, f64),
    pub time_mask_max: usize,
    pub freq_mask_max: usize,
    pub time_warp_max: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            snr_db: (10.0, 30.0),
            gain: (0.5, 2.0),
            vtlp_alpha: (0.9, 1.1),
            time_mask_max: 25,
            freq_mask_max: 8,
            time_warp_max: 5,
        }
    }
}

fn mean_power(x: &[f32]) -> f64 {
    x.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64
}

/// Adds white Gaussian noise scaled so the realised SNR equals `snr_db`.
/// The output is not clipped, so the requested SNR is exact.
pub fn add_noise_samples(samples: &[f32], snr_db: f64, seed: u64) -> Result<Vec<f32>> {
    let p_signal = mean_power(samples);
    if p_signal <= 0.0 {
        return Err(Error::invalid("cannot set an SNR on a zero-energy signal"));
    }
    if snr_db == f64::INFINITY {
        return Ok(samples.to_vec());
    }
    let mut rng = seeded(seed);
    let noise: Vec<f64> = (0..samples.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let p_noise = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
    let scale = (p_signal / 10f64.powf(snr_db / 10.0) / p_noise).sqrt();
    Ok(samples
        .iter()
        .zip(&noise)
        .map(|(&s, n)| (s as f64 + scale * n) as f32)
        .collect())
}

/// `snr_db = None` draws from `U[10, 30]` dB.
pub fn add_noise(wave: &Waveform, snr_db: Option<f64>, seed: u64) -> Result<Waveform> {
    let snr = snr_db.unwrap_or_else(|| seeded(derive(seed, 1)).random_range(10.0..=30.0));
    Ok(Waveform {
        samples: add_noise_samples(&wave.samples, snr, seed)?,
        sample_rate_hz: wave.sample_rate_hz,
    })
}

pub fn perturb_volume_samples(samples: &[f32], gain: f64) -> Result<Vec<f32>> {
    if !(gain > 0.0) {
        return Err(Error::invalid(format!(
            "volume gain must be positive, got {gain}"
        )));
    }
    Ok(samples
        .iter()
        .map(|&s| (s as f64 * gain).clamp(-1.0, 1.0) as f32)
        .collect())
}

/// `gain = None` draws from `U[0.5, 2.0]`; output clipped to `[-1, 1]`.
pub fn perturb_volume(wave: &Waveform, gain: Option<f64>, seed: u64) -> Result<Waveform> {
    let gain = gain.unwrap_or_else(|| seeded(seed).random_range(0.5..=2.0));
    Ok(Waveform {
        samples: perturb_volume_samples(&wave.samples, gain)?,
        sample_rate_hz: wave.sample_rate_hz,
    })
}

/// Inverse of the piecewise-linear VTLP map on a normalized axis where the
/// top of the spectrum is `f_max`.
fn vtlp_source_freq(f: f64, alpha: f64, f_max: f64) -> f64 {
    let boundary = f_max * alpha.min(1.0) / alpha * 7.0 / 8.0;
    if f <= alpha * boundary {
        f / alpha
    } else {
        boundary + (f - alpha * boundary) * (f_max - boundary) / (f_max - alpha * boundary)
    }
}

/// Warps the frequency axis by `g(f) = αf` below the boundary and a linear
/// segment reaching `g(f_max) = f_max` above it; each output bin reads the
/// input at `g⁻¹(f)` with linear interpolation.
pub fn vtlp_warp_with(power: &PowerSpectrogram, alpha: f64) -> Result<PowerSpectrogram> {
    if !(alpha > 0.5 && alpha < 2.0) {
        return Err(Error::invalid(format!(
            "vtlp alpha {alpha} outside (0.5, 2.0)"
        )));
    }
    let top = (power.n_bins - 1) as f64;
    let taps: Vec<(usize, f64)> = (0..power.n_bins)
        .map(|k| {
            let src = vtlp_source_freq(k as f64, alpha, top).clamp(0.0, top);
            let lo = (src.floor() as usize).min(power.n_bins - 1);
            (lo, src - lo as f64)
        })
        .collect();
    let mut out = power.clone();
    for t in 0..power.n_frames {
        let src = power.frame(t);
        for (dst, &(lo, frac)) in out.frame_mut(t).iter_mut().zip(&taps) {
            let hi = (lo + 1).min(power.n_bins - 1);
            *dst = src[lo] * (1.0 - frac) + src[hi] * frac;
        }
    }
    Ok(out)
}

/// `alpha = None` draws from `U[0.9, 1.1]`.
pub fn vtlp_warp(
    power: &PowerSpectrogram,
    alpha: Option<f64>,
    seed: u64,
) -> Result<PowerSpectrogram> {
    let alpha = alpha.unwrap_or_else(|| seeded(seed).random_range(0.9..=1.1));
    vtlp_warp_with(power, alpha)
}

fn check_segment(seg: &[f32]) -> Result<()> {
    if seg.len() != N_MELS * SEGMENT_FRAMES {
        return Err(Error::shape(format!(
            "feature segment has {} values, expected {}×{}",
            seg.len(),
            N_MELS,
            SEGMENT_FRAMES
        )));
    }
    Ok(())
}

fn segment_mean(seg: &[f32]) -> f32 {
    (seg.iter().map(|&v| v as f64).sum::<f64>() / seg.len() as f64) as f32
}

/// Sets frames `[start, start + width)` of a mel-major segment to the segment mean.
pub fn time_mask_with(seg: &[f32], width: usize, start: usize) -> Result<Vec<f32>> {
    check_segment(seg)?;
    if start + width > SEGMENT_FRAMES {
        return Err(Error::invalid(format!(
            "time mask [{start}, {}) out of range",
            start + width
        )));
    }
    let mut out = seg.to_vec();
    if width == 0 {
        return Ok(out);
    }
    let fill = segment_mean(seg);
    for m in 0..N_MELS {
        out[m * SEGMENT_FRAMES + start..m * SEGMENT_FRAMES + start + width].fill(fill);
    }
    Ok(out)
}

/// Sets mel rows `[start, start + width)` to the segment mean.
pub fn freq_mask_with(seg: &[f32], width: usize, start: usize) -> Result<Vec<f32>> {
    check_segment(seg)?;
    if start + width > N_MELS {
        return Err(Error::invalid(format!(
            "frequency mask [{start}, {}) out of range",
            start + width
        )));
    }
    let mut out = seg.to_vec();
    if width == 0 {
        return Ok(out);
    }
    let fill = segment_mean(seg);
    out[start * SEGMENT_FRAMES..(start + width) * SEGMENT_FRAMES].fill(fill);
    Ok(out)
}

fn draw_band(limit: usize, total: usize, seed: u64) -> (usize, usize) {
    let mut rng = seeded(seed);
    let width = rng.random_range(0..=limit);
    let start = rng.random_range(0..=total - width);
    (width, start)
}

pub fn time_mask(seg: &[f32], t_max: usize, seed: u64) -> Result<Vec<f32>> {
    if t_max > SEGMENT_FRAMES {
        return Err(Error::invalid(format!(
            "t_max {t_max} exceeds {SEGMENT_FRAMES} frames"
        )));
    }
    let (width, start) = draw_band(t_max, SEGMENT_FRAMES, seed);
    time_mask_with(seg, width, start)
}

pub fn freq_mask(seg: &[f32], f_max: usize, seed: u64) -> Result<Vec<f32>> {
    if f_max > N_MELS {
        return Err(Error::invalid(format!(
            "f_max {f_max} exceeds {N_MELS} mel bins"
        )));
    }
    let (width, start) = draw_band(f_max, N_MELS, seed);
    freq_mask_with(seg, width, start)
}

/// Moves control frame `center` to `center + shift`, stretching both sides
/// linearly along time.
pub fn time_warp_with(seg: &[f32], center: usize, shift: isize) -> Result<Vec<f32>> {
    check_segment(seg)?;
    let last = (SEGMENT_FRAMES - 1) as f64;
    let target = center as isize + shift;
    if center == 0
        || center >= SEGMENT_FRAMES - 1
        || target <= 0
        || target >= SEGMENT_FRAMES as isize - 1
    {
        return Err(Error::invalid(format!(
            "time warp {center} -> {target} out of range"
        )));
    }
    if shift == 0 {
        return Ok(seg.to_vec());
    }
    let (c, d) = (center as f64, target as f64);
    let taps: Vec<(usize, f32)> = (0..SEGMENT_FRAMES)
        .map(|t| {
            let t = t as f64;
            let src = if t <= d {
                t * c / d
            } else {
                c + (t - d) * (last - c) / (last - d)
            };
            let lo = (src.floor() as usize).min(SEGMENT_FRAMES - 1);
            (lo, (src - lo as f64) as f32)
        })
        .collect();
    let mut out = vec![0.0f32; seg.len()];
    for m in 0..N_MELS {
        let row = &seg[m * SEGMENT_FRAMES..(m + 1) * SEGMENT_FRAMES];
        for (t, &(lo, frac)) in taps.iter().enumerate() {
            let hi = (lo + 1).min(SEGMENT_FRAMES - 1);
            out[m * SEGMENT_FRAMES + t] = row[lo] * (1.0 - frac) + row[hi] * frac;
        }
    }
    Ok(out)
}

/// Time warp, then one time mask, then one frequency mask; sub-seeds derive
/// from `seed`.
pub fn spec_augment(seg: &[f32], params: &AugmentParams, seed: u64) -> Result<Vec<f32>> {
    check_segment(seg)?;
    let w = params.time_warp_max;
    if 2 * w + 2 >= SEGMENT_FRAMES {
        return Err(Error::invalid(format!("time warp range {w} too large")));
    }
    let mut rng = seeded(derive(seed, 0));
    let center = rng.random_range(w + 1..=SEGMENT_FRAMES - 2 - w);
    let shift = rng.random_range(-(w as i64)..=w as i64) as isize;
    let warped = time_warp_with(seg, center, shift)?;
    let masked = time_mask(&warped, params.time_mask_max, derive(seed, 1))?;
    freq_mask(&masked, params.freq_mask_max, derive(seed, 2))
}

/// Augments a segment in the feature domain.
pub fn augment_features(
    kind: AugmentKind,
    seg: &[f32],
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<f32>> {
    match kind {
        AugmentKind::TimeMask => time_mask(seg, params.time_mask_max, seed),
        AugmentKind::FreqMask => freq_mask(seg, params.freq_mask_max, seed),
        AugmentKind::SpecAugment => spec_augment(seg, params, seed),
        other => Err(Error::invalid(format!(
            "{other} is a signal-level augmentation"
        ))),
    }
}

/// Produces the augmented copy of a pooled segment. Signal-level kinds rebuild
/// the segment from its source waveform spans; `waves` is indexed like the
/// utterance list the segment was cut from.
#[derive(Debug, Clone)]
pub struct Augmenter<'a> {
    pub kind: AugmentKind,
    pub params: AugmentParams,
    waves: Option<&'a [Waveform]>,
    extractor: LogMelExtractor,
}

impl<'a> Augmenter<'a> {
    pub fn new(
        kind: AugmentKind,
        params: AugmentParams,
        waves: Option<&'a [Waveform]>,
    ) -> Result<Self> {
        if kind.is_signal_level() && waves.is_none() {
            return Err(Error::invalid(format!(
                "{kind} augmentation needs source waveforms"
            )));
        }
        Ok(Self {
            kind,
            params,
            waves,
            extractor: LogMelExtractor::new(),
        })
    }

    pub fn apply(&self, seg: &Segment, seed: u64) -> Result<Vec<f32>> {
        if !self.kind.is_signal_level() {
            return augment_features(self.kind, &seg.features, &self.params, seed);
        }
        let waves = self.waves.expect("checked in new");
        let len = seg.features.len() / N_MELS;
        let mut rng = seeded(seed);
        // one strength per segment, drawn before any span is processed
        let strength = match self.kind {
            AugmentKind::Noise => rng.random_range(self.params.snr_db.0..=self.params.snr_db.1),
            AugmentKind::Volume => rng.random_range(self.params.gain.0..=self.params.gain.1),
            _ => rng.random_range(self.params.vtlp_alpha.0..=self.params.vtlp_alpha.1),
        };
        let mut out = vec![0.0f32; seg.features.len()];
        let mut col = 0;
        for (i, span) in seg.sources.iter().enumerate() {
            let wave = waves.get(span.utterance).ok_or_else(|| {
                Error::invalid(format!(
                    "segment source utterance {} missing",
                    span.utterance
                ))
            })?;
            let lo = span.start * HOP_LENGTH;
            let hi = (span.end - 1) * HOP_LENGTH + WIN_LENGTH;
            if hi > wave.samples.len() {
                return Err(Error::shape("segment span exceeds its source waveform"));
            }
            let chunk = &wave.samples[lo..hi];
            let mel = match self.kind {
                AugmentKind::Noise => {
                    let noisy = add_noise_samples(chunk, strength, derive(seed, i as u64 + 1))?;
                    self.extractor.extract(&noisy)?
                }
                AugmentKind::Volume => self
                    .extractor
                    .extract(&perturb_volume_samples(chunk, strength)?)?,
                _ => {
                    let power = vtlp_warp_with(&self.extractor.power(chunk)?, strength)?;
                    self.extractor.log_mel_from_power(&power)?
                }
            };
            for f in 0..mel.n_frames {
                for (m, &v) in mel.frame(f).iter().enumerate() {
                    out[m * len + col] = v;
                }
                col += 1;
            }
        }
        if col != len {
            return Err(Error::shape(format!(
                "segment sources cover {col} frames, expected {len}"
            )));
        }
        Ok(out)
    }
}
