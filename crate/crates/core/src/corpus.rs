//! Corpus ingestion: JSON-lines manifests, 16-bit PCM WAV decoding, a
//! deterministic synthetic speech corpus, and fixed-length segmentation.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{LogMelExtractor, MelSpectrogram};
use crate::rng::{derive, derive_path, seeded};
use crate::{Error, Result, N_MELS, SAMPLE_RATE_HZ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker_id: String,
    /// 0 = non-depression, 1 = depression, absent for unlabeled audio.
    pub label: Option<u8>,
    pub split: Split,
}

impl ManifestEntry {
    /// Utterance identifier: the file stem of `path`.
    pub fn utterance_id(&self) -> String {
        utterance_id_for(&self.path)
    }
}

pub fn utterance_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

#[derive(Deserialize)]
struct RawEntry {
    path: String,
    speaker_id: String,
    label: Option<i64>,
    split: String,
}

/// Parses a JSON-lines manifest. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if raw.speaker_id.is_empty() {
            return Err(Error::MalformedRecord {
                line: line_no,
                reason: "empty speaker_id".into(),
            });
        }
        let label = match raw.label {
            None => None,
            Some(v @ (0 | 1)) => Some(v as u8),
            Some(v) => {
                return Err(Error::MalformedRecord {
                    line: line_no,
                    reason: format!("label must be 0, 1 or null, got {v}"),
                })
            }
        };
        let split: Split = raw.split.parse()?;
        if !seen.insert(raw.path.clone()) {
            return Err(Error::DuplicatePath(raw.path));
        }
        entries.push(ManifestEntry {
            path: PathBuf::from(raw.path),
            speaker_id: raw.speaker_id,
            label,
            split,
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn manifest_to_string(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_to_string(entries)?).map_err(|e| Error::io(path, e))
}

/// Mono PCM audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

pub fn decode_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedEncoding(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::NotMono(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::UnsupportedEncoding(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("{}: no samples", path.display())));
    }
    Ok(Waveform {
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

pub fn encode_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedEncoding(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0)
            .round()
            .clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Per-speaker generator parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub speaker_id: String,
    pub f0_hz: f64,
    pub formant_hz: f64,
    /// Syllable-rate amplitude modulation.
    pub modulation_hz: f64,
    /// Relative depth of the slow intonation contour.
    pub intonation_depth: f64,
    pub label: Option<u8>,
}

/// Knobs of the synthetic corpus. `synth_corpus` uses the unlabeled defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub seed: u64,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Prefix of generated speaker ids, keeps separate corpora disjoint.
    pub speaker_prefix: String,
    /// When set, this fraction of speakers carries label 1 (slowed, flattened
    /// speech) and the rest label 0; otherwise the corpus is unlabeled.
    pub depressed_fraction: Option<f64>,
    /// Speaker fractions assigned to (validation, test); the rest is train.
    pub split_fractions: (f64, f64),
}

impl SynthOptions {
    pub fn unlabeled(n_speakers: usize, utts_per_speaker: usize, seed: u64) -> Self {
        Self {
            n_speakers,
            utts_per_speaker,
            seed,
            min_secs: 2.0,
            max_secs: 6.0,
            speaker_prefix: "spk".into(),
            depressed_fraction: None,
            split_fractions: (0.1, 0.0),
        }
    }

    pub fn labeled(
        n_speakers: usize,
        utts_per_speaker: usize,
        seed: u64,
        depressed_fraction: f64,
    ) -> Self {
        Self {
            depressed_fraction: Some(depressed_fraction),
            min_secs: 12.0,
            max_secs: 20.0,
            speaker_prefix: "pat".into(),
            split_fractions: (0.15, 0.35),
            ..Self::unlabeled(n_speakers, utts_per_speaker, seed)
        }
    }
}

/// Range of syllable rates for non-depressed and depressed labeled speakers.
const MOD_RATE_ND: (f64, f64) = (3.4, 4.4);
const MOD_RATE_D: (f64, f64) = (1.6, 2.6);
const INTONATION_ND: (f64, f64) = (0.03, 0.05);
const INTONATION_D: (f64, f64) = (0.008, 0.02);
/// Per-utterance relative drift of a speaker's f0 and formant peak, and the
/// range of the background noise level, so recordings of one speaker differ
/// from session to session.
const SESSION_F0_DRIFT: f64 = 0.06;
const SESSION_FORMANT_DRIFT: f64 = 0.08;
const NOISE_LEVEL: (f64, f64) = (0.002, 0.02);

fn spread_slots(n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    if n == 1 {
        return vec![rng.random_range(lo..=hi)];
    }
    let spacing = (hi - lo) / (n - 1) as f64;
    let mut slots: Vec<f64> = (0..n)
        .map(|i| {
            let jitter = rng.random_range(-0.1..=0.1) * spacing;
            (lo + i as f64 * spacing + jitter).clamp(lo, hi)
        })
        .collect();
    slots.shuffle(rng);
    slots
}

/// Speaker table of a synthetic corpus. f0 values sit on an evenly spaced grid
/// over [100, 300] Hz with ±10% jitter, so neighbours stay at least 0.8 grid
/// steps apart; formant peaks are spread over [500, 2500] Hz the same way.
pub fn synth_voices(opts: &SynthOptions) -> Result<Vec<Voice>> {
    if opts.n_speakers == 0 || opts.utts_per_speaker == 0 {
        return Err(Error::invalid(
            "synthetic corpus needs at least one speaker and utterance",
        ));
    }
    let mut rng = seeded(derive(opts.seed, 0));
    let f0s = spread_slots(opts.n_speakers, 100.0, 300.0, &mut rng);
    let formants = spread_slots(opts.n_speakers, 500.0, 2500.0, &mut rng);
    let labels: Vec<Option<u8>> = match opts.depressed_fraction {
        None => vec![None; opts.n_speakers],
        Some(frac) => {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::invalid(format!(
                    "depressed fraction {frac} outside [0, 1]"
                )));
            }
            let n_dep = (frac * opts.n_speakers as f64).round() as usize;
            let mut labels: Vec<Option<u8>> = (0..opts.n_speakers)
                .map(|i| Some(u8::from(i < n_dep)))
                .collect();
            labels.shuffle(&mut rng);
            labels
        }
    };
    let voices = (0..opts.n_speakers)
        .map(|s| {
            let (rate, depth) = match labels[s] {
                Some(1) => (MOD_RATE_D, INTONATION_D),
                Some(_) => (MOD_RATE_ND, INTONATION_ND),
                None => (
                    (MOD_RATE_D.0, MOD_RATE_ND.1),
                    (INTONATION_D.0, INTONATION_ND.1),
                ),
            };
            Voice {
                speaker_id: format!("{}{:03}", opts.speaker_prefix, s),
                f0_hz: f0s[s],
                formant_hz: formants[s],
                modulation_hz: rng.random_range(rate.0..=rate.1),
                intonation_depth: rng.random_range(depth.0..=depth.1),
                label: labels[s],
            }
        })
        .collect();
    Ok(voices)
}

fn speaker_splits(voices: &[Voice], fractions: (f64, f64), seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Train; voices.len()];
    let mut rng = seeded(derive(seed, 1));
    // stratify by label so every split sees both classes where possible
    let mut groups: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
    for (i, v) in voices.iter().enumerate() {
        groups.entry(v.label).or_default().push(i);
    }
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = if n >= 2 && fractions.0 > 0.0 {
            ((fractions.0 * n as f64).round() as usize).max(1)
        } else {
            0
        };
        let n_test = if n >= 3 && fractions.1 > 0.0 {
            ((fractions.1 * n as f64).round() as usize).max(1)
        } else {
            0
        };
        let n_val = n_val.min(n.saturating_sub(1));
        let n_test = n_test.min(n.saturating_sub(1 + n_val));
        for &i in &members[..n_val] {
            splits[i] = Split::Validation;
        }
        for &i in &members[n_val..n_val + n_test] {
            splits[i] = Split::Test;
        }
    }
    splits
}

fn synth_utterance(voice: &Voice, opts: &SynthOptions, seed: u64) -> Waveform {
    let mut rng = seeded(seed);
    let sr = SAMPLE_RATE_HZ as f64;
    let secs = rng.random_range(opts.min_secs..=opts.max_secs);
    let n = (secs * sr) as usize;

    let f0 = voice.f0_hz * (1.0 + rng.random_range(-SESSION_F0_DRIFT..=SESSION_F0_DRIFT));
    let formant =
        voice.formant_hz * (1.0 + rng.random_range(-SESSION_FORMANT_DRIFT..=SESSION_FORMANT_DRIFT));
    let bandwidth = 0.25 * formant;
    let rate = voice.modulation_hz * (1.0 + rng.random_range(-0.08..=0.08));
    let depth = voice.intonation_depth;
    let loudness = rng.random_range(0.6..=1.0);
    let noise_level = rng.random_range(NOISE_LEVEL.0..=NOISE_LEVEL.1);
    let (phi_mod, phi_int): (f64, f64) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );

    let n_harm = (4000.0 / (f0 * (1.0 + depth))).floor().max(1.0) as usize;
    let amps: Vec<f64> = (1..=n_harm)
        .map(|k| {
            let f = k as f64 * f0;
            let resonance = 1.0 / (1.0 + ((f - formant) / bandwidth).powi(2));
            (resonance + 0.1) / (k as f64).sqrt()
        })
        .collect();

    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let inst_f0 = f0 * (1.0 + depth * (2.0 * PI * 0.3 * t + phi_int).sin());
        phase += 2.0 * PI * inst_f0 / sr;
        let envelope = (0.5 + 0.5 * (2.0 * PI * rate * t + phi_mod).sin()).powf(1.5);
        let voiced: f64 = amps
            .iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * phase).sin())
            .sum();
        samples.push(envelope * voiced);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-9);
    let gain = 0.5 * loudness / peak;
    let samples = samples
        .into_iter()
        .map(|s| {
            let noise: f64 = rng.sample(StandardNormal);
            (s * gain + noise_level * noise).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
    }
}

/// Generates waveforms and the matching manifest. Pure function of `opts`.
pub fn synth_corpus_with(opts: &SynthOptions) -> Result<(Vec<Waveform>, Vec<ManifestEntry>)> {
    if !(opts.min_secs > 0.0 && opts.min_secs <= opts.max_secs) {
        return Err(Error::invalid("utterance duration range is empty"));
    }
    let voices = synth_voices(opts)?;
    let splits = speaker_splits(&voices, opts.split_fractions, opts.seed);
    let mut waves = Vec::new();
    let mut entries = Vec::new();
    for (s, voice) in voices.iter().enumerate() {
        for u in 0..opts.utts_per_speaker {
            waves.push(synth_utterance(
                voice,
                opts,
                derive_path(opts.seed, &[2, s as u64, u as u64]),
            ));
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("{}_u{:02}.wav", voice.speaker_id, u)),
                speaker_id: voice.speaker_id.clone(),
                label: voice.label,
                split: splits[s],
            });
        }
    }
    Ok((waves, entries))
}

/// Unlabeled synthetic corpus with 2–6 s utterances and a 9:1 speaker split.
pub fn synth_corpus(
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<(Vec<Waveform>, Vec<ManifestEntry>)> {
    synth_corpus_with(&SynthOptions::unlabeled(n_speakers, utts_per_speaker, seed))
}

/// Log-mel features of one utterance plus its manifest metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub speaker_id: String,
    pub label: Option<u8>,
    pub split: Split,
    pub mel: MelSpectrogram,
}

pub fn featurize(waves: &[Waveform], entries: &[ManifestEntry]) -> Result<Vec<UtteranceFeatures>> {
    if waves.len() != entries.len() {
        return Err(Error::shape(format!(
            "{} waveforms for {} manifest entries",
            waves.len(),
            entries.len()
        )));
    }
    let extractor = LogMelExtractor::new();
    waves
        .iter()
        .zip(entries)
        .map(|(w, e)| {
            Ok(UtteranceFeatures {
                utterance_id: e.utterance_id(),
                speaker_id: e.speaker_id.clone(),
                label: e.label,
                split: e.split,
                mel: extractor.extract(&w.samples)?,
            })
        })
        .collect()
}

/// A run of frames `[start, end)` taken from utterance number `utterance` of
/// the list a segment was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpan {
    pub utterance: usize,
    pub start: usize,
    pub end: usize,
}

/// A fixed 40×120 feature slice, stored mel-major (`features[m * 120 + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub features: Vec<f32>,
    /// Utterance containing the first frame.
    pub utterance_id: String,
    /// Position of the segment in its speaker stream (or utterance crop).
    pub segment_index: usize,
    pub speaker_id: String,
    pub label: Option<u8>,
    pub pseudo_label: Option<usize>,
    /// Where the frames came from, for signal-level augmentation.
    pub sources: Vec<FrameSpan>,
}

impl Segment {
    pub fn identity(&self) -> (&str, usize) {
        (&self.utterance_id, self.segment_index)
    }
}

fn gather_segment(
    stream: &[(usize, usize)],
    utts: &[UtteranceFeatures],
    len: usize,
) -> (Vec<f32>, Vec<FrameSpan>) {
    let mut features = vec![0.0f32; N_MELS * len];
    let mut sources: Vec<FrameSpan> = Vec::new();
    for (t, &(u, f)) in stream.iter().enumerate() {
        let frame = utts[u].mel.frame(f);
        for (m, &v) in frame.iter().enumerate() {
            features[m * len + t] = v;
        }
        match sources.last_mut() {
            Some(span) if span.utterance == u && span.end == f => span.end += 1,
            _ => sources.push(FrameSpan {
                utterance: u,
                start: f,
                end: f + 1,
            }),
        }
    }
    (features, sources)
}

fn check_mels(utts: &[UtteranceFeatures]) -> Result<()> {
    for u in utts {
        if u.mel.n_mels != N_MELS {
            return Err(Error::shape(format!(
                "{}: {} mel bins, expected {N_MELS}",
                u.utterance_id, u.mel.n_mels
            )));
        }
        if u.mel.n_frames == 0 {
            return Err(Error::invalid(format!(
                "{}: empty spectrogram",
                u.utterance_id
            )));
        }
    }
    Ok(())
}

/// Concatenates each speaker's utterances along time (in input order) and
/// cuts consecutive non-overlapping windows; the remainder is dropped.
pub fn concat_and_segment(utts: &[UtteranceFeatures], segment_len: usize) -> Result<Vec<Segment>> {
    if segment_len == 0 {
        return Err(Error::invalid("segment length must be positive"));
    }
    check_mels(utts)?;
    let mut order: Vec<&str> = Vec::new();
    let mut streams: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (u, utt) in utts.iter().enumerate() {
        let stream = streams.entry(&utt.speaker_id).or_insert_with(|| {
            order.push(&utt.speaker_id);
            Vec::new()
        });
        stream.extend((0..utt.mel.n_frames).map(|f| (u, f)));
    }
    let mut segments = Vec::new();
    for speaker in order {
        let stream = &streams[speaker];
        let count = stream.len() / segment_len;
        if count == 0 {
            log::info!(
                "speaker {speaker}: {} frames, no full segment",
                stream.len()
            );
        }
        for s in 0..count {
            let window = &stream[s * segment_len..(s + 1) * segment_len];
            let (features, sources) = gather_segment(window, utts, segment_len);
            let first = &utts[window[0].0];
            segments.push(Segment {
                features,
                utterance_id: first.utterance_id.clone(),
                segment_index: s,
                speaker_id: speaker.to_string(),
                label: first.label,
                pseudo_label: None,
                sources,
            });
        }
    }
    Ok(segments)
}

/// Non-overlapping windows of one utterance starting at frame `offset`, using
/// at most `span` frames.
fn window_utterance(
    utts: &[UtteranceFeatures],
    u: usize,
    offset: usize,
    span: usize,
    segment_len: usize,
) -> Vec<Segment> {
    let utt = &utts[u];
    (0..span / segment_len)
        .map(|s| {
            let start = offset + s * segment_len;
            let stream: Vec<(usize, usize)> =
                (start..start + segment_len).map(|f| (u, f)).collect();
            let (features, sources) = gather_segment(&stream, utts, segment_len);
            Segment {
                features,
                utterance_id: utt.utterance_id.clone(),
                segment_index: s,
                speaker_id: utt.speaker_id.clone(),
                label: utt.label,
                pseudo_label: None,
                sources,
            }
        })
        .collect()
}

/// All full windows of every utterance, without cropping or balancing.
pub fn segment_utterances(utts: &[UtteranceFeatures], segment_len: usize) -> Result<Vec<Segment>> {
    check_mels(utts)?;
    Ok((0..utts.len())
        .flat_map(|u| window_utterance(utts, u, 0, utts[u].mel.n_frames, segment_len))
        .collect())
}

/// Crops every utterance at a random start to the shortest utterance length,
/// windows the crops, and draws an equal number of segments per class without
/// replacement. The caller passes the training split only.
pub fn random_crop_and_subsample(
    utts: &[UtteranceFeatures],
    segment_len: usize,
    seed: u64,
) -> Result<Vec<Segment>> {
    check_mels(utts)?;
    if utts.iter().any(|u| u.label.is_none()) {
        return Err(Error::invalid(
            "random_crop_and_subsample needs labeled utterances",
        ));
    }
    let crop = utts
        .iter()
        .map(|u| u.mel.n_frames)
        .min()
        .ok_or_else(|| Error::invalid("no utterances"))?;
    let mut rng = seeded(seed);
    let mut by_class: [Vec<Segment>; 2] = [Vec::new(), Vec::new()];
    for (u, utt) in utts.iter().enumerate() {
        let start = rng.random_range(0..=utt.mel.n_frames - crop);
        let label = utt.label.unwrap() as usize;
        by_class[label].extend(window_utterance(utts, u, start, crop, segment_len));
    }
    for (label, segs) in by_class.iter().enumerate() {
        if segs.is_empty() {
            return Err(Error::ClassExhausted(label as u8));
        }
    }
    let per_class = by_class[0].len().min(by_class[1].len());
    let mut subset = Vec::with_capacity(2 * per_class);
    for segs in &mut by_class {
        let picked = index::sample(&mut rng, segs.len(), per_class).into_vec();
        let mut taken: Vec<Option<Segment>> = std::mem::take(segs).into_iter().map(Some).collect();
        subset.extend(picked.into_iter().map(|i| taken[i].take().unwrap()));
    }
    subset.shuffle(&mut rng);
    Ok(subset)
}
