//! Pre-training with the instance-discrimination loss, downstream
//! fine-tuning with ensembling, and utterance-level evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentParams, Augmenter};
use crate::corpus::{
    concat_and_segment, random_crop_and_subsample, segment_utterances, Segment, Split,
    UtteranceFeatures, Waveform,
};
use crate::loss::DEFAULT_TAU;
use crate::nn::model::forward_batch;
use crate::nn::{
    classify_segments, embed_segments, init_params, sgd_step, Checkpoint, CheckpointMeta,
    DepAudioNetParams, LrSchedule, OutputMode, Tape,
};
use crate::rng::{derive, derive_path, seeded};
use crate::sampling::{kmeans_fit, plan_epoch, KMeansModel, Strategy, KMEANS_MAX_ITER, KMEANS_TOL};
use crate::{Error, Result, SEGMENT_FRAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub tau: f64,
    pub strategy: Strategy,
    pub augment: AugmentKind,
    #[serde(default)]
    pub augment_params: AugmentParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            lr0: 1e-3,
            decay: 0.9,
            decay_every: 2,
            tau: DEFAULT_TAU,
            strategy: Strategy::Ds,
            augment: AugmentKind::TimeMask,
            augment_params: AugmentParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Downstream settings for a fine-tuning profile.
    pub fn finetune(profile: Profile) -> Self {
        Self {
            lr0: profile.lr0(),
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            decay: self.decay,
            every: self.decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [("lr0", self.lr0), ("decay", self.decay), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.decay_every == 0 {
            return Err(Error::invalid("decay_every must be at least 1"));
        }
        Ok(())
    }
}

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent for runs without a validation pool (fine-tuning).
    pub val_loss: Option<f64>,
    pub lr: f64,
}

pub fn loss_curve_csv(curve: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for e in curve {
        let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{val},{}\n", e.epoch, e.train_loss, e.lr));
    }
    out
}

pub fn write_loss_curve(path: &Path, curve: &[EpochLog]) -> Result<()> {
    fs::write(path, loss_curve_csv(curve)).map_err(|e| Error::io(path, e))
}

/// Segments every speaker stream of the corpus and separates the training
/// and validation speakers. Segment sources index into `utts`, so the same
/// list (and its waveforms) serves signal-level augmentation for both pools.
pub fn pretrain_pools(utts: &[UtteranceFeatures]) -> Result<(Vec<Segment>, Vec<Segment>)> {
    let split_of: HashMap<&str, Split> = utts
        .iter()
        .map(|u| (u.utterance_id.as_str(), u.split))
        .collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for seg in concat_and_segment(utts, SEGMENT_FRAMES)? {
        match split_of[seg.utterance_id.as_str()] {
            Split::Train => train.push(seg),
            Split::Validation => val.push(seg),
            Split::Test => {}
        }
    }
    Ok((train, val))
}

/// Result of a pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    /// Parameters after the last epoch.
    pub last: DepAudioNetParams<f32>,
    pub curve: Vec<EpochLog>,
}

fn stack(segments: &[&Segment], extra: impl IntoIterator<Item = Vec<f32>>) -> Vec<f32> {
    let mut out: Vec<f32> = segments
        .iter()
        .flat_map(|s| s.features.iter().copied())
        .collect();
    for e in extra {
        out.extend(e);
    }
    out
}

/// Loss of one batch of originals and augmented copies. In train mode this
/// also takes an SGD step and folds the batch statistics into the running
/// estimates.
fn idl_batch(
    params: &mut DepAudioNetParams<f32>,
    batch: &[&Segment],
    augmenter: &Augmenter,
    cfg: &TrainConfig,
    seed: u64,
    update: Option<f64>,
) -> Result<f64> {
    let n = batch.len();
    let augmented = batch
        .iter()
        .enumerate()
        .map(|(i, s)| augmenter.apply(s, derive(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let input = stack(batch, augmented);
    let mut tape = Tape::new();
    let train = update.is_some();
    let pass = forward_batch(
        &mut tape,
        params,
        input,
        2 * n,
        OutputMode::Embed,
        train,
        derive(seed, u64::MAX),
    )?;
    let f = tape.rows(pass.output, 0, n);
    let f_hat = tape.rows(pass.output, n, n);
    let loss = tape.idl_loss(f, f_hat, cfg.tau);
    let value = f64::from(tape.value(loss)[0]);
    if let Some(lr) = update {
        let grads = tape.backward(loss)?;
        sgd_step(params, &pass.params, &grads, lr)?;
        if let Some((mean, var)) = &pass.batch_stats {
            params.update_running_stats(mean, var, 2 * n * params.dims.frames);
        }
    }
    Ok(value)
}

/// Mean inference-mode loss over the validation pool, taken in consecutive
/// chunks of the batch size with fixed augmentation seeds. A trailing chunk
/// is kept when it has at least two segments.
pub fn validation_loss(
    params: &DepAudioNetParams<f32>,
    val: &[Segment],
    augmenter: &Augmenter,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut params = params.clone();
    let mut total = 0.0;
    let mut count = 0;
    for (c, chunk) in val.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let refs: Vec<&Segment> = chunk.iter().collect();
        total += idl_batch(
            &mut params,
            &refs,
            augmenter,
            cfg,
            derive_path(cfg.seed, &[3, c as u64]),
            None,
        )?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid(
            "validation pool needs at least two segments",
        ));
    }
    Ok(total / count as f64)
}

/// Instance-discrimination pre-training. Each step embeds a batch and its
/// augmented copies in one forward pass, so batchnorm sees both halves.
/// `init` continues from existing parameters (the second PIS stage);
/// otherwise parameters are freshly initialized from the seed. `waves` is
/// required for signal-level augmentation.
pub fn pretrain(
    train: &[Segment],
    val: &[Segment],
    waves: Option<&[Waveform]>,
    cfg: &TrainConfig,
    init: Option<&DepAudioNetParams<f32>>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let augmenter = Augmenter::new(cfg.augment, cfg.augment_params.clone(), waves)?;
    let mut params = match init {
        Some(p) => p.clone(),
        None => init_params(derive(cfg.seed, 0)),
    };
    params.validate()?;
    let schedule = cfg.schedule();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, DepAudioNetParams<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch);
        let plan = plan_epoch(
            cfg.strategy,
            train,
            cfg.batch_size,
            derive_path(cfg.seed, &[1, epoch as u64]),
        )?;
        let mut total = 0.0;
        for (b, idx) in plan.batches.iter().enumerate() {
            let batch: Vec<&Segment> = idx.iter().map(|&i| &train[i]).collect();
            let seed = derive_path(cfg.seed, &[2, epoch as u64, b as u64]);
            total += idl_batch(&mut params, &batch, &augmenter, cfg, seed, Some(lr))?;
        }
        let train_loss = total / plan.batches.len().max(1) as f64;
        let val_loss = validation_loss(&params, val, &augmenter, cfg)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::invalid(format!("loss diverged at epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e}");
        curve.push(EpochLog {
            epoch,
            train_loss,
            val_loss: Some(val_loss),
            lr,
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, params.clone()));
        }
    }
    let (epoch, val_loss, best_params) = best.expect("at least one epoch");
    let meta = CheckpointMeta {
        config: serde_json::to_value(cfg)?,
        epoch: Some(epoch),
        val_loss: Some(val_loss),
        loss_curve: curve.clone(),
    };
    Ok(PretrainOutcome {
        best: Checkpoint {
            params: best_params,
            meta,
        },
        last: params,
        curve,
    })
}

/// Clusters the stage-one embeddings of `pool` into `k` groups and stores
/// each segment's cluster as its pseudo-label.
pub fn pseudo_label_pool(
    params: &DepAudioNetParams<f32>,
    pool: &mut [Segment],
    k: usize,
    seed: u64,
) -> Result<KMeansModel> {
    let feats: Vec<&[f32]> = pool.iter().map(|s| s.features.as_slice()).collect();
    let emb: Vec<Vec<f64>> = embed_segments(params, &feats)?
        .into_iter()
        .map(|e| e.into_iter().map(f64::from).collect())
        .collect();
    let model = kmeans_fit(&emb, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
    for (s, e) in pool.iter_mut().zip(&emb) {
        s.pseudo_label = Some(model.predict(e));
    }
    Ok(model)
}

/// Downstream training setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Imbalanced data: per-model crop and class-balanced subsample, five
    /// ensemble members.
    A,
    /// Balanced data: all segments, one model.
    B,
}

impl Profile {
    pub fn lr0(self) -> f64 {
        match self {
            Profile::A => 1e-3,
            Profile::B => 1e-2,
        }
    }

    pub fn n_models(self) -> usize {
        match self {
            Profile::A => 5,
            Profile::B => 1,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::A => "a",
            Profile::B => "b",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Profile::A),
            "b" => Ok(Profile::B),
            other => Err(Error::invalid(format!(
                "unknown profile {other:?} (expected a or b)"
            ))),
        }
    }
}

/// Training segments for ensemble member `m`.
pub fn finetune_segments(
    train: &[UtteranceFeatures],
    profile: Profile,
    seed: u64,
    m: usize,
) -> Result<Vec<Segment>> {
    match profile {
        Profile::A => random_crop_and_subsample(train, SEGMENT_FRAMES, seed.wrapping_add(m as u64)),
        Profile::B => segment_utterances(train, SEGMENT_FRAMES),
    }
}

fn segment_labels(segments: &[Segment]) -> Result<Vec<f32>> {
    segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .map(f32::from)
                .ok_or_else(|| Error::invalid(format!("segment {i} has no label")))
        })
        .collect()
}

/// Inference-mode mean binary cross-entropy of labeled segments, with the
/// same probability clamp as training.
pub fn bce_loss(params: &DepAudioNetParams<f32>, segments: &[Segment]) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::invalid("no segments to score"));
    }
    let labels = segment_labels(segments)?;
    let feats: Vec<&[f32]> = segments.iter().map(|s| s.features.as_slice()).collect();
    let eps = 1e-7;
    let total: f64 = classify_segments(params, &feats)?
        .iter()
        .zip(&labels)
        .map(|(&p, &y)| {
            let p = f64::from(p).clamp(eps, 1.0 - eps);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / segments.len() as f64)
}

/// A fine-tuned classifier and the epoch its parameters come from.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: DepAudioNetParams<f32>,
    pub curve: Vec<EpochLog>,
    pub epoch: usize,
}

/// Trains one classifier with binary cross-entropy on segment labels. With
/// `val`, every epoch is scored on it and the lowest-loss epoch is kept;
/// otherwise the final epoch is.
pub fn finetune_model(
    segments: &[Segment],
    val: Option<&[Segment]>,
    mut params: DepAudioNetParams<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if segments.is_empty() {
        return Err(Error::invalid("no training segments"));
    }
    let labels = segment_labels(segments)?;
    let mut kept: Option<(f64, usize, DepAudioNetParams<f32>)> = None;
    let schedule = cfg.schedule();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule.at(epoch);
        order.shuffle(&mut seeded(derive_path(seed, &[1, epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let input: Vec<f32> = idx
                .iter()
                .flat_map(|&i| segments[i].features.iter().copied())
                .collect();
            let targets: Vec<f32> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let dropout_seed = derive_path(seed, &[2, epoch as u64, b as u64]);
            let pass = forward_batch(
                &mut tape,
                &params,
                input,
                idx.len(),
                OutputMode::Classify,
                true,
                dropout_seed,
            )?;
            let loss = tape.bce(pass.output, &targets);
            total += f64::from(tape.value(loss)[0]);
            batches += 1;
            let grads = tape.backward(loss)?;
            sgd_step(&mut params, &pass.params, &grads, lr)?;
            if let Some((mean, var)) = &pass.batch_stats {
                params.update_running_stats(mean, var, idx.len() * params.dims.frames);
            }
        }
        let train_loss = total / batches as f64;
        let val_loss = val.map(|v| bce_loss(&params, v)).transpose()?;
        log::info!("finetune epoch {epoch}: bce {train_loss:.5} val {val_loss:?} lr {lr:.3e}");
        if let Some(v) = val_loss {
            if kept.as_ref().is_none_or(|(best, _, _)| v < *best) {
                kept = Some((v, epoch, params.clone()));
            }
        }
        curve.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    Ok(match kept {
        Some((_, epoch, params)) => FinetuneOutcome {
            params,
            curve,
            epoch,
        },
        None => FinetuneOutcome {
            params,
            curve,
            epoch: cfg.epochs - 1,
        },
    })
}

/// Fine-tunes `profile.n_models()` classifiers from `init` (or from fresh
/// parameters when `init` is absent, the no-pre-training baseline) and
/// returns their final-epoch checkpoints.
pub fn finetune_ensemble(
    train: &[UtteranceFeatures],
    init: Option<&DepAudioNetParams<f32>>,
    cfg: &TrainConfig,
    profile: Profile,
) -> Result<Vec<Checkpoint>> {
    finetune_ensemble_with(train, None, init, cfg, profile)
}

/// Like [`finetune_ensemble`], but with validation utterances each member
/// keeps its epoch with the lowest validation cross-entropy.
pub fn finetune_ensemble_with(
    train: &[UtteranceFeatures],
    val: Option<&[UtteranceFeatures]>,
    init: Option<&DepAudioNetParams<f32>>,
    cfg: &TrainConfig,
    profile: Profile,
) -> Result<Vec<Checkpoint>> {
    let val_segments = val
        .map(|v| segment_utterances(v, SEGMENT_FRAMES))
        .transpose()?;
    (0..profile.n_models())
        .map(|m| {
            let segments = finetune_segments(train, profile, cfg.seed, m)?;
            let start = match init {
                Some(p) => p.clone(),
                None => init_params(derive_path(cfg.seed, &[4, m as u64])),
            };
            let out = finetune_model(
                &segments,
                val_segments.as_deref(),
                start,
                cfg,
                derive_path(cfg.seed, &[5, m as u64]),
            )?;
            let meta = CheckpointMeta {
                config: serde_json::json!({
                    "train": cfg,
                    "profile": profile,
                    "member": m,
                    "selection": if val.is_some() { "best-val" } else { "final" },
                }),
                epoch: Some(out.epoch),
                val_loss: out.curve[out.epoch].val_loss,
                loss_curve: out.curve,
            };
            Ok(Checkpoint {
                params: out.params,
                meta,
            })
        })
        .collect()
}

/// Mean classifier output over every (model, 120-frame window) pair of one
/// utterance.
pub fn predict_utterance(
    models: &[DepAudioNetParams<f32>],
    utt: &UtteranceFeatures,
) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::invalid("prediction needs at least one model"));
    }
    let segments = segment_utterances(std::slice::from_ref(utt), SEGMENT_FRAMES)?;
    if segments.is_empty() {
        return Err(Error::invalid(format!(
            "utterance {} has {} frames, shorter than one segment",
            utt.utterance_id, utt.mel.n_frames
        )));
    }
    let feats: Vec<&[f32]> = segments.iter().map(|s| s.features.as_slice()).collect();
    let mut total = 0.0;
    for m in models {
        total += classify_segments(m, &feats)?
            .iter()
            .map(|&p| f64::from(p))
            .sum::<f64>();
    }
    Ok(total / (models.len() * segments.len()) as f64)
}

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_avg: f64,
    pub f1_nd: f64,
    pub f1_d: f64,
    /// `[[tn, fp], [fn, tp]]` with depression as the positive class.
    pub confusion: [[u64; 2]; 2],
    pub per_utterance: BTreeMap<String, f64>,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class and macro F1 of binary predictions (1 = depression).
pub fn f1_scores(
    predictions: &BTreeMap<String, u8>,
    truth: &BTreeMap<String, u8>,
) -> Result<EvalReport> {
    if predictions.len() != truth.len() || predictions.keys().zip(truth.keys()).any(|(a, b)| a != b)
    {
        return Err(Error::invalid("prediction and truth keys differ"));
    }
    let mut confusion = [[0u64; 2]; 2];
    for (key, &y) in truth {
        let p = predictions[key];
        if y > 1 || p > 1 {
            return Err(Error::invalid(format!("{key}: labels must be 0 or 1")));
        }
        confusion[y as usize][p as usize] += 1;
    }
    let [[tn, fp], [fn_, tp]] = confusion;
    let f1_d = f1(tp, fp, fn_);
    let f1_nd = f1(tn, fn_, fp);
    Ok(EvalReport {
        f1_avg: (f1_nd + f1_d) / 2.0,
        f1_nd,
        f1_d,
        confusion,
        per_utterance: BTreeMap::new(),
    })
}

/// Scores every labeled utterance with the ensemble and thresholds at 0.5.
pub fn evaluate(
    models: &[DepAudioNetParams<f32>],
    utts: &[UtteranceFeatures],
) -> Result<EvalReport> {
    let mut probs = BTreeMap::new();
    let mut preds = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for u in utts {
        let y = u
            .label
            .ok_or_else(|| Error::invalid(format!("utterance {} has no label", u.utterance_id)))?;
        let p = predict_utterance(models, u)?;
        preds.insert(u.utterance_id.clone(), u8::from(p >= DECISION_THRESHOLD));
        truth.insert(u.utterance_id.clone(), y);
        probs.insert(u.utterance_id.clone(), p);
    }
    let mut report = f1_scores(&preds, &truth)?;
    report.per_utterance = probs;
    Ok(report)
}
