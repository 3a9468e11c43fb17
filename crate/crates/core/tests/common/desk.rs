//! Desk-scale corpora and training runs for the directional checks.

use idl_core::augment::Augmenter;
use idl_core::corpus::{
    featurize, synth_corpus, synth_corpus_with, Segment, Split, SynthOptions, UtteranceFeatures,
    Waveform,
};
use idl_core::loss::alignment_stats;
use idl_core::nn::{embed_segments, Checkpoint, DepAudioNetParams};
use idl_core::probe::{run_probe, ProbeDataset, SvmConfig};
use idl_core::rng::derive;
use idl_core::sampling::Strategy;
use idl_core::train::{
    evaluate, finetune_ensemble, pretrain, pretrain_pools, pseudo_label_pool, EvalReport,
    PretrainOutcome, Profile, TrainConfig,
};

pub const PRETRAIN_SPEAKERS: usize = 10;
pub const PRETRAIN_UTTS: usize = 12;
pub const PRETRAIN_SEED: u64 = 1;
pub const PRETRAIN_EPOCHS: usize = 30;
/// Nine training speakers cannot fill the default batch of 20 distinct
/// speakers.
pub const PRETRAIN_BATCH: usize = 8;

pub const DOWNSTREAM_SPEAKERS: usize = 40;
pub const DOWNSTREAM_UTTS: usize = 2;
pub const FINETUNE_EPOCHS: usize = 30;
pub const FINETUNE_PROFILE: Profile = Profile::B;

pub fn pretrain_config(strategy: Strategy, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: PRETRAIN_EPOCHS,
        batch_size: PRETRAIN_BATCH,
        strategy,
        seed,
        ..TrainConfig::default()
    }
}

fn to_f64(rows: Vec<Vec<f32>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect()
}

pub fn embed(params: &DepAudioNetParams<f32>, segments: &[Segment]) -> Vec<Vec<f64>> {
    let feats: Vec<&[f32]> = segments.iter().map(|s| s.features.as_slice()).collect();
    to_f64(embed_segments(params, &feats).unwrap())
}

/// The unlabeled 10-speaker pre-training corpus.
pub struct PretrainCorpus {
    pub waves: Vec<Waveform>,
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
}

impl PretrainCorpus {
    pub fn build(seed: u64) -> Self {
        let (waves, entries) = synth_corpus(PRETRAIN_SPEAKERS, PRETRAIN_UTTS, seed).unwrap();
        let utts = featurize(&waves, &entries).unwrap();
        let (train, val) = pretrain_pools(&utts).unwrap();
        Self { waves, train, val }
    }

    pub fn pretrain(
        &self,
        cfg: &TrainConfig,
        init: Option<&DepAudioNetParams<f32>>,
    ) -> PretrainOutcome {
        pretrain(&self.train, &self.val, Some(&self.waves), cfg, init).unwrap()
    }

    /// Two-stage pseudo-instance run: cluster the stage-one embeddings into
    /// batch-size groups, then continue training with one segment per group.
    pub fn pretrain_pis(&self, stage_one: &DepAudioNetParams<f32>, seed: u64) -> PretrainOutcome {
        let mut train = self.train.clone();
        pseudo_label_pool(stage_one, &mut train, PRETRAIN_BATCH, seed).unwrap();
        let cfg = pretrain_config(Strategy::Pis, seed);
        pretrain(&train, &self.val, Some(&self.waves), &cfg, Some(stage_one)).unwrap()
    }

    /// Speaker-probe accuracy of `params` embeddings over the training and
    /// validation segments.
    pub fn probe(&self, params: &DepAudioNetParams<f32>, source: &str, seed: u64) -> f64 {
        let segments: Vec<Segment> = self.train.iter().chain(&self.val).cloned().collect();
        let ids: Vec<String> = segments.iter().map(|s| s.speaker_id.clone()).collect();
        let data = ProbeDataset::new(embed(params, &segments), &ids).unwrap();
        let cfg = SvmConfig {
            seed,
            ..SvmConfig::default()
        };
        run_probe(&data, &cfg, source).unwrap().accuracy
    }

    /// Mean `<f_i, f̂_i>` and mean `<f_i, f_j>` over the training pool, with
    /// time-masked copies drawn from fixed seeds.
    pub fn alignment(&self, params: &DepAudioNetParams<f32>) -> (f64, f64) {
        let cfg = TrainConfig::default();
        let augmenter =
            Augmenter::new(cfg.augment, cfg.augment_params.clone(), Some(&self.waves)).unwrap();
        let augmented: Vec<Vec<f32>> = self
            .train
            .iter()
            .enumerate()
            .map(|(i, s)| augmenter.apply(s, derive(0xa11, i as u64)).unwrap())
            .collect();
        let aug_refs: Vec<&[f32]> = augmented.iter().map(Vec::as_slice).collect();
        let f: Vec<f64> = embed(params, &self.train).concat();
        let f_hat: Vec<f64> = to_f64(embed_segments(params, &aug_refs).unwrap()).concat();
        alignment_stats(&f, &f_hat, params.dims.hidden)
    }
}

/// The labeled downstream task: speakers split into train, validation and
/// test, utterance-level labels.
pub struct Downstream {
    pub train: Vec<UtteranceFeatures>,
    pub test: Vec<UtteranceFeatures>,
}

impl Downstream {
    pub fn build(seed: u64) -> Self {
        let opts = SynthOptions::labeled(DOWNSTREAM_SPEAKERS, DOWNSTREAM_UTTS, seed, 0.5);
        let (waves, entries) = synth_corpus_with(&opts).unwrap();
        let utts = featurize(&waves, &entries).unwrap();
        let pick = |split| utts.iter().filter(|u| u.split == split).cloned().collect();
        Self {
            train: pick(Split::Train),
            test: pick(Split::Test),
        }
    }

    pub fn finetune(
        &self,
        init: Option<&DepAudioNetParams<f32>>,
        seed: u64,
    ) -> Vec<DepAudioNetParams<f32>> {
        let cfg = TrainConfig {
            epochs: FINETUNE_EPOCHS,
            seed,
            ..TrainConfig::finetune(FINETUNE_PROFILE)
        };
        finetune_ensemble(&self.train, init, &cfg, FINETUNE_PROFILE)
            .unwrap()
            .into_iter()
            .map(|c| c.params)
            .collect()
    }

    pub fn evaluate(&self, models: &[DepAudioNetParams<f32>]) -> EvalReport {
        evaluate(models, &self.test).unwrap()
    }
}

pub struct PipelineRun {
    pub report: EvalReport,
    pub models: Vec<Checkpoint>,
    pub test: Vec<UtteranceFeatures>,
}

/// A few-second run of every stage: DS pre-training, clustering, PIS
/// pre-training, five-model fine-tuning and evaluation.
pub fn small_pipeline(seed: u64) -> PipelineRun {
    let (waves, entries) = synth_corpus(6, 4, seed).unwrap();
    let utts = featurize(&waves, &entries).unwrap();
    let (mut train, val) = pretrain_pools(&utts).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    };
    let stage_one = pretrain(&train, &val, Some(&waves), &cfg, None).unwrap();
    pseudo_label_pool(&stage_one.best.params, &mut train, cfg.batch_size, seed).unwrap();
    let pis_cfg = TrainConfig {
        strategy: Strategy::Pis,
        ..cfg.clone()
    };
    let stage_two = pretrain(
        &train,
        &val,
        Some(&waves),
        &pis_cfg,
        Some(&stage_one.best.params),
    )
    .unwrap();

    let opts = SynthOptions {
        min_secs: 8.0,
        max_secs: 10.0,
        ..SynthOptions::labeled(12, 2, seed + 1, 0.5)
    };
    let (dw, de) = synth_corpus_with(&opts).unwrap();
    let dutts = featurize(&dw, &de).unwrap();
    let dtrain: Vec<_> = dutts
        .iter()
        .filter(|u| u.split == Split::Train)
        .cloned()
        .collect();
    let test: Vec<_> = dutts
        .iter()
        .filter(|u| u.split == Split::Test)
        .cloned()
        .collect();
    let ft = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed,
        ..TrainConfig::finetune(Profile::A)
    };
    let models = finetune_ensemble(&dtrain, Some(&stage_two.best.params), &ft, Profile::A).unwrap();
    let params: Vec<_> = models.iter().map(|c| c.params.clone()).collect();
    let report = evaluate(&params, &test).unwrap();
    PipelineRun {
        report,
        models,
        test,
    }
}
