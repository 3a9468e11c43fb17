use std::fs;
use std::path::{Path, PathBuf};

use idl_core::augment::{AugmentParams, Augmenter};
use idl_core::corpus::{
    concat_and_segment, decode_wav, encode_wav, featurize, load_manifest, segment_utterances,
    synth_corpus_with, write_manifest, ManifestEntry, Segment, Split, SynthOptions,
    UtteranceFeatures, Waveform,
};
use idl_core::dsp::{read_feature_cache, write_feature_cache, MelSpectrogram};
use idl_core::nn::{
    embed_segments, init_params, load_checkpoint, save_checkpoint, CheckpointMeta,
    DepAudioNetParams,
};
use idl_core::probe::{run_probe, ProbeDataset, SvmConfig};
use idl_core::rng::derive;
use idl_core::sampling::{apply_pseudo_labels, read_pseudo_labels, write_pseudo_labels, Strategy};
use idl_core::train::{
    evaluate, finetune_ensemble_with, pretrain, pretrain_pools, pseudo_label_pool,
    write_loss_curve, TrainConfig,
};
use idl_core::{N_MELS, SEGMENT_FRAMES};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::args::{
    AugmentPreviewArgs, ClusterArgs, EvalArgs, FeaturesArgs, FinetuneArgs, InputArgs, PretrainArgs,
    ProbeArgs, Selection, SynthArgs, TrainArgs,
};
use crate::run::{RunDir, CONFIG_FILE};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const AUDIO_DIR: &str = "audio";
pub const FEATURES_DIR: &str = "features";

/// Written as `config.json` in every run directory.
#[derive(Serialize)]
struct ResolvedConfig<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
}

fn write_config<A: Serialize>(
    run: &RunDir,
    command: &str,
    args: &A,
    train: Option<&TrainConfig>,
) -> Result<(), CliError> {
    run.write_json(
        CONFIG_FILE,
        &ResolvedConfig {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            train,
        },
    )?;
    Ok(())
}

/// Manifest entries with their audio and features.
struct Corpus {
    entries: Vec<ManifestEntry>,
    waves: Vec<Waveform>,
    utts: Vec<UtteranceFeatures>,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn load_waves(manifest: &Path, entries: &[ManifestEntry]) -> Result<Vec<Waveform>, CliError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| Ok(decode_wav(&resolve(base, &e.path))?))
        .collect()
}

/// Audio is decoded when features must be computed or when `need_waves` is
/// set (signal-level augmentation).
fn load_corpus(input: &InputArgs, need_waves: bool) -> Result<Corpus, CliError> {
    let entries = load_manifest(&input.manifest)?;
    if entries.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: manifest has no entries",
            input.manifest.display()
        )));
    }
    let waves = if need_waves || input.features.is_none() {
        load_waves(&input.manifest, &entries)?
    } else {
        Vec::new()
    };
    let utts = match &input.features {
        Some(dir) => entries
            .iter()
            .map(|e| {
                let id = e.utterance_id();
                Ok(UtteranceFeatures {
                    mel: read_feature_cache(&dir.join(format!("{id}.bin")))?,
                    utterance_id: id,
                    speaker_id: e.speaker_id.clone(),
                    label: e.label,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?,
        None => featurize(&waves, &entries)?,
    };
    info!(
        "loaded {} utterances from {}",
        utts.len(),
        input.manifest.display()
    );
    Ok(Corpus {
        entries,
        waves,
        utts,
    })
}

fn of_split(utts: &[UtteranceFeatures], split: Split) -> Result<Vec<UtteranceFeatures>, CliError> {
    let picked: Vec<_> = utts.iter().filter(|u| u.split == split).cloned().collect();
    if picked.is_empty() {
        return Err(CliError::Validation(format!(
            "manifest has no {split:?} utterances"
        )));
    }
    Ok(picked)
}

fn load_params(path: &Path) -> Result<DepAudioNetParams<f32>, CliError> {
    Ok(load_checkpoint(path)?.params)
}

fn train_config(base: TrainConfig, args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(base.epochs),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        lr0: args.lr0.unwrap_or(base.lr0),
        tau: args.tau.unwrap_or(base.tau),
        seed: args.seed,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn say(line: impl AsRef<str>) {
    println!("{}", line.as_ref());
}

pub fn synth(args: &SynthArgs, run: &RunDir) -> Result<(), CliError> {
    let mut opts = match args.depressed_fraction {
        Some(f) if (0.0..=1.0).contains(&f) => {
            SynthOptions::labeled(args.speakers, args.utts, args.seed, f)
        }
        Some(f) => {
            return Err(CliError::Validation(format!(
                "--depressed-fraction must lie in [0, 1], got {f}"
            )))
        }
        None => SynthOptions::unlabeled(args.speakers, args.utts, args.seed),
    };
    opts.min_secs = args.min_secs.unwrap_or(opts.min_secs);
    opts.max_secs = args.max_secs.unwrap_or(opts.max_secs);
    write_config(run, "synth", args, None)?;
    let (waves, mut entries) = synth_corpus_with(&opts)?;
    let audio = run.join(AUDIO_DIR);
    fs::create_dir_all(&audio).map_err(|e| CliError::io(&audio, e))?;
    for (wave, entry) in waves.iter().zip(&mut entries) {
        entry.path = Path::new(AUDIO_DIR).join(&entry.path);
        encode_wav(&run.path().join(&entry.path), wave)?;
    }
    let manifest = run.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    say(format!(
        "wrote {} utterances of {} speakers to {}",
        entries.len(),
        opts.n_speakers,
        manifest.display()
    ));
    Ok(())
}

pub fn features(args: &FeaturesArgs, run: &RunDir) -> Result<(), CliError> {
    write_config(run, "features", args, None)?;
    let entries = load_manifest(&args.manifest)?;
    let waves = load_waves(&args.manifest, &entries)?;
    let utts = featurize(&waves, &entries)?;
    let dir = run.join(FEATURES_DIR);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for u in &utts {
        write_feature_cache(&dir.join(format!("{}.bin", u.utterance_id)), &u.mel)?;
    }
    say(format!(
        "wrote {} feature files to {}",
        utts.len(),
        dir.display()
    ));
    Ok(())
}

/// Checked before any work so the missing prerequisite is reported at once.
pub fn check_pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    match (args.strategy, &args.pseudo_labels) {
        (Strategy::Pis, None) => Err(CliError::Validation(
            "--strategy pis requires --pseudo-labels (run `cluster` on a stage-one checkpoint first)"
                .into(),
        )),
        (Strategy::Rs | Strategy::Ds, Some(_)) => Err(CliError::Validation(format!(
            "--pseudo-labels only applies to --strategy pis, not {}",
            args.strategy
        ))),
        _ => Ok(()),
    }
}

pub fn pretrain_cmd(args: &PretrainArgs, run: &RunDir) -> Result<(), CliError> {
    let cfg = train_config(
        TrainConfig {
            strategy: args.strategy,
            augment: args.augment,
            ..TrainConfig::default()
        },
        &args.train,
    )?;
    write_config(run, "pretrain", args, Some(&cfg))?;
    let corpus = load_corpus(&args.input, args.augment.is_signal_level())?;
    let (mut train, val) = pretrain_pools(&corpus.utts)?;
    if let Some(path) = &args.pseudo_labels {
        apply_pseudo_labels(&mut train, &read_pseudo_labels(path)?)?;
    }
    let init = args.init.as_deref().map(load_params).transpose()?;
    let waves = args
        .augment
        .is_signal_level()
        .then_some(corpus.waves.as_slice());
    info!(
        "pre-training on {} segments ({} validation)",
        train.len(),
        val.len()
    );
    let outcome = pretrain(&train, &val, waves, &cfg, init.as_ref())?;
    save_checkpoint(
        &run.join("best.ckpt"),
        &outcome.best.params,
        &outcome.best.meta,
    )?;
    let last = outcome.curve.last().copied();
    let last_meta = CheckpointMeta {
        config: outcome.best.meta.config.clone(),
        epoch: last.map(|e| e.epoch),
        val_loss: last.and_then(|e| e.val_loss),
        loss_curve: outcome.curve.clone(),
    };
    save_checkpoint(&run.join("last.ckpt"), &outcome.last, &last_meta)?;
    write_loss_curve(&run.join("loss_curve.csv"), &outcome.curve)?;
    say(format!(
        "best epoch {:?}, validation loss {:?}",
        outcome.best.meta.epoch, outcome.best.meta.val_loss
    ));
    Ok(())
}

pub fn cluster(args: &ClusterArgs, run: &RunDir) -> Result<(), CliError> {
    if args.clusters < 2 {
        return Err(CliError::Validation(format!(
            "--clusters must be at least 2, got {}",
            args.clusters
        )));
    }
    write_config(run, "cluster", args, None)?;
    let params = load_params(&args.checkpoint)?;
    let corpus = load_corpus(&args.input, false)?;
    let (mut train, _) = pretrain_pools(&corpus.utts)?;
    let model = pseudo_label_pool(&params, &mut train, args.clusters, args.seed)?;
    let path = run.join("pseudo_labels.jsonl");
    write_pseudo_labels(&path, &train)?;
    run.write_json("kmeans.json", &model)?;
    say(format!(
        "{} segments in {} clusters, inertia {:.4}; labels in {}",
        train.len(),
        model.k,
        model.inertia,
        path.display()
    ));
    Ok(())
}

pub fn finetune(args: &FinetuneArgs, run: &RunDir) -> Result<(), CliError> {
    let cfg = train_config(TrainConfig::finetune(args.profile), &args.train)?;
    write_config(run, "finetune", args, Some(&cfg))?;
    let corpus = load_corpus(&args.input, false)?;
    let train = of_split(&corpus.utts, Split::Train)?;
    let init = args.init.as_deref().map(load_params).transpose()?;
    let val = match args.select {
        Selection::Final => None,
        Selection::BestVal => Some(of_split(&corpus.utts, Split::Validation)?),
    };
    let models = finetune_ensemble_with(&train, val.as_deref(), init.as_ref(), &cfg, args.profile)?;
    for (m, ckpt) in models.iter().enumerate() {
        save_checkpoint(
            &run.join(&format!("model_{m}.ckpt")),
            &ckpt.params,
            &ckpt.meta,
        )?;
        write_loss_curve(
            &run.join(&format!("loss_curve_{m}.csv")),
            &ckpt.meta.loss_curve,
        )?;
    }
    say(format!(
        "fine-tuned {} model(s) on {} utterances",
        models.len(),
        train.len()
    ));
    Ok(())
}

pub fn eval(args: &EvalArgs, run: &RunDir) -> Result<(), CliError> {
    write_config(run, "eval", args, None)?;
    let models = args
        .checkpoints
        .iter()
        .map(|p| load_params(p))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = load_corpus(&args.input, false)?;
    let utts = of_split(&corpus.utts, args.split)?;
    let report = evaluate(&models, &utts)?;
    let path = run.write_json("eval_report.json", &report)?;
    say(format!(
        "f1_avg {:.4} (nd {:.4}, d {:.4}); report in {}",
        report.f1_avg,
        report.f1_nd,
        report.f1_d,
        path.display()
    ));
    Ok(())
}

pub fn probe(args: &ProbeArgs, run: &RunDir) -> Result<(), CliError> {
    let source = match (&args.checkpoint, args.no_finetune) {
        (Some(_), false) => "finetuned",
        (Some(_), true) => "pretrained",
        (None, _) => "random-init",
    };
    write_config(run, "probe", args, None)?;
    let params = match &args.checkpoint {
        Some(p) => load_params(p)?,
        None => init_params(derive(args.seed, 0)),
    };
    let corpus = load_corpus(&args.input, false)?;
    let utts = of_split(&corpus.utts, args.split)?;
    let segments = segment_utterances(&utts, SEGMENT_FRAMES)?;
    let feats: Vec<&[f32]> = segments.iter().map(|s| s.features.as_slice()).collect();
    let embeddings: Vec<Vec<f64>> = embed_segments(&params, &feats)?
        .into_iter()
        .map(|e| e.into_iter().map(f64::from).collect())
        .collect();
    let ids: Vec<String> = segments.iter().map(|s| s.speaker_id.clone()).collect();
    let data = ProbeDataset::new(embeddings, &ids)?;
    let cfg = SvmConfig {
        seed: args.seed,
        ..SvmConfig::default()
    };
    let report = run_probe(&data, &cfg, source)?;
    let path = run.write_json(
        "probe_report.json",
        &json!({ "svm": cfg, "report": report }),
    )?;
    say(format!(
        "probe accuracy {:.4} over {} speakers ({source}); report in {}",
        report.accuracy,
        report.n_speakers,
        path.display()
    ));
    Ok(())
}

fn to_time_major(seg: &[f32]) -> MelSpectrogram {
    let mut frames = vec![0.0; seg.len()];
    for m in 0..N_MELS {
        for t in 0..SEGMENT_FRAMES {
            frames[t * N_MELS + m] = seg[m * SEGMENT_FRAMES + t];
        }
    }
    MelSpectrogram {
        n_frames: SEGMENT_FRAMES,
        n_mels: N_MELS,
        frames,
    }
}

pub fn augment_preview(args: &AugmentPreviewArgs, run: &RunDir) -> Result<(), CliError> {
    let params = AugmentParams::default();
    write_config(run, "augment-preview", args, None)?;
    let corpus = load_corpus(&args.input, args.augment.is_signal_level())?;
    let pool: Vec<Segment> = concat_and_segment(&corpus.utts, SEGMENT_FRAMES)?;
    let seg = pool.get(args.segment).ok_or_else(|| {
        CliError::Validation(format!(
            "--segment {} out of range ({} segments)",
            args.segment,
            pool.len()
        ))
    })?;
    let waves = args
        .augment
        .is_signal_level()
        .then_some(corpus.waves.as_slice());
    let augmenter = Augmenter::new(args.augment, params, waves)?;
    let after = augmenter.apply(seg, args.seed)?;
    write_feature_cache(&run.join("before.bin"), &to_time_major(&seg.features))?;
    write_feature_cache(&run.join("after.bin"), &to_time_major(&after))?;
    say(format!(
        "segment {} of {} ({} utterances): before.bin and after.bin in {}",
        args.segment,
        seg.utterance_id,
        corpus.entries.len(),
        run.path().display()
    ));
    Ok(())
}
