use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn idl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idl"))
        .args(args)
        .env("IDL_RUN_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str], root: &Path) -> Output {
    let out = idl(args, root);
    assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_and_flag_exit_one_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["synth", "--speakers", "2", "--bogus"],
    ] {
        let out = idl(args, tmp.path());
        assert_eq!(code(&out), 1);
        assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    }
    assert_eq!(code(&idl(&["--help"], tmp.path())), 0);
    let bad_value = idl(
        &["pretrain", "--manifest", "m", "--strategy", "xx"],
        tmp.path(),
    );
    assert_eq!(code(&bad_value), 1);
}

#[test]
fn synth_writes_one_entry_per_utterance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(
        &["synth", "--speakers", "10", "--utts", "4", "--seed", "1"],
        tmp.path(),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("40 utterances"));
    let run = tmp.path().join("synth");
    let manifest = fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 40);
    assert_eq!(fs::read_dir(run.join("audio")).unwrap().count(), 40);
    let config: Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "synth");
    assert_eq!(config["args"]["speakers"], 10);
    assert!(!run.join(".lock").exists());
}

#[test]
fn pis_without_pseudo_labels_names_the_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = idl(
        &[
            "pretrain",
            "--manifest",
            "missing.jsonl",
            "--strategy",
            "pis",
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--pseudo-labels"), "{}", stderr(&out));
    assert!(!tmp.path().join("pretrain").exists());
}

#[test]
fn bad_input_and_runtime_failures_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("bad.jsonl");
    fs::write(&manifest, "{\"path\": \"a.wav\"}\n").unwrap();
    let out = idl(&["features", "--manifest", s(&manifest)], tmp.path());
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("line 1"));

    fs::write(
        &manifest,
        "{\"path\": \"gone.wav\", \"speaker_id\": \"a\", \"label\": null, \"split\": \"train\"}\n",
    )
    .unwrap();
    let out = idl(&["features", "--manifest", s(&manifest)], tmp.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn locked_run_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("busy");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".lock"), "").unwrap();
    let out = idl(
        &[
            "synth",
            "--speakers",
            "2",
            "--utts",
            "1",
            "--run-dir",
            s(&run),
        ],
        tmp.path(),
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("locked"));
    assert!(!run.join("manifest.jsonl").exists());
}

struct Pipeline {
    root: PathBuf,
}

impl Pipeline {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, name: &str, args: &[&str]) -> PathBuf {
        let dir = self.dir(name);
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--run-dir", s(&dir)]);
        ok(&full, &self.root);
        assert!(dir.join("config.json").exists(), "{name}");
        dir
    }
}

#[test]
fn scripted_pipeline_writes_an_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline {
        root: tmp.path().to_path_buf(),
    };
    let data = p.run(
        "data",
        &[
            "synth",
            "--speakers",
            "12",
            "--utts",
            "2",
            "--seed",
            "3",
            "--depressed-fraction",
            "0.5",
            "--min-secs",
            "8",
            "--max-secs",
            "10",
        ],
    );
    let manifest = data.join("manifest.jsonl");
    let manifest_before = fs::read(&manifest).unwrap();
    let feats = p.run("feats", &["features", "--manifest", s(&manifest)]);
    let cache = feats.join("features");
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 24);
    let input = ["--manifest", s(&manifest), "--features", s(&cache)];
    let small = ["--epochs", "2", "--batch-size", "4", "--seed", "5"];

    let stage_one = p.run(
        "ds",
        &[
            &["pretrain", "--strategy", "ds", "--augment", "tm"][..],
            &input,
            &small,
        ]
        .concat(),
    );
    let curve = fs::read_to_string(stage_one.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let best = stage_one.join("best.ckpt");
    let again = p.run(
        "ds-again",
        &[
            &["pretrain", "--strategy", "ds", "--augment", "tm"][..],
            &input,
            &small,
        ]
        .concat(),
    );
    assert_eq!(
        fs::read(&best).unwrap(),
        fs::read(again.join("best.ckpt")).unwrap()
    );
    let labels = p.run(
        "cluster",
        &[
            &["cluster", "--checkpoint", s(&best), "--clusters", "4"][..],
            &input,
        ]
        .concat(),
    );
    let pseudo = labels.join("pseudo_labels.jsonl");
    let stage_two = p.run(
        "pis",
        &[
            &[
                "pretrain",
                "--strategy",
                "pis",
                "--augment",
                "tm",
                "--pseudo-labels",
                s(&pseudo),
                "--init",
                s(&best),
            ][..],
            &input,
            &small,
        ]
        .concat(),
    );
    let ft = p.run(
        "ft",
        &[
            &[
                "finetune",
                "--profile",
                "a",
                "--init",
                s(&stage_two.join("best.ckpt")),
                "--select",
                "best-val",
            ][..],
            &input,
            &["--epochs", "2", "--batch-size", "8", "--seed", "5"],
        ]
        .concat(),
    );
    let members: Vec<String> = (0..5)
        .map(|m| s(&ft.join(format!("model_{m}.ckpt"))).to_string())
        .collect();
    let mut eval_args: Vec<&str> = vec!["eval"];
    for m in &members {
        eval_args.extend(["--checkpoint", m.as_str()]);
    }
    eval_args.extend(input);
    let eval = p.run("eval", &eval_args);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(eval.join("eval_report.json")).unwrap()).unwrap();
    let f1 = report["f1_avg"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let confusion = report["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(
        total as usize,
        report["per_utterance"].as_object().unwrap().len()
    );

    let probe = p.run(
        "probe",
        &[
            &["probe", "--checkpoint", s(&best), "--no-finetune"][..],
            &input,
        ]
        .concat(),
    );
    let probe_report: Value =
        serde_json::from_str(&fs::read_to_string(probe.join("probe_report.json")).unwrap())
            .unwrap();
    assert_eq!(probe_report["report"]["embedding_source"], "pretrained");

    assert_eq!(fs::read(&manifest).unwrap(), manifest_before);
}

#[test]
fn augment_preview_writes_both_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(
        &[
            "synth",
            "--speakers",
            "2",
            "--utts",
            "2",
            "--run-dir",
            s(&data),
        ],
        tmp.path(),
    );
    let manifest = data.join("manifest.jsonl");
    for kind in ["tm", "vtlp"] {
        let run = tmp.path().join(kind);
        ok(
            &[
                "augment-preview",
                "--manifest",
                s(&manifest),
                "--augment",
                kind,
                "--run-dir",
                s(&run),
            ],
            tmp.path(),
        );
        let before = fs::read(run.join("before.bin")).unwrap();
        let after = fs::read(run.join("after.bin")).unwrap();
        assert_eq!(before.len(), 8 + 120 * 40 * 4);
        assert_eq!(before.len(), after.len());
        assert_ne!(before, after, "{kind}");
    }
}
