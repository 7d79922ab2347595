use std::path::Path;
use std::process::{Command, Output};

fn ltts(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltts"))
        .env("LTTS_CKPT_ROOT", root)
        .args(["--preset", "smoke"])
        .args(args)
        .output()
        .expect("spawn ltts")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = ltts(root, args);
    assert!(
        out.status.success(),
        "ltts {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Phoneme text of corpus item 0, from the manifest.
fn first_item_text(root: &Path) -> String {
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("data/corpus/manifest.json")).unwrap()).unwrap();
    manifest["items"][0]["phonemes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn full_workflow_on_smoke_preset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for verb in ["gen-data", "train-aligner", "train-vae", "train-gan", "train-diffusion"] {
        ok(root, &[verb]);
    }
    assert!(root.join("run.json").exists());
    let mel = root.join("data/corpus/mel_00000.bin");
    let mel = mel.to_str().unwrap();
    let text = first_item_text(root);

    let aligned: serde_json::Value = serde_json::from_str(&ok(root, &["align", "--mel", mel, "--text", &text])).unwrap();
    assert_eq!(aligned["spikes"].as_array().unwrap().len(), text.split(' ').count());

    let out = root.join("out/syn.bin");
    ok(root, &["synthesize", "--text", "0 1 2", "--out", out.to_str().unwrap(), "--steps", "4", "--sample-seed", "3"]);
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("out/syn.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 3);
    assert_eq!(sidecar["durations"].as_array().unwrap().len(), 3);
    for stage in ["data", "aligner", "vae", "gan", "diffusion"] {
        assert!(sidecar["config_hashes"][stage].is_string(), "{stage}");
    }

    let exported: serde_json::Value =
        serde_json::from_str(&ok(root, &["export", "--mel", out.to_str().unwrap(), "--out-dir", root.join("ex").to_str().unwrap()]))
            .unwrap();
    assert!(Path::new(exported["png"].as_str().unwrap()).exists());
    assert_eq!(exported["bins"], 8);

    let edited = root.join("out/edit.bin");
    ok(
        root,
        &[
            "edit", "--mel", mel, "--text", &text, "--span", "1:2", "--replacement", "3 4", "--out",
            edited.to_str().unwrap(), "--steps", "4",
        ],
    );
    let cloned = root.join("out/clone.bin");
    ok(
        root,
        &[
            "clone", "--ref-mel", mel, "--ref-text", &text, "--text", "2 5", "--out", cloned.to_str().unwrap(),
            "--steps", "4",
        ],
    );
    let clone_meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("out/clone.json")).unwrap()).unwrap();
    assert_eq!(clone_meta["durations"].as_array().unwrap().len(), 2);

    let report: serde_json::Value = serde_json::from_str(&ok(
        root,
        &["evaluate", "--synth-samples", "2", "--edit-trials", "1", "--synth-steps", "3", "--edit-steps", "3"],
    ))
    .unwrap();
    let text = std::fs::read_to_string(report["report"].as_str().unwrap()).unwrap();
    latent_tts::pipeline::MetricsReport::from_json(&text).unwrap();
    assert!(!root.join("LOCK").exists());
}

#[test]
fn missing_prerequisite_exits_3_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = ltts(root, &["train-aligner"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires stage: data"));
    ok(root, &["gen-data"]);
    ok(root, &["train-aligner"]);
    let out = ltts(root, &["train-diffusion"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires stage: vae"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"data\": 1}").unwrap();
    let out = ltts(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));

    ok(dir.path(), &["gen-data"]);
    let out = ltts(dir.path(), &["synthesize", "--text", "0 99", "--out", "x.bin"]);
    // Checkpoints are checked before the text, so this is a missing stage.
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_span_and_bad_text_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for verb in ["gen-data", "train-aligner", "train-vae", "train-diffusion"] {
        ok(root, &[verb]);
    }
    let mel = root.join("data/corpus/mel_00000.bin");
    let text = first_item_text(root);
    let out = ltts(
        root,
        &["edit", "--mel", mel.to_str().unwrap(), "--text", &text, "--span", "2-1", "--out", "e.bin"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = ltts(root, &["synthesize", "--text", "0 99", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_tensor_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, [9u8; 5]).unwrap();
    let out = ltts(dir.path(), &["export", "--mel", bad.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ltts(dir.path(), &["no-such-verb"]);
    assert_eq!(out.status.code(), Some(2));
}
