use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kplm_core::dataset::read_dataset;
use kplm_core::train::load_checkpoint;

fn kplm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kplm")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/alphapose")
}

const TINY: &str = "d_model=16\nn_heads=2\nn_layers=1\nd_ff=32\nbatch_size=8\nmax_steps=12\nwarmup_steps=3\neval_every=6\n";

fn tiny_run(dir: &Path) {
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let o = kplm(dir, &["synth", "--classes", "wave,squat", "--count", "8", "--out", "d"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = kplm(dir, &["--config", "tiny.cfg", "train", "--train", "d/train.jsonl", "--val", "d/val.jsonl", "--out", "t"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("best_top1="));
}

#[test]
fn synth_split_sizes_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let o = kplm(dir.path(), &["synth", "--classes", "wave,squat", "--count", "8", "--seed", "42", "--out", "d/"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "train=16 val=4\n");
    assert_eq!(read_dataset(&dir.path().join("d/train.jsonl")).unwrap().len(), 16);
    assert_eq!(read_dataset(&dir.path().join("d/val.jsonl")).unwrap().len(), 4);
    let first = std::fs::read(dir.path().join("d/train.jsonl")).unwrap();
    kplm(dir.path(), &["synth", "--classes", "wave,squat", "--count", "8", "--seed", "42", "--out", "e/"]);
    assert_eq!(std::fs::read(dir.path().join("e/train.jsonl")).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("e/val.jsonl")).unwrap(), std::fs::read(dir.path().join("d/val.jsonl")).unwrap());

    let o = kplm(dir.path(), &["synth", "--count", "1", "--out", "all"]);
    assert_eq!(stdout(&o), format!("train={n} val={n}\n", n = kplm_core::synth::ActivityClass::ALL.len()));
}

#[test]
fn synth_unknown_class_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = kplm(dir.path(), &["synth", "--classes", "wave,moonwalk", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--classes"), "{}", stderr(&o));
    let o = kplm(dir.path(), &["synth", "--classes", "wave,wave", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let expect: [(&str, &[&str]); 5] = [
        ("synth", &["--classes", "[default: wave,squat,jump,clap,march]", "--count", "[default: 200]", "--noise-sigma"]),
        ("ingest", &["--alphapose-dir", "--manifest", "--skip-report", "--tau", "[default: 0.05]"]),
        ("train", &["[default: 5000]", "[default: 0.0003]", "[default: 250]", "[default: 384]", "--stop-at-top1"]),
        ("eval", &["--checkpoint", "--data", "--constrained", "[default: metrics.json]"]),
        ("infer", &["--input", "--format", "[default: auto]", "--constrained"]),
    ];
    for (sub, needles) in expect {
        let o = kplm(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        for n in needles.iter().chain(&["--config", "--seed", "[default: 42]", "--deterministic", "[default: true]"]) {
            assert!(text.contains(n), "{sub} --help lacks {n}:\n{text}");
        }
    }
}

#[test]
fn ingest_fixture_writes_dataset_and_skip_report() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture();
    let (poses, manifest) = (fx.join("poses"), fx.join("manifest.csv"));
    let o = kplm(
        dir.path(),
        &["ingest", "--alphapose-dir", poses.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--out", "out/data.jsonl"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "videos=4 actions=4 keypoints=680\n");
    let got = read_dataset(&dir.path().join("out/data.jsonl")).unwrap();
    assert_eq!(got, read_dataset(&fx.join("expected.jsonl")).unwrap());
    let skips = std::fs::read_to_string(dir.path().join("out/data_skips.csv")).unwrap();
    assert_eq!(skips, std::fs::read_to_string(fx.join("expected_skips.csv")).unwrap());
}

#[test]
fn ingest_missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = kplm(dir.path(), &["ingest", "--alphapose-dir", ".", "--manifest", "absent.csv", "--out", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--manifest"));
    let o = kplm(dir.path(), &["ingest", "--alphapose-dir", "."]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_bad_pose_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.csv"), "video_id,pose_file,label\nv1,v1.json,wave\n").unwrap();
    std::fs::write(dir.path().join("v1.json"), "[{\"image_id\": \"0.jpg\", \"keypoints\": [1, 2]}]").unwrap();
    let o = kplm(dir.path(), &["ingest", "--alphapose-dir", ".", "--manifest", "m.csv", "--out", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("v1"), "{}", stderr(&o));
}

#[test]
fn config_file_fills_unset_flags_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# shared\ncount=3\nseed=7\nclasses=wave\npeak_lr=0.1\n").unwrap();
    let o = kplm(dir.path(), &["--config", "run.cfg", "synth", "--count", "5", "--out", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "train=5 val=2\n");
    kplm(dir.path(), &["synth", "--classes", "wave", "--count", "5", "--seed", "7", "--out", "b"]);
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/train.jsonl"), read("b/train.jsonl"));

    std::fs::write(dir.path().join("bad.cfg"), "cuont=3\n").unwrap();
    let o = kplm(dir.path(), &["synth", "--config", "bad.cfg", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cuont"));
    let o = kplm(dir.path(), &["synth", "--config", "missing.cfg", "--out", "c"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_infer_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_run(d);
    let log = std::fs::read_to_string(d.join("t/train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,train_loss,val_loss,val_top1\n0,0,,,\n"));
    assert_eq!(log.lines().count(), 14);
    let ck = load_checkpoint(&d.join("t/model.klm")).unwrap();
    assert_eq!(ck.model_config.d_model, 16);
    assert_eq!(ck.train_config.max_steps, 12);

    for flag in [None, Some("--constrained")] {
        let mut args = vec!["eval", "--checkpoint", "t/model.klm", "--data", "d/val.jsonl", "--out", "ev/m.json"];
        args.extend(flag);
        let o = kplm(d, &args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let top1: f64 = stdout(&o).trim().strip_prefix("top1=").unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&top1));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/m.json")).unwrap()).unwrap();
        assert_eq!(json["top1"].as_f64().unwrap(), top1);
        assert!(d.join("ev/m_confusion.csv").is_file());
    }

    let o = kplm(d, &["infer", "--checkpoint", "t/model.klm", "--input", "d/val.jsonl", "--index", "3", "--constrained"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(["wave", "squat"].contains(&stdout(&o).trim()), "{}", stdout(&o));
    let pose = fixture().join("poses/walk_01.json");
    let o = kplm(d, &["infer", "--checkpoint", "t/model.klm", "--input", pose.to_str().unwrap(), "--constrained"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(["wave", "squat"].contains(&stdout(&o).trim()));
    let o = kplm(d, &["infer", "--checkpoint", "t/model.klm", "--input", pose.to_str().unwrap(), "--format", "record"]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(d.join("junk.json"), "[{\"image_id\": 3}]").unwrap();
    let o = kplm(d, &["infer", "--checkpoint", "t/model.klm", "--input", "junk.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("junk.json"));
}

#[test]
fn eval_rejects_unknown_labels_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_run(d);
    let other = fixture().join("expected.jsonl");
    let o = kplm(d, &["eval", "--checkpoint", "t/model.klm", "--data", other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not in the vocabulary label set"), "{}", stderr(&o));

    let mut bytes = std::fs::read(d.join("t/model.klm")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(d.join("bad.klm"), &bytes).unwrap();
    let o = kplm(d, &["eval", "--checkpoint", "bad.klm", "--data", "d/val.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum mismatch"), "{}", stderr(&o));
    let o = kplm(d, &["eval", "--checkpoint", "nope.klm", "--data", "d/val.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_training_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    kplm(d, &["synth", "--classes", "wave", "--count", "2", "--out", "d"]);
    let base = ["train", "--train", "d/train.jsonl", "--val", "d/val.jsonl", "--out", "t"];
    for extra in [&["--warmup-steps", "10", "--max-steps", "5"][..], &["--d-model", "10", "--n-heads", "3"], &["--max-steps", "x"]] {
        let mut args = base.to_vec();
        args.extend(extra);
        assert_eq!(kplm(d, &args).status.code(), Some(2), "{extra:?}");
    }
}
