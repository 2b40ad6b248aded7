use std::path::PathBuf;

use kplm_core::dataset::read_dataset;
use kplm_core::ingest::{build_dataset, parse_alphapose, select_person, write_alphapose, IngestOptions};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/alphapose")
}

#[test]
fn fixture_dataset_matches_expected() {
    let dir = fixture_dir();
    let expected = read_dataset(&dir.join("expected.jsonl")).unwrap();
    for parallel in [false, true] {
        let opts = IngestOptions { parallel, ..IngestOptions::default() };
        let (seqs, skips) = build_dataset(&dir.join("poses"), &dir.join("manifest.csv"), &opts).unwrap();
        assert_eq!(seqs.len(), 4);
        assert_eq!(seqs, expected);
        let want_skips = std::fs::read_to_string(dir.join("expected_skips.csv")).unwrap();
        assert_eq!(skips.to_csv(), want_skips);
    }
}

#[test]
fn fixture_person_selection() {
    let dir = fixture_dir();
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected_selections.json")).unwrap()).unwrap();
    for (video, want) in sel.as_object().unwrap() {
        let dets = parse_alphapose(&std::fs::read(dir.join(format!("poses/{video}.json"))).unwrap()).unwrap();
        let image_id = want["image_id"].as_str().unwrap();
        let frame: Vec<_> = dets.iter().filter(|d| d.image_id == image_id).cloned().collect();
        assert!(frame.len() > 1, "{video} has a multi-person frame");
        let chosen = &frame[want["chosen_index"].as_u64().unwrap() as usize];
        assert_eq!(chosen.score, want["score"].as_f64().unwrap());
        assert_eq!(select_person(&frame).unwrap(), chosen.to_frame_pose());
    }
}

#[test]
fn fixture_files_reserialize_exactly() {
    let dir = fixture_dir().join("poses");
    for entry in std::fs::read_dir(dir).unwrap() {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        let dets = parse_alphapose(&bytes).unwrap();
        let again = parse_alphapose(write_alphapose(&dets).as_bytes()).unwrap();
        assert_eq!(dets.len(), again.len());
        for (a, b) in dets.iter().zip(&again) {
            let bits = |d: &kplm_core::ingest::Detection| d.keypoints.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.image_id, b.image_id);
        }
    }
}
