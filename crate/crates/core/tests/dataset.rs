use std::fs;

use ebm_core::bridge::{build_dataset, load_dataset, verify_dataset, Manifest, Subtype, HEIGHT, WIDTH};
use ebm_core::pgm::GrayImage;

#[test]
fn one_per_subtype_build_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(dir.path(), 1, 3).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    let pgms = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 8);
    for t in Subtype::ALL {
        assert_eq!(manifest.count(t), 1);
    }
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.images.shape(), &[8, HEIGHT, WIDTH, 1]);
    assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(ds.subtypes, Subtype::ALL.to_vec());
}

#[test]
fn rebuild_is_bitwise_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(a.path(), 4, 77).unwrap();
    build_dataset(b.path(), 4, 77).unwrap();
    for e in Manifest::plan(4, 77).entries {
        assert_eq!(fs::read(a.path().join(&e.file)).unwrap(), fs::read(b.path().join(&e.file)).unwrap());
    }
    assert!(verify_dataset(a.path(), 4, 77).unwrap().is_empty());
    assert!(!verify_dataset(a.path(), 4, 78).unwrap().is_empty());
}

#[test]
fn manifest_and_summary_contents() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(dir.path(), 2, 5).unwrap();
    let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(text.lines().count(), 16);
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first[1], "beam-constant-section");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total"], 16);
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["counts"]["cable-stayed-fan"], 2);
    assert_eq!(summary["ranges_px"]["cable-stayed-fan"]["tower_height"][1], 34.0);
}

#[test]
fn missing_file_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), 1, 0).unwrap();
    fs::remove_file(dir.path().join(&m.entries[3].file)).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}

#[test]
fn wrong_maxval_and_size_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), 1, 0).unwrap();
    let path = dir.path().join(&m.entries[0].file);
    let mut bytes = format!("P5\n{WIDTH} {HEIGHT}\n65535\n").into_bytes();
    bytes.extend(vec![0u8; WIDTH * HEIGHT * 2]);
    fs::write(&path, bytes).unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("maxval"));
    GrayImage::new(4, 4, vec![0; 16]).write(&path).unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("4x4"));
}

#[test]
fn all_white_image_loads_as_ones() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(dir.path(), 1, 0).unwrap();
    GrayImage::new(WIDTH, HEIGHT, vec![255; WIDTH * HEIGHT])
        .write(&dir.path().join(&m.entries[2].file))
        .unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.images.row(2).iter().all(|&v| v == 1.0));
}

#[test]
fn malformed_manifest_rejected() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(dir.path(), 1, 0).unwrap();
    fs::write(dir.path().join("manifest.tsv"), "a.pgm\tbeam\t1\n").unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("line 1"));
}

#[test]
fn failed_build_leaves_no_partial_output() {
    let parent = tempfile::tempdir().unwrap();
    let out = parent.path().join("ds");
    fs::create_dir(&out).unwrap();
    // A directory squatting on a target file name makes that write fail.
    let plan = Manifest::plan(2, 9);
    fs::create_dir(out.join(&plan.entries[5].file)).unwrap();
    assert!(build_dataset(&out, 2, 9).is_err());
    let left: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from(&plan.entries[5].file)]);
}
