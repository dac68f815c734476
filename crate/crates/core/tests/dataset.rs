use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use blocktower::dataset::{
    import_image, load_dataset, read_manifest, verify, write_dataset, DatasetError, SplitFilter,
};
use blocktower::render::Image;
use blocktower::scenegen::{generate_balanced, GenConfig, Split};

fn cfg() -> GenConfig {
    GenConfig {
        master_seed: 3,
        count_per_cell: 4,
        test_count_per_cell: 2,
        ..Default::default()
    }
}

fn build(dir: &Path) -> (GenConfig, usize) {
    let cfg = cfg();
    let mut samples = generate_balanced(&cfg, Split::Train).unwrap();
    samples.extend(generate_balanced(&cfg, Split::Test).unwrap());
    let n = samples.len();
    write_dataset(&samples, &cfg, dir).unwrap();
    (cfg, n)
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn layout_counts_and_byte_identical_rewrites() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, n) = build(a.path());
    build(b.path());
    assert_eq!(n, 36);

    let manifest = fs::read_to_string(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), n);
    let dirs: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(dirs.len(), n);
    for d in dirs {
        assert_eq!(fs::read_dir(d.path()).unwrap().count(), 7);
    }
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn manifest_key_order_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let first = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let line = first.lines().next().unwrap();
    let keys = [
        "\"id\"",
        "\"seed\"",
        "\"index\"",
        "\"n_blocks\"",
        "\"fell\"",
        "\"margin\"",
        "\"split\"",
        "\"image_path\"",
        "\"outcome_image_path\"",
        "\"mask_paths\"",
        "\"trajectory_path\"",
    ];
    let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{line}");
}

#[test]
fn stable_records_have_identical_first_and_last_masks() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let m = read_manifest(dir.path()).unwrap();
    for r in m.records.iter().filter(|r| !r.fell) {
        let m0 = fs::read(dir.path().join(&r.mask_paths[0])).unwrap();
        let m4 = fs::read(dir.path().join(&r.mask_paths[3])).unwrap();
        assert_eq!(m0, m4, "{}", r.id);
    }
}

#[test]
fn load_round_trips_pixels_and_filters_split() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let all = load_dataset(dir.path(), SplitFilter::All).unwrap();
    let test = load_dataset(dir.path(), SplitFilter::Test).unwrap();
    assert_eq!(all.len(), 36);
    assert_eq!(test.len(), 12);
    assert!(test.iter().all(|e| e.record.split == Split::Test));
    for ex in &all {
        let raw = fs::read(dir.path().join(&ex.record.image_path)).unwrap();
        assert_eq!(&raw[raw.len() - ex.image.data.len()..], &ex.image.data[..]);
        let masks = ex.masks.as_ref().unwrap();
        assert!(masks.iter().all(|m| m.data.iter().all(|&v| v <= 4)));
    }
    let floats = all[0].image.to_chw_f32();
    assert!(floats.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(verify(dir.path()).unwrap().ok());
}

#[test]
fn truncated_image_is_reported_with_path() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let m = read_manifest(dir.path()).unwrap();
    let victim = dir.path().join(&m.records[5].image_path);
    let mut bytes = fs::read(&victim).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&victim, bytes).unwrap();
    match load_dataset(dir.path(), SplitFilter::All) {
        Err(DatasetError::CorruptFile { path, .. }) => assert_eq!(path, victim),
        other => panic!("unexpected {other:?}"),
    }
    let report = verify(dir.path()).unwrap();
    assert_eq!(report.problems.len(), 1);
}

#[test]
fn missing_file_and_label_tampering_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let m = read_manifest(dir.path()).unwrap();
    fs::remove_file(dir.path().join(&m.records[0].mask_paths[2])).unwrap();
    assert!(matches!(
        load_dataset(dir.path(), SplitFilter::All),
        Err(DatasetError::MissingFile(_))
    ));

    let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let flipped = text.replacen("\"fell\":false", "\"fell\":true", 1);
    fs::write(dir.path().join("manifest.jsonl"), flipped).unwrap();
    let report = verify(dir.path()).unwrap();
    assert!(report.problems.iter().any(|p| p.contains("label disagrees")));
}

#[test]
fn imported_images_load_without_masks() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let img = Image::filled(56, 56, [10, 20, 30]);
    import_image(dir.path(), "real-0000", &img, 3, true, Split::Test).unwrap();
    assert!(import_image(dir.path(), "real-0000", &img, 3, true, Split::Test).is_err());
    let test = load_dataset(dir.path(), SplitFilter::Test).unwrap();
    let real = test.iter().find(|e| e.record.id == "real-0000").unwrap();
    assert!(real.masks.is_none());
    assert_eq!(real.image, img);
    let report = verify(dir.path()).unwrap();
    assert!(report.ok(), "{:?}", report.problems);
    assert_eq!(report.imported, 1);
}
