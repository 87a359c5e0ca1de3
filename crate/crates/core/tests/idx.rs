use std::path::PathBuf;

use metadr_core::domains::{load_idx, write_idx, DomainError, LabeledDataset};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(payload);
    v
}

#[test]
fn fixture_loads_with_known_checksums() {
    let ds = load_idx(&fixture("four-images.idx3-ubyte"), &fixture("four-labels.idx1-ubyte"), 10, false).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.shape(), [1, 5, 4]);
    assert_eq!(ds.labels(), &[1, 4, 7, 0]);
    let sums: Vec<u32> = (0..4).map(|i| ds.image_bytes(i).iter().map(|&v| u32::from(v)).sum()).collect();
    assert_eq!(sums, vec![530, 1270, 2010, 2750]);
    assert_eq!(ds.image(2).get(1, 3, 0), f64::from(37 * 2 + 11 + 9));

    let rgb = load_idx(&fixture("four-images.idx3-ubyte"), &fixture("four-labels.idx1-ubyte"), 10, true).unwrap();
    assert_eq!(rgb.shape(), [3, 5, 4]);
    assert!(rgb.image_bytes(1).chunks(3).zip(ds.image_bytes(1)).all(|(px, &g)| px == [g, g, g]));
}

#[test]
fn bad_magic_count_mismatch_and_truncation() {
    let images = fixture("four-images.idx3-ubyte");
    let err = load_idx(&images, &images, 10, false).unwrap_err();
    assert!(matches!(err, DomainError::BadMagic { found: 0x803, .. }));
    assert!(err.to_string().contains("bad magic"));

    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("i");
    let lab = dir.path().join("l");
    std::fs::write(&img, idx_bytes(0x803, &[10, 2, 2], &[0; 40])).unwrap();
    std::fs::write(&lab, idx_bytes(0x801, &[9], &[0; 9])).unwrap();
    let err = load_idx(&img, &lab, 10, false).unwrap_err();
    assert_eq!(err, DomainError::CountMismatch { images: 10, labels: 9 });
    assert!(err.to_string().contains("count mismatch"));

    std::fs::write(&img, idx_bytes(0x803, &[10, 2, 2], &[0; 39])).unwrap();
    assert!(matches!(load_idx(&img, &lab, 10, false), Err(DomainError::Truncated(_))));

    std::fs::write(&img, idx_bytes(0x803, &[1, 2, 2], &[0; 4])).unwrap();
    std::fs::write(&lab, idx_bytes(0x801, &[1], &[12])).unwrap();
    assert_eq!(load_idx(&img, &lab, 10, false).unwrap_err(), DomainError::Label { label: 12, classes: 10 });
}

#[test]
fn write_then_load_round_trips() {
    let ds = LabeledDataset::new("x".into(), [3, 2, 3], 5, (0..36).collect(), vec![4, 0]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&ds, &img, &lab).unwrap();
    let back = load_idx(&img, &lab, 5, true).unwrap();
    assert_eq!(back.pixels(), ds.pixels());
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.shape(), ds.shape());
}
