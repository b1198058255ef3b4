use std::fs;
use std::path::{Path, PathBuf};

use fedcomloc::data::load_idx;
use fedcomloc::Error;

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

// four 2x3 images with hand-picked bytes
const PIXELS: [u8; 24] = [
    0, 255, 128, 1, 2, 3, //
    10, 20, 30, 40, 50, 60, //
    255, 255, 255, 0, 0, 0, //
    7, 77, 177, 254, 100, 51,
];
const LABELS: [u8; 4] = [3, 0, 7, 3];

fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let images = dir.join("images.idx3");
    let labels = dir.join("labels.idx1");
    fs::write(&images, idx(0x0000_0803, &[4, 2, 3], &PIXELS)).unwrap();
    fs::write(&labels, idx(0x0000_0801, &[4], &LABELS)).unwrap();
    (images, labels)
}

#[test]
fn fixture_round_trips_pixels_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    let ds = load_idx(&images, &labels).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.n_features(), 6);
    assert_eq!(ds.n_classes(), 8);
    assert_eq!(ds.labels(), &[3, 0, 7, 3]);
    for (i, &b) in PIXELS.iter().enumerate() {
        assert_eq!(ds.features()[i], f64::from(b) / 255.0);
    }
    assert_eq!(ds.row(2), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn labels_file_passed_as_images_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, labels) = write_fixture(dir.path());
    match load_idx(&labels, &labels) {
        Err(Error::Format { offset, message, .. }) => {
            assert_eq!(offset, 0);
            assert!(message.contains("0x00000801"), "{message}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncated_payload_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    let bytes = fs::read(&images).unwrap();
    fs::write(&images, &bytes[..bytes.len() - 5]).unwrap();
    match load_idx(&images, &labels) {
        Err(Error::Format { offset, path, .. }) => {
            assert_eq!(offset, (bytes.len() - 5) as u64);
            assert_eq!(path, images);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn truncated_header_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    fs::write(&images, [0u8, 0, 8, 3, 0, 0]).unwrap();
    assert!(matches!(load_idx(&images, &labels), Err(Error::Format { offset: 4, .. })));
}

#[test]
fn count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path());
    fs::write(&labels, idx(0x0000_0801, &[3], &LABELS[..3])).unwrap();
    assert!(matches!(load_idx(&images, &labels), Err(Error::Format { .. })));
}

#[test]
fn missing_file_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = write_fixture(dir.path());
    let missing = dir.path().join("nope.idx1");
    let err = load_idx(&images, &missing).unwrap_err();
    assert!(err.to_string().contains("nope.idx1"), "{err}");
}
