use std::path::PathBuf;

use dfxtrain::data::{load_idx, load_idx_dir};
use dfxtrain::CliError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn handcrafted_fixture_recovers_exact_pixels() {
    let ds = load_idx(&fixture("four-images-idx3-ubyte"), &fixture("four-labels-idx1-ubyte")).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.dim, 6);
    assert_eq!(ds.y, vec![7, 0, 3, 9]);
    assert_eq!(ds.classes, 10);
    let img = |i: usize| ds.x[i * 6..(i + 1) * 6].to_vec();
    let scaled = |b: [u8; 6]| b.map(|v| v as f32 / 255.0).to_vec();
    assert_eq!(img(0), scaled([0, 1, 2, 10, 11, 12]));
    assert_eq!(img(1), scaled([40, 41, 42, 50, 51, 52]));
    assert_eq!(img(2), scaled([80, 81, 82, 90, 91, 92]));
    assert_eq!(img(3), vec![1.0; 6]);
}

#[test]
fn gzip_and_plain_agree() {
    let plain = load_idx(&fixture("four-images-idx3-ubyte"), &fixture("four-labels-idx1-ubyte")).unwrap();
    let gz = load_idx(&fixture("four-images-idx3-ubyte.gz"), &fixture("four-labels-idx1-ubyte")).unwrap();
    assert_eq!(plain, gz);
}

#[test]
fn truncated_file_is_malformed() {
    let r = load_idx(&fixture("truncated-images-idx3-ubyte"), &fixture("four-labels-idx1-ubyte"));
    assert!(matches!(r, Err(CliError::MalformedIdx(_))), "{r:?}");
}

#[test]
fn swapped_magic_is_malformed() {
    let r = load_idx(&fixture("four-labels-idx1-ubyte"), &fixture("four-images-idx3-ubyte"));
    assert!(matches!(r, Err(CliError::MalformedIdx(_))), "{r:?}");
}

#[test]
fn count_mismatch_is_reported() {
    let r = load_idx(&fixture("four-images-idx3-ubyte"), &fixture("three-labels-idx1-ubyte"));
    assert!(matches!(r, Err(CliError::DimMismatch { images: 4, labels: 3 })), "{r:?}");
}

#[test]
fn missing_files_are_not_found() {
    let r = load_idx(&fixture("nope"), &fixture("four-labels-idx1-ubyte"));
    assert!(matches!(r, Err(CliError::DatasetNotFound(_))), "{r:?}");
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_idx_dir(dir.path()), Err(CliError::DatasetNotFound(_))));
}
