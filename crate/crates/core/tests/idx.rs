use std::fs;
use std::path::Path;

use softreset::bench::{run_experiment, ExperimentConfig, ModelConfig};
use softreset::streams::{load_mnist_dir, load_mnist_idx, Stream, StreamKind, StreamSpec};
use softreset::Error;

const ROWS: usize = 6;
const COLS: usize = 5;

fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(body);
    out
}

/// `n` images whose pixel `p` of image `i` is `(7 i + p) % 256`, labels `i % 10`.
fn write_fixture(dir: &Path, n: usize) {
    let pixels: Vec<u8> = (0..n * ROWS * COLS)
        .map(|k| ((7 * (k / (ROWS * COLS)) + k % (ROWS * COLS)) % 256) as u8)
        .collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    fs::write(
        dir.join("train-images-idx3-ubyte"),
        idx_bytes(0x803, &[n as u32, ROWS as u32, COLS as u32], &pixels),
    )
    .unwrap();
    fs::write(
        dir.join("train-labels-idx1-ubyte"),
        idx_bytes(0x801, &[n as u32], &labels),
    )
    .unwrap();
}

#[test]
fn loads_pixels_scaled_to_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 20);
    let data = load_mnist_dir(dir.path()).unwrap();
    assert_eq!(data.len(), 20);
    assert_eq!(data.features, ROWS * COLS);
    assert_eq!(data.image_shape, Some((ROWS, COLS)));
    assert_eq!(data.num_classes, 10);
    assert_eq!(data.labels[13], 3);
    // image 3, pixel 4: (21 + 4) / 255
    assert_eq!(data.row(3)[4], 25.0 / 255.0);
    assert!(data.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn wrong_magic_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 4);
    let images = dir.path().join("train-images-idx3-ubyte");
    let labels = dir.path().join("train-labels-idx1-ubyte");
    // label file passed where images are expected
    let err = load_mnist_idx(&labels, &images).unwrap_err();
    assert!(matches!(
        err,
        Error::UnexpectedMagic {
            expected: 0x803,
            found: 0x801,
            ..
        }
    ));
    assert!(err.to_string().contains("unexpected magic"));
}

#[test]
fn truncated_and_mismatched_files() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 4);
    let images = dir.path().join("train-images-idx3-ubyte");
    let mut bytes = fs::read(&images).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&images, &bytes).unwrap();
    assert!(matches!(
        load_mnist_dir(dir.path()),
        Err(Error::Truncated { .. })
    ));

    write_fixture(dir.path(), 4);
    fs::write(
        dir.path().join("train-labels-idx1-ubyte"),
        idx_bytes(0x801, &[3], &[0, 1, 2]),
    )
    .unwrap();
    assert!(matches!(
        load_mnist_dir(dir.path()),
        Err(Error::CountMismatch {
            images: 4,
            labels: 3
        })
    ));

    fs::write(dir.path().join("train-labels-idx1-ubyte"), [0u8, 0]).unwrap();
    assert!(load_mnist_dir(dir.path()).is_err());
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_mnist_dir(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn crop_shrinks_the_input() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 30);
    let data = load_mnist_dir(dir.path()).unwrap();
    let spec = StreamSpec {
        kind: StreamKind::RandomLabel,
        subset_size: 30,
        num_tasks: 2,
        batch_size: 8,
        crop: Some(4),
        ..StreamSpec::default()
    };
    let stream = Stream::new(&spec, Some(&data), 0).unwrap();
    assert_eq!(stream.input_width(), 16);
    for batch in stream {
        assert_eq!(batch.inputs.shape()[1], 16);
    }
}

#[test]
fn experiment_runs_on_idx_data() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 40);
    let mut cfg = ExperimentConfig {
        name: "idx".into(),
        stream: StreamSpec {
            kind: StreamKind::Permuted,
            subset_size: 40,
            num_tasks: 2,
            batch_size: 10,
            ..StreamSpec::default()
        },
        model: ModelConfig { hidden: vec![8] },
        ..ExperimentConfig::default()
    };
    cfg.data.idx_dir = Some(dir.path().to_path_buf());
    let (summary, records) = run_experiment(&cfg, &[0], None).unwrap();
    assert!(!summary.failed());
    assert_eq!(records[0].rows.len(), 8);
    assert_eq!(summary.per_task.len(), 2);
}
