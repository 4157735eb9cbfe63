use std::path::{Path, PathBuf};

use propmlp::binio::write_matrix;
use propmlp::dense::Matrix;
use propmlp::io::dataset::{load_dataset, save_dataset};
use propmlp::Error;

fn toy_copy() -> (tempfile::TempDir, PathBuf) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("toy");
    std::fs::create_dir(&dir).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dir.join(entry.file_name())).unwrap();
    }
    (tmp, dir)
}

fn problems(dir: &Path) -> Vec<String> {
    match load_dataset(dir) {
        Err(Error::Validation(lines)) => lines,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn toy_bundle_loads() {
    let (_tmp, dir) = toy_copy();
    let ds = load_dataset(&dir).unwrap();
    assert_eq!(ds.summary().to_string(), "N=5 M=5 d=100 C=2 train=2 valid=1 test=2");
    assert_eq!(ds.graph.degrees(), &[1, 3, 2, 3, 1]);
    assert_eq!(ds.class_names.as_deref(), Some(&["left".to_string(), "right".to_string()][..]));
}

#[test]
fn overlapping_splits_are_reported_with_lines() {
    let (_tmp, dir) = toy_copy();
    std::fs::write(dir.join("valid.txt"), "1\n0\n").unwrap();
    let lines = problems(&dir);
    assert!(
        lines.iter().any(|l| l.ends_with("valid.txt:2: node 0 also in train.txt (line 1)")),
        "{lines:?}"
    );
}

#[test]
fn every_problem_is_listed() {
    let (_tmp, dir) = toy_copy();
    std::fs::write(dir.join("labels.tsv"), "0\t0\n1\tx\n9\t1\n").unwrap();
    std::fs::write(dir.join("test.txt"), "2\n2\n").unwrap();
    let lines = problems(&dir);
    assert!(lines.iter().any(|l| l.contains("labels.tsv:2: expected node<TAB>class")), "{lines:?}");
    assert!(lines.iter().any(|l| l.contains("labels.tsv:3: node 9 out of range (N=5)")), "{lines:?}");
    assert!(lines.iter().any(|l| l.contains("test.txt:2: node 2 repeated")), "{lines:?}");
    assert!(lines.iter().any(|l| l.contains("training node 4 has no label")), "{lines:?}");
}

#[test]
fn edge_ids_beyond_the_feature_rows_are_a_format_error() {
    let (_tmp, dir) = toy_copy();
    write_matrix(&dir.join("features.bin"), &Matrix::<f32>::zeros(4, 3)).unwrap();
    let e = load_dataset(&dir).unwrap_err();
    assert_eq!(e.code(), "E_FORMAT", "{e}");
    assert!(e.to_string().contains("references node 4"), "{e}");
}

#[test]
fn save_then_load_round_trips() {
    let (tmp, dir) = toy_copy();
    let ds = load_dataset(&dir).unwrap();
    let copy = tmp.path().join("copy");
    save_dataset(&copy, &ds).unwrap();
    let back = load_dataset(&copy).unwrap();
    assert_eq!(back.graph, ds.graph);
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.splits, ds.splits);
    assert_eq!(back.class_names, ds.class_names);
}
