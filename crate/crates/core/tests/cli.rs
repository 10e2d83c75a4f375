use std::path::Path;
use std::process::{Command, Output};

use simsam::feature_io::{self, LabelMask, PatchGrid, TokenFeatureMap};

fn simsam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simsam")).args(args).env_remove("SIMSAM_SEED").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_fixture(dir: &Path, extra: &[&str]) {
    let mut args = vec!["fixture", "--grid", "8x8", "--dim", "16", "--blocks", "2", "--sigma", "0.05", "-o", path(dir)];
    args.extend(extra);
    let out = simsam(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fixture_then_object_segmentation_recovers_mask() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), &[]);
    let ssam = tmp.path().join("fixture.ssam");
    let out_dir = tmp.path().join("out");
    let out = simsam(&["segment", path(&ssam), "-o", path(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let pred = out_dir.join("fixture.mask.pgm");
    let gt = tmp.path().join("fixture.mask.pgm");
    let metrics = simsam(&["metrics", "--pred", path(&pred), "--gt", path(&gt)]);
    assert_eq!(code(&metrics), 0);
    let text = String::from_utf8(metrics.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("miou,matched_miou,accuracy,frobenius"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values[1], 1.0);
    assert_eq!(values[2], 1.0);
    assert_eq!(values[3], 0.0);

    let csv = std::fs::read_to_string(out_dir.join("fixture.loss.csv")).unwrap();
    assert!(csv.starts_with("iter,loss\n"));
    assert_eq!(csv.lines().count(), 12);
}

#[test]
fn loaded_mask_has_patch_grid_of_features() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), &["--patch", "8"]);
    let f = feature_io::load_features(tmp.path().join("fixture.ssam")).unwrap();
    let m = feature_io::load_mask(tmp.path().join("fixture.mask.pgm"), 8).unwrap();
    assert_eq!(f.grid(), m.grid());
    assert_eq!(f.grid().image_height(), 64);
}

#[test]
fn semantic_mode_writes_segments_and_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    let out = simsam(&["fixture", "--grid", "8x8", "--dim", "16", "--blocks", "4", "--sigma", "0.02", "--count", "2", "-o", path(&corpus)]);
    assert_eq!(code(&out), 0);
    let files = [corpus.join("fixture_000.ssam"), corpus.join("fixture_001.ssam")];
    let out_dir = tmp.path().join("o");
    let out = simsam(&[
        "segment",
        path(&files[0]),
        path(&files[1]),
        "--mode",
        "semantic",
        "--eigenvectors",
        "4",
        "--segments",
        "4",
        "--kmeans-k",
        "3",
        "-o",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for stem in ["fixture_000", "fixture_001"] {
        let seg = feature_io::load_mask(out_dir.join(format!("{stem}.segments.pgm")), 16).unwrap();
        let sem = feature_io::load_mask(out_dir.join(format!("{stem}.semantic.pgm")), 16).unwrap();
        assert!(seg.labels().iter().any(|&l| l == 0));
        for (s, c) in seg.labels().iter().zip(sem.labels()) {
            assert_eq!(*s == 0, *c == 0);
            assert!(*c <= 3);
        }
    }
}

#[test]
fn semantic_mode_skips_clustering_with_too_few_segments() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), &[]);
    let out_dir = tmp.path().join("o");
    let out = simsam(&[
        "segment",
        path(&tmp.path().join("fixture.ssam")),
        "--mode",
        "semantic",
        "--eigenvectors",
        "3",
        "--segments",
        "2",
        "-o",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset clustering skipped"));
    assert!(out_dir.join("fixture.segments.pgm").exists());
    assert!(!out_dir.join("fixture.semantic.pgm").exists());
}

#[test]
fn ablation_csv_shape() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), &["--count", "3"]);
    let out = simsam(&["ablate", path(tmp.path()), "--kappas", "0.1,0.5", "--normalize", "both"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], simsam::metrics::CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("W_A+0.1*W_SA,0.1,true,"));
    assert!(lines[4].starts_with("W_A'+0.5*W_SA,0.5,false,"));
}

#[test]
fn export_affinity_formats() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), &[]);
    let ssam = tmp.path().join("fixture.ssam");
    let f = feature_io::load_features(&ssam).unwrap();

    let as_ssam = tmp.path().join("w.ssam");
    assert_eq!(code(&simsam(&["export-affinity", path(&ssam), "--kind", "unnormalized", "-o", path(&as_ssam)])), 0);
    let w = feature_io::load_features(&as_ssam).unwrap();
    assert_eq!((w.grid().rows(), w.grid().cols(), w.dim()), (64, 64, 1));
    let expected = simsam::affinity::vanilla_affinity(&f, false);
    for ((i, j), v) in expected.values().indexed_iter() {
        assert_eq!(w.tokens()[[i * 64 + j, 0]], *v as f32);
    }

    let as_pgm = tmp.path().join("w.pgm");
    assert_eq!(code(&simsam(&["export-affinity", path(&ssam), "--kind", "combined", "-o", path(&as_pgm)])), 0);
    let (width, height, _) = feature_io::decode_pgm(&std::fs::read(&as_pgm).unwrap()).unwrap();
    assert_eq!((width, height), (64, 64));
}

#[test]
fn seed_from_environment_matches_flag() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), &[]);
    let ssam = tmp.path().join("fixture.ssam");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&simsam(&["segment", path(&ssam), "--seed", "11", "-o", path(&a)])), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_simsam"))
        .args(["segment", path(&ssam), "-o", path(&b)])
        .env("SIMSAM_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let read = |d: &Path| std::fs::read(d.join("fixture.loss.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = path(tmp.path());
    assert_eq!(code(&simsam(&[])), 2);
    assert_eq!(code(&simsam(&["segment"])), 2);
    assert_eq!(code(&simsam(&["fixture", "--grid", "2x2", "--dim", "4", "--blocks", "5", "-o", t])), 2);
    assert_eq!(code(&simsam(&["fixture", "--grid", "4x4", "--dim", "2", "--blocks", "3", "-o", t])), 2);
    assert_eq!(code(&simsam(&["fixture", "--grid", "4x4", "--dim", "4", "--blocks", "2", "--sigma", "-1", "-o", t])), 2);

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = simsam(&["ablate", path(&empty)]);
    assert_eq!(code(&out), 4);

    let missing = tmp.path().join("missing.ssam");
    assert_eq!(code(&simsam(&["segment", path(&missing), "-o", t])), 1);
    let garbage = tmp.path().join("garbage.ssam");
    std::fs::write(&garbage, b"NOPE0000").unwrap();
    assert_eq!(code(&simsam(&["segment", path(&garbage), "-o", t])), 1);

    // every token identical: the clamped mean-subtracted affinity is all zero
    let grid = PatchGrid::from_patches(3, 3, 16).unwrap();
    let flat = TokenFeatureMap::new(grid, ndarray::Array2::from_elem((9, 4), 0.5f32)).unwrap();
    let flat_path = tmp.path().join("flat.ssam");
    feature_io::save_features(&flat, &flat_path).unwrap();
    let out = simsam(&["segment", path(&flat_path), "--kappa", "0", "-o", t]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("flat"));

    let gt = tmp.path().join("gt.pgm");
    feature_io::save_mask(&LabelMask::new(grid, vec![0; 9]).unwrap(), &gt).unwrap();
    let other = tmp.path().join("other.pgm");
    let grid2 = PatchGrid::from_patches(2, 2, 16).unwrap();
    feature_io::save_mask(&LabelMask::new(grid2, vec![0; 4]).unwrap(), &other).unwrap();
    assert_eq!(code(&simsam(&["metrics", "--pred", path(&other), "--gt", path(&gt)])), 2);
}
