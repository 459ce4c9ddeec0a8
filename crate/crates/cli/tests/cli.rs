use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lesionseg::metrics::dice;
use lesionseg::volume_io::{read_label_raster, read_mask, read_volume, payload_path};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lesionseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One small ellipsoid phantom written into `dir`.
fn phantom(dir: &Path, count: &str) {
    let o = run(&["phantom", "--count", count, "--seed", "3", "--out", p(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn no_arguments_is_usage_error() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("segment2d"));
}

#[test]
fn segment2d_on_phantom() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "1");
    let out = dir.path().join("seg.vol.json");
    let o = run(&[
        "segment2d",
        "--volume",
        p(&dir.path().join("lesion000.vol.json")),
        "--recist",
        p(&dir.path().join("lesion000.recist.json")),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pred = read_mask(&out).unwrap();
    let gt = read_mask(dir.path().join("lesion000.mask.vol.json")).unwrap();
    let z = lesionseg::volume_io::read_annotations(dir.path().join("lesion000.recist.json")).unwrap()[0].slice_index;
    let sl = |m: &lesionseg::volume_io::Mask| lesionseg::volume_io::Mask::from_grid(&m.slice(z), [1.0; 3]).unwrap();
    assert!(dice(&sl(&pred), &sl(&gt)).unwrap() > 0.85);
    // only the RECIST slice is segmented
    assert_eq!(pred.count(), pred.slice(z).count_nonzero());
}

#[test]
fn truncated_payload_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "1");
    let vol = dir.path().join("lesion000.vol.json");
    let raw = payload_path(&vol);
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..bytes.len() - 7]).unwrap();
    let o = run(&[
        "segment2d",
        "--volume",
        p(&vol),
        "--recist",
        p(&dir.path().join("lesion000.recist.json")),
        "--out",
        p(&dir.path().join("x.vol.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("size mismatch"), "{}", stderr(&o));
    assert!(!dir.path().join("x.vol.json").exists());
}

#[test]
fn trimap_export_codes() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "1");
    let out = dir.path().join("t.vol.json");
    let o = run(&[
        "trimap",
        "--volume",
        p(&dir.path().join("lesion000.vol.json")),
        "--recist",
        p(&dir.path().join("lesion000.recist.json")),
        "--mode",
        "recist-dilate",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, data) = read_label_raster(&out).unwrap();
    assert_eq!(h.dims[2], 1);
    assert!(data.iter().all(|v| [0, 1, 255].contains(v)));
    assert!(data.contains(&1) && data.contains(&255));
}

#[test]
fn bad_trimap_mode_is_usage_error() {
    let o = run(&["trimap", "--volume", "a", "--recist", "b", "--mode", "nope", "--out", "c"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn estimate_recist_lists_offsets() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "1");
    let out = dir.path().join("est.json");
    let o = run(&[
        "estimate-recist",
        "--volume",
        p(&dir.path().join("lesion000.vol.json")),
        "--recist",
        p(&dir.path().join("lesion000.recist.json")),
        "--max-offset",
        "2",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let offsets: Vec<i64> = v.as_array().unwrap().iter().map(|e| e["offset"].as_i64().unwrap()).collect();
    assert_eq!(offsets, vec![-2, -1, 0, 1, 2]);
}

#[test]
fn evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "1");
    let gt = dir.path().join("lesion000.mask.vol.json");
    let out = dir.path().join("eval");
    let o = run(&["evaluate", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().contains("1.000000"));
    assert!(out.join("summary.json").exists());
}

#[test]
fn evaluate_count_mismatch_is_usage_error() {
    let o = run(&["evaluate", "--pred", "a", "b", "--gt", "a", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn degrade_and_enhance() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "1");
    let vol = dir.path().join("lesion000.vol.json");
    let out = dir.path().join("pairs");
    let o = run(&["degrade", "--volume", p(&vol), "--slice", "8", "--mode", "denoise", "--count", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let x = read_volume(out.join("input.vol.json")).unwrap();
    assert_eq!(x.dims(), [32, 32, 3]);
    let stack = dir.path().join("stack.vol.json");
    let o = run(&["enhance", "--volume", p(&vol), "--out", p(&stack)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = read_volume(&stack).unwrap();
    let v = read_volume(&vol).unwrap();
    assert_eq!(s.dims()[2], 3 * v.dims()[2]);
    assert!(fs::read_to_string(&stack).unwrap().contains("\"channels\": 3"));
}

#[test]
fn split_keeps_patients_together() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "6");
    let out = dir.path().join("folds.json");
    let o = run(&["split", "--records", p(&dir.path().join("records.json")), "--folds", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        // random_spec puts two lesions per patient
        assert_eq!(pair[0]["fold"], pair[1]["fold"]);
    }
    let o = run(&["split", "--records", p(&dir.path().join("records.json")), "--folds", "9", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn segment3d_small_run() {
    let dir = tempfile::tempdir().unwrap();
    phantom(dir.path(), "2");
    let records = dir.path().join("records.json");
    let out = dir.path().join("seg");
    let o = run(&["segment3d", "--records", p(&records), "--k", "1", "--epochs", "5", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("harvest_log.json").exists());
    let m = read_mask(out.join("lesion000.mask.vol.json")).unwrap();
    let gt = read_mask(dir.path().join("lesion000.mask.vol.json")).unwrap();
    assert!(dice(&m, &gt).unwrap() > 0.5);

    let model = dir.path().join("model.json");
    let o = run(&["train-appearance", "--records", p(&records), "--k", "0", "--epochs", "5", "--out", p(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out2 = dir.path().join("seg2");
    let o = run(&[
        "segment3d", "--records", p(&records), "--model", p(&model), "--no-gc", "--out", p(&out2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out2.join("lesion001.mask.vol.json").exists());
    assert!(!out2.join("harvest_log.json").exists());
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["experiment", "trimap-modes", "--lesions", "3", "--seed", "5", "--threads", "2", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["trimap_modes.csv", "trimap_modes_summary.csv", "trimap_modes_summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let summary = fs::read_to_string(a.join("trimap_modes_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn unknown_experiment_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["experiment", "nope", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown experiment"));
}
