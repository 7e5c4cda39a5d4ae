use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flexagg::matpower::{read_case, to_matpower_text};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn flexagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexagg"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn aggregate_writes_four_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("agg");
    let o = flexagg(&["aggregate", "--case", s(&data("case10ba.m")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        files(&out),
        ["lds_vertices.csv", "loss_record.csv", "overlay.svg", "slc_boundary.csv"]
    );
    let record = fs::read_to_string(out.join("loss_record.csv")).unwrap();
    assert_eq!(record.lines().count(), 2);
    assert_eq!(record.lines().nth(1).unwrap().split(',').count(), 12);
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(report.contains("Hausdorff"), "{report}");
}

#[test]
fn cloud_export_has_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let o = flexagg(&[
        "aggregate",
        "--case",
        s(&data("case10ba.m")),
        "--resolution",
        "11",
        "--export-cloud",
        "--out",
        s(tmp.path()),
    ]);
    assert!(o.status.success());
    let cloud = fs::read_to_string(tmp.path().join("cloud.csv")).unwrap();
    assert_eq!(cloud.lines().count(), 1 + 121);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let case33 = data("case33mg.m");
    let mut outs = Vec::new();
    for k in 0..2 {
        let a = tmp.path().join(format!("a{k}"));
        let c = tmp.path().join(format!("c{k}"));
        let args = ["--case", s(&case33), "--resolution", "31", "--out", s(&a)];
        assert!(flexagg(&[&["aggregate", "--export-cloud"][..], &args[..]].concat()).status.success());
        assert!(flexagg(&[&["dispatch"][..], &args[..]].concat()).status.success());
        assert!(flexagg(&["coordinate", "--case", s(&data("case30.m")), "--out", s(&c)]).status.success());
        outs.push((a, c));
    }
    for dir in [|p: &(PathBuf, PathBuf)| p.0.clone(), |p: &(PathBuf, PathBuf)| p.1.clone()] {
        let (x, y) = (dir(&outs[0]), dir(&outs[1]));
        assert_eq!(files(&x), files(&y));
        for f in files(&x) {
            assert_eq!(fs::read(x.join(&f)).unwrap(), fs::read(y.join(&f)).unwrap(), "{f} differs");
        }
    }
}

#[test]
fn coordinate_blocks_and_reference_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let case30 = data("case30.m");
    let o = flexagg(&["coordinate", "--case", s(&case30), "--method", "reference", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("dispatch.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let gap = header.iter().position(|&h| h == "cost_gap").unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 29);
    assert!(rows.iter().all(|r| r.split(',').nth(gap) == Some("0")));

    let o = flexagg(&[
        "coordinate",
        "--case",
        s(&case30),
        "--method",
        "lds,slc,reference",
        "--out",
        s(tmp.path()),
    ]);
    assert!(o.status.success());
    let csv = fs::read_to_string(tmp.path().join("dispatch.csv")).unwrap();
    for m in ["lds", "slc", "reference"] {
        let n = csv.lines().filter(|l| l.starts_with(&format!("{m},"))).count();
        assert_eq!(n, 29, "{m}");
    }
    assert!(tmp.path().join("gaps.svg").exists());
}

#[test]
fn missing_files_exit_with_two() {
    let o = flexagg(&["aggregate", "--case", "/nonexistent/case10ba.m"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/case10ba.m"));

    let tmp = tempfile::tempdir().unwrap();
    let o = flexagg(&[
        "coordinate",
        "--case",
        s(&data("case30.m")),
        "--feeder-dir",
        s(tmp.path()),
        "--out",
        s(&tmp.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("case"));
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        vec!["aggregate", "--case", "x.m", "--resolution", "abc"],
        vec!["aggregate", "--case", s(&data("case10ba.m")), "--der-fraction", "1.5"],
        vec!["coordinate", "--case", s(&data("case30.m")), "--thresholds", "5"],
        vec!["dispatch", "--case", s(&data("case10ba.m")), "--denominator", "mean"],
    ] {
        let o = flexagg(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn infeasible_dispatch_names_the_constraints() {
    let tmp = tempfile::tempdir().unwrap();
    let mut case = read_case(&data("case30.m")).unwrap();
    for b in &mut case.branches {
        b.rate_a = 1.0;
    }
    let path = tmp.path().join("tight30.m");
    fs::write(&path, to_matpower_text(&case)).unwrap();
    for t in ["case10ba.m", "case33mg.m", "case118zh.m"] {
        fs::copy(data(t), tmp.path().join(t)).unwrap();
    }
    let o = flexagg(&["coordinate", "--case", s(&path), "--method", "lds", "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("infeasible") && err.contains("line "), "{err}");
}

#[test]
fn config_file_is_read_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "case = \"{}\"\nresolution = 5\nprices = [40.0, 80.0]\nmethods = [\"lds\"]\n",
            s(&data("case10ba.m"))
        ),
    )
    .unwrap();
    let out = tmp.path().join("d");
    let o = flexagg(&["dispatch", "--config", s(&cfg), "--method", "slc", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("price_sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("slc,")));

    fs::write(&cfg, "resolution = 5\nbogus = 1\n").unwrap();
    let o = flexagg(&["aggregate", "--config", s(&cfg), "--case", s(&data("case10ba.m"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn difference_denominator_is_a_numerical_failure_on_real_feeders() {
    // the squared-voltage difference starts near zero and the sweep blows up
    let tmp = tempfile::tempdir().unwrap();
    let o = flexagg(&[
        "aggregate",
        "--case",
        s(&data("case10ba.m")),
        "--resolution",
        "11",
        "--denominator",
        "difference",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no convergence"));
}
