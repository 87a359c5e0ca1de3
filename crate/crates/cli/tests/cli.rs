use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn metadr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metadr")).args(args).current_dir(cwd).env("METADR_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn desk_p1() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_p1.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny() -> Value {
    let mut c = desk_p1();
    c["protocol"]["domains"][0]["source"]["synthetic"]["count"] = json!(200);
    c["trainer"]["steps"] = json!(5);
    c["seeds"] = json!([0, 1]);
    c
}

fn write_config(dir: &Path, name: &str, c: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gradcheck_passes_and_the_sign_flip_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = metadr(&["gradcheck"], dir.path());
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "{text}");
    assert!(text.contains("50 instances") && text.contains("excluded") && text.contains("exact: true"), "{text}");
    let bad = metadr(&["gradcheck", "--inject-sign-flip", "--instances", "4"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn negative_beta_is_rejected_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (path, value) in [("trainer", json!({"beta": -1.0})), ("method", json!({"method": "metadr", "beta": -0.5}))] {
        let mut c = tiny();
        if path == "trainer" {
            c["trainer"]["beta"] = value["beta"].clone();
        } else {
            c["methods"] = json!([value]);
        }
        let cfg = write_config(dir.path(), "bad.json", &c);
        let o = metadr(&["run", cfg.to_str().unwrap(), "--output", "out"], dir.path());
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
        assert!(!dir.path().join("out").exists(), "nothing may be computed or written");
    }
    let mut c = tiny();
    c["trainer"]["unknown_knob"] = json!(1);
    let cfg = write_config(dir.path(), "bad.json", &c);
    let o = metadr(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown_knob"));
}

#[test]
fn desk_config_yields_a_report_per_method_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = desk_p1();
    c["protocol"]["domains"][0]["source"]["synthetic"]["count"] = json!(300);
    let cfg = write_config(dir.path(), "desk.json", &c);
    let o = metadr(&["run", cfg.to_str().unwrap(), "--output", "out", "--steps", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let files = read_tree(&dir.path().join("out"));
    let reports = files.iter().filter(|(p, _)| p.file_name().unwrap().to_str().unwrap().starts_with("seed-") && p.extension().unwrap() == "json");
    assert_eq!(reports.count(), 9);
    let aggs = files.iter().filter(|(p, _)| p.ends_with("aggregate.json")).count();
    assert_eq!(aggs, 3);
    let agg: Value = serde_json::from_slice(&fs::read(dir.path().join("out/metadr/aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["seeds"], json!([0, 1, 2]));
    assert_eq!(agg["config"]["trainer"]["steps"], json!(2), "flag overrides the file");
    let table = fs::read_to_string(dir.path().join("out/table.txt")).unwrap();
    assert!(table.contains("naive_dr") && table.contains("clean"));
    // only the output directory and the config exist in the working directory
    let mut top: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["desk.json", "out"]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &tiny());
    for out in ["a", "b"] {
        assert!(metadr(&["run", cfg.to_str().unwrap(), "--output", out], dir.path()).status.success());
    }
    let a = read_tree(&dir.path().join("a"));
    assert!(!a.is_empty());
    assert_eq!(a, read_tree(&dir.path().join("b")));
}

#[test]
fn divergence_exits_3_with_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c["trainer"]["lr"] = json!(1e30);
    c["trainer"]["optimizer"] = json!("sgd");
    c["methods"] = json!(["naive"]);
    let cfg = write_config(dir.path(), "div.json", &c);
    let o = metadr(&["run", cfg.to_str().unwrap(), "--output", "out"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let partial: Value = serde_json::from_slice(&fs::read(dir.path().join("out/naive/seed-0.json")).unwrap()).unwrap();
    assert!(partial["status"].as_str().unwrap().starts_with("aborted"));
}

#[test]
fn report_command_tables_curves_and_refusals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", &tiny());
    assert!(metadr(&["run", cfg.to_str().unwrap(), "--output", "out"], dir.path()).status.success());

    let one = metadr(&["report", "out/naive/seed-0.json"], dir.path());
    assert!(one.status.success());
    let table = String::from_utf8(one.stdout).unwrap();
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("out/naive/seed-0.json")).unwrap()).unwrap();
    let row = table.lines().nth(2).unwrap();
    for v in report["final"].as_array().unwrap() {
        assert!(row.contains(&format!("{:.1} ± 0.0", 100.0 * v.as_f64().unwrap())), "{row}");
    }

    let all = ["report", "out/naive/seed-0.json", "out/naive/seed-1.json", "out/metadr/seed-0.json", "--format", "csv"];
    let a = metadr(&all, dir.path());
    assert!(a.status.success());
    assert_eq!(a.stdout, metadr(&all, dir.path()).stdout);
    let csv = String::from_utf8(a.stdout).unwrap();
    assert!(csv.starts_with("method,stage,clean,colorize,invert_noise\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let mut other = tiny();
    other["protocol"]["seed"] = json!(99);
    let cfg2 = write_config(dir.path(), "other.json", &other);
    assert!(metadr(&["run", cfg2.to_str().unwrap(), "--output", "other", "--seeds", "5"], dir.path()).status.success());
    let mixed = metadr(&["report", "out/naive/seed-0.json", "other/naive/seed-5.json"], dir.path());
    assert_eq!(mixed.status.code(), Some(2));
    assert!(stderr(&mixed).contains("mixed"));
}

#[test]
fn transforms_manifests_are_seeded_and_use_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (12u32, 9u32);
    let px: Vec<u8> = (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect();
    let header = format!("P6\n{w} {h}\n255\n");
    fs::write(dir.path().join("in.ppm"), [header.as_bytes(), &px].concat()).unwrap();
    for out in ["a", "b"] {
        let o = metadr(&["transforms", "psi3", "in.ppm", "--seed", "3", "--samples", "5", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read_tree(&dir.path().join("a")), read_tree(&dir.path().join("b")));
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    let samples = m["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 5);
    for s in samples {
        assert_eq!(s["transforms"].as_array().unwrap().len(), 2);
        assert!(dir.path().join("a").join(s["file"].as_str().unwrap()).exists());
    }
    let other = metadr(&["transforms", "psi3", "in.ppm", "--seed", "4", "--out", "c"], dir.path());
    assert!(other.status.success());
    assert_ne!(fs::read(dir.path().join("a/manifest.json")).unwrap(), fs::read(dir.path().join("c/manifest.json")).unwrap());

    let unknown = metadr(&["transforms", "psi7", "in.ppm"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
}
