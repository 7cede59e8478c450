use std::path::Path;
use std::process::{Command, Output};

fn splatterlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatterlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

const TINY: &str = r#"{
    "dataset": {"input_width": 48, "input_height": 32, "view_size": 24, "n_views": 4},
    "fit": {"iterations": 3, "grid_size": 8, "layers": 1, "holdout": 1}
}"#;

#[test]
fn gen_then_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let out = splatterlab(&["gen", "--n", "3", "--seed", "7", "--out", path(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
    let out = splatterlab(&["validate-ds", path(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 samples, 0 failures"));
}

#[test]
fn generation_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    for name in ["a", "b"] {
        let out = splatterlab(&["gen", "--config", path(&cfg), "--n", "2", "--seed", "3", "--out", path(&tmp.path().join(name))]);
        assert_eq!(code(&out), 0);
    }
    let mut files = 0;
    for entry in walk(&tmp.path().join("a")) {
        let rel = entry.strip_prefix(tmp.path().join("a")).unwrap();
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(tmp.path().join("b").join(rel)).unwrap(), "{rel:?}");
        files += 1;
    }
    assert!(files > 10);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn corrupted_dataset_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&splatterlab(&["gen", "--config", path(&cfg), "--out", path(&data)])), 0);
    let manifest = data.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("\"n_views\": 4", "\"n_views\": 5");
    std::fs::write(&manifest, text).unwrap();
    let out = splatterlab(&["validate-ds", path(&data)]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&splatterlab(&["validate-ds", path(&tmp.path().join("missing"))])), 1);
}

#[test]
fn fit_render_geo_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = tmp.path().join("d");
    let fits = tmp.path().join("fits");
    assert_eq!(code(&splatterlab(&["gen", "--config", path(&cfg), "--out", path(&data)])), 0);
    let out = splatterlab(&["fit", "--config", path(&cfg), "--data", path(&data), "--out", path(&fits), "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dir = fits.join("sample_0000");
    for f in ["grid.bin", "decode.json", "fit.json", "trace.jsonl"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let trace = std::fs::read_to_string(dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert!(first["L_e"].is_number() && first["iteration"] == 0);

    let grid = dir.join("grid.bin");
    let sweep = tmp.path().join("sweep");
    let out = splatterlab(&["render", "--grid", path(&grid), "--sweep", "--out", path(&sweep)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&sweep)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["sweep_-20.png", "sweep_-40.png", "sweep_0.png", "sweep_20.png", "sweep_40.png"]);

    let out = splatterlab(&["render", "--grid", path(&grid)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_dir(dir.join("renders")).unwrap().count(), 4);

    let out = splatterlab(&["geo", "--grid", path(&grid)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(dir.join("geometry")).unwrap().count(), 6);

    let out = splatterlab(&["eval", "--grid", path(&grid), "--jitter-frames", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["views"].as_array().unwrap().len(), 4);
    assert!(report["jitter"].as_f64().unwrap() >= 0.0);
    assert!(report["held_out_mean_psnr"].is_number());
    for r in report["renders"].as_array().unwrap() {
        assert!(dir.join(r.as_str().unwrap()).exists());
    }

    // A fixed seed reproduces the grid bit for bit.
    let again = tmp.path().join("again");
    assert_eq!(
        code(&splatterlab(&["fit", "--config", path(&cfg), "--data", path(&data), "--out", path(&again), "--seed", "2"])),
        0
    );
    assert_eq!(std::fs::read(&grid).unwrap(), std::fs::read(again.join("sample_0000/grid.bin")).unwrap());
}

#[test]
fn gradcheck_subset_passes() {
    let out = splatterlab(&["gradcheck", "--cases", "3", "--op", "decode", "--op", "loss_jitter"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&splatterlab(&[])), 2);
    assert_eq!(code(&splatterlab(&["frobnicate"])), 2);
    assert_eq!(code(&splatterlab(&["gen", "--n", "many"])), 2);
    assert_eq!(code(&splatterlab(&["gen", "--n", "1"])), 2);
    assert_eq!(code(&splatterlab(&["gradcheck", "--op", "nope"])), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_splatterlab"))
        .args(["gradcheck", "--cases", "1", "--op", "decode"])
        .env("SPLATTERLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert_eq!(code(&splatterlab(&["--help"])), 0);
}

#[test]
fn domain_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"fit": {"iterations": 0}}"#).unwrap();
    let out = splatterlab(&["gen", "--config", path(&bad), "--out", path(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 1);
    std::fs::write(&bad, r#"{"fit": {"iterationz": 3}}"#).unwrap();
    let out = splatterlab(&["gen", "--config", path(&bad), "--out", path(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 1);
    let out = splatterlab(&["render", "--grid", path(&tmp.path().join("nothing.bin"))]);
    assert_eq!(code(&out), 1);
}
