use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use bracketforge::image::{Image, LdrImage};
use bracketforge::merge::io::write_png;

const MODEL: &str = "analytic:gauss:mu=0.5,var=0.03,size=8,c=3,T=30";

fn bf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bracketforge")).args(args).output().unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn checker(h: usize, w: usize) -> LdrImage {
    LdrImage::new(Image::from_fn(h, w, 3, |r, c, ch| ((r * 3 + c * 5 + ch * 7) % 11) as f64 / 10.0)).unwrap()
}

#[test]
fn generate_writes_outputs_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let report = ok_json(&bf(&["generate", "--model", MODEL, "--seed", "3", "--stem", "g", "--out", s(&a)]));
    assert_eq!(report["evs"], serde_json::json!([-4.0, -2.0, 0.0, 2.0, 4.0]));
    for name in ["g_ev-4.png", "g_ev-2.png", "g_ev+0.png", "g_ev+2.png", "g_ev+4.png", "g.pfm", "g_preview.png", "manifest.json"] {
        assert!(a.join(name).is_file(), "missing {name}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["lambdas"].as_array().unwrap().len(), 30);

    let b = dir.path().join("b");
    ok_json(&bf(&["generate", "--config", s(&a.join("manifest.json")), "--out", s(&b)]));
    assert_eq!(std::fs::read(a.join("g.pfm")).unwrap(), std::fs::read(b.join("g.pfm")).unwrap());
}

#[test]
fn serial_and_parallel_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok_json(&bf(&["generate", "--model", MODEL, "--seed", "5", "--out", s(&a)]));
    ok_json(&bf(&["generate", "--model", MODEL, "--seed", "5", "--serial", "--out", s(&b)]));
    assert_eq!(std::fs::read(a.join("sample.pfm")).unwrap(), std::fs::read(b.join("sample.pfm")).unwrap());
}

#[test]
fn reconstruct_keeps_input_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    write_png(&input, &checker(8, 8)).unwrap();
    let out = dir.path().join("r");
    let report = ok_json(&bf(&["reconstruct", "--model", MODEL, "--input", s(&input), "--seed", "1", "--out", s(&out)]));
    assert!(report.get("resized_from").is_none());
    assert_eq!(std::fs::read(out.join("recon_ev+0.png")).unwrap(), std::fs::read(&input).unwrap());
}

#[test]
fn reconstruct_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    write_png(&input, &checker(6, 10)).unwrap();
    let out = dir.path().join("r");
    let err = bf(&["reconstruct", "--model", MODEL, "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&err), 7);
    let body: Value = serde_json::from_slice(&err.stdout).unwrap();
    assert_eq!(body["ok"], false);
    let ok = ok_json(&bf(&[
        "reconstruct",
        "--model",
        MODEL,
        "--input",
        s(&input),
        "--on-size-mismatch",
        "resize",
        "--out",
        s(&out),
    ]));
    assert_eq!(ok["resized_from"], serde_json::json!([6, 10, 3]));
}

#[test]
fn hist_generate_needs_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    assert_eq!(code(&bf(&["hist-generate", "--model", MODEL, "--out", s(&out)])), 3);
    let img = dir.path().join("t.png");
    write_png(&img, &checker(8, 8)).unwrap();
    assert_eq!(
        code(&bf(&["hist-generate", "--model", MODEL, "--saturated-frac", "0.2", "--from-image", s(&img), "--out", s(&out)])),
        3
    );
    let report = ok_json(&bf(&["hist-generate", "--model", MODEL, "--saturated-frac", "0.2", "--bins", "8", "--out", s(&out)]));
    let target = &report["target_histogram"]["channels"];
    assert_eq!(target.as_array().unwrap().len(), 3);
    assert_eq!(target[0].as_array().unwrap().len(), 8);
    assert!(out.join("hist.pfm").is_file());
}

#[test]
fn merge_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    ok_json(&bf(&["generate", "--model", MODEL, "--out", s(&g)]));
    let pfm = dir.path().join("m/merged.pfm");
    let merged = ok_json(&bf(&["merge", "--brackets", s(&g), "--preview", "--out", s(&pfm)]));
    assert!(pfm.is_file() && pfm.with_extension("png").is_file());
    assert!(merged["dynamic_range"].as_f64().unwrap() >= 1.0);
    assert!(dir.path().join("m/merged.pfm.manifest.json").is_file());

    let cons = ok_json(&bf(&["eval", "consistency", "--brackets", s(&g)]));
    assert_eq!(cons["pairs"].as_array().unwrap().len(), 4);

    let crops = dir.path().join("crops");
    ok_json(&bf(&["eval", "crops", "--brackets", s(&g), "--count", "5", "--size", "4", "--out", s(&crops)]));
    assert!(crops.join("patches/manifest.json").is_file());
    assert!(crops.join("patches/ev+0/crop_004.png").is_file());

    let ext = dir.path().join("ext");
    let r = ok_json(&bf(&["eval", "extract", "--hdr", s(&pfm), "--evs", "-2,0,2", "--out", s(&ext)]));
    assert_eq!(r["outputs"].as_array().unwrap().len(), 3);
    let again = ok_json(&bf(&["eval", "consistency", "--brackets", s(&ext)]));
    assert!(again["overall_db"].as_f64().unwrap() > 40.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = s(&out);
    assert_eq!(code(&bf(&["generate", "--model", MODEL, "--evs", "2,4", "--out", o])), 3);
    assert_eq!(code(&bf(&["generate", "--model", "toy:/nonexistent/model.bin", "--out", o])), 4);
    assert_eq!(code(&bf(&["generate", "--model", "onnx:whatever", "--out", o])), 6);
    assert_eq!(code(&bf(&["generate", "--bogus-flag"])), 2);

    let bad = dir.path().join("bad.pfm");
    std::fs::write(&bad, b"PF\n2 2\n-1.0\nshort").unwrap();
    assert_eq!(code(&bf(&["eval", "extract", "--hdr", s(&bad), "--out", o])), 5);

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 1, "params": {"sampling": {"nonsense": 1}}}"#).unwrap();
    assert_eq!(code(&bf(&["generate", "--config", s(&cfg), "--out", o])), 3);

    let g = dir.path().join("g");
    ok_json(&bf(&["generate", "--model", MODEL, "--out", s(&g)]));
    assert_eq!(code(&bf(&["reconstruct", "--config", s(&g.join("manifest.json")), "--out", o])), 3);
}

#[test]
fn train_toy_is_deterministic_in_serial_mode() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let r = ok_json(&bf(&[
            "train-toy",
            "--serial",
            "--seed",
            "2",
            "--scenes",
            "12",
            "--epochs",
            "1",
            "--size",
            "8",
            "--schedule-steps",
            "50",
            "--out",
            s(&path),
        ]));
        assert!(r["report"]["parameters"].as_u64().unwrap() > 0);
        std::fs::read(path).unwrap()
    };
    let a = run("a.bin");
    assert_eq!(a, run("b.bin"));
    assert!(dir.path().join("a.bin.manifest.json").is_file());

    let out = dir.path().join("gen");
    let model = format!("toy:{}", s(&dir.path().join("a.bin")));
    let report = ok_json(&bf(&["generate", "--model", &model, "--steps", "10", "--serial", "--out", s(&out)]));
    assert_eq!(report["shape"], serde_json::json!([8, 8, 3]));
}
