use std::path::Path;
use std::process::Command;

fn dst(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dst"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"{
    "seed": 3,
    "model": {"d_model": 16, "heads": 4, "layers": 6},
    "teacher": {"epochs": 1, "batch_size": 16},
    "dst": {"epochs": 1, "batch_size": 16, "k": 3},
    "data": {"train_size": 48, "val_size": 32}
}"#;

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.json"), CONFIG).unwrap();
    let c = ["--config", "run.json"];

    let out = dst(d, &[&["train-teacher", "--log", "teacher.jsonl"][..], &c].concat());
    assert!(out.contains("3 steps"), "{out}");
    assert_eq!(std::fs::read_to_string(d.join("teacher.jsonl")).unwrap().lines().count(), 3);

    let out = dst(d, &[&["train-dst", "--strategy", "inplace-distill"][..], &c].concat());
    assert!(out.contains("3 steps"), "{out}");

    let out = dst(d, &[&["eval", "--checkpoint", "dst.dst", "--width-ratio", "0.5", "--depth-ratio", "1"][..], &c].concat());
    assert!(out.contains("a(8, 6) accuracy"), "{out}");
    assert!(out.contains("/32)"));

    dst(d, &[&["export", "--checkpoint", "dst.dst", "--width-ratio", "0.25", "--depth-ratio", "0.3333", "--out", "small.dst"][..], &c].concat());
    let out = dst(d, &[&["eval", "--checkpoint", "small.dst"][..], &c].concat());
    assert!(out.starts_with("a(4, 2)"), "{out}");

    dst(d, &[&["sweep", "--checkpoint", "dst.dst", "--out", "a.csv"][..], &c].concat());
    dst(d, &[&["sweep", "--checkpoint", "dst.dst", "--out", "b.csv", "--serial"][..], &c].concat());
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 11);

    dst(d, &[&["attn-dump", "--checkpoint", "dst.dst", "--width-ratio", "0.25", "--depth-ratio", "0.3333"][..], &c].concat());
    let maps: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("attention.json")).unwrap()).unwrap();
    assert_eq!(maps.as_array().unwrap().len(), 6);
}

#[test]
fn analyze_cost_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dst(dir.path(), &["analyze-cost"]);
    assert_eq!(out.lines().count(), 11);
    assert!(out.starts_with("arch_width,arch_depth,kept_layers,"));

    let status = Command::new(env!("CARGO_BIN_EXE_dst"))
        .args(["eval", "--checkpoint", "missing.dst"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!status.status.success());
    let status = Command::new(env!("CARGO_BIN_EXE_dst"))
        .args(["analyze-cost", "--preset", "nope"])
        .output()
        .unwrap();
    assert!(!status.status.success());
}
