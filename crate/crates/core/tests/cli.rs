use std::path::Path;
use std::process::{Command, Output};

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defectdiff"))
        .args(args)
        .current_dir(cwd)
        .env("DEFECTDIFF_WEIGHTS_DIR", cwd.join("weights"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["make-demo-corpus", "--out", "data", "--good", "12", "--broken", "6", "--size", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(tmp.path(), &["init-config", "--data-root", "data", "--output-root", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    tmp
}

#[test]
fn zero_epochs_fail_before_any_work() {
    let tmp = setup();
    let o = run(tmp.path(), &["train-ddpm", "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn gpu_device_is_rejected() {
    let tmp = setup();
    let o = run(tmp.path(), &["--device", "gpu", "train-ddpm"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unsupported"), "{}", stderr(&o));
}

#[test]
fn missing_config_names_the_fix() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["augment"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("init-config"), "{}", stderr(&o));
}

#[test]
fn steps_out_of_order_report_missing_prerequisites() {
    let tmp = setup();
    let o = run(tmp.path(), &["generate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train-ddpm"), "{}", stderr(&o));
    let o = run(tmp.path(), &["train-classifier", "--arm", "augmented", "--backbone", "mobilenetv2"]);
    assert!(!o.status.success());
    let o = run(tmp.path(), &["evaluate", "--arm", "real", "--backbone", "resnet50v2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train-classifier"), "{}", stderr(&o));
}

#[test]
fn missing_weights_point_to_init_weights() {
    let tmp = setup();
    let o = run(tmp.path(), &["tsne"]);
    assert!(!o.status.success());
    let o = run(tmp.path(), &["train-classifier", "--arm", "real", "--backbone", "resnet50v2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("init-weights"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let tmp = setup();
    let o = run(tmp.path(), &["evaluate", "--arm", "both"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(tmp.path(), &["evaluate", "--arm", "real", "--threshold", "1.5"]);
    assert!(!o.status.success());
}

#[test]
fn single_steps_run_in_sequence() {
    let tmp = setup();
    let cfg_path = tmp.path().join("defectdiff.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["ddpm"]["epochs"] = 2.into();
    cfg["generation"]["num_images"] = 4.into();
    cfg["classifiers"] = serde_json::json!([cfg["classifiers"][2].clone()]);
    cfg["classifiers"][0]["train"]["max_epochs"] = 1.into();
    cfg["analysis"]["backbone"] = "mobilenetv2".into();
    cfg["analysis"]["tsne"]["perplexity"] = 3.0.into();
    cfg["analysis"]["tsne"]["iterations"] = 50.into();
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    for args in [
        &["init-weights"][..],
        &["train-ddpm"],
        &["train-ddpm", "--epochs", "3", "--resume"],
        &["generate"],
        &["augment"],
        &["train-classifier", "--arm", "real"],
        &["train-classifier", "--arm", "augmented"],
        &["evaluate", "--arm", "augmented", "--threshold", "0.5"],
        &["tsne"],
    ] {
        let o = run(tmp.path(), args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let out = tmp.path().join("out");
    for f in [
        "ddpm/run.json",
        "synthetic/generation_meta.json",
        "preview/grid.png",
        "manifests/composition.json",
        "classifiers/augmented/mobilenetv2/classifier.json",
        "eval/augmented/mobilenetv2/eval.json",
        "tsne/tsne.svg",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval/augmented/mobilenetv2/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["report"]["threshold"], 0.5);
    assert_eq!(eval["stamp"]["config_sha256"].as_str().unwrap().len(), 64);
}
